# Copyright 2026 The Marble Lab Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Python access to the marble-run lab: tasks, action evaluation, metrics, pipeline stages."""

import json

from . import _core
from ._core import (
    ConfigError,
    ExperimentConfig,
    MissingPrerequisite,
    content_hash,
    iqm,
    stage_names,
    stratified_bootstrap_ci,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "MissingPrerequisite",
    "content_hash",
    "encode_state",
    "evaluate_action",
    "generate_tasks",
    "iqm",
    "run_stage",
    "solution_probability",
    "stage_names",
    "stratified_bootstrap_ci",
]


def generate_tasks(n, seed):
    """List of task dicts with task_id, rect_pose, goal_pose, wind_direction, split."""
    return json.loads(_core.generate_tasks(n, seed))["tasks"]


def encode_state(task):
    return _core.encode_state(json.dumps(task))


def evaluate_action(task, action, seed, wind=False, trials=6):
    """Runs the trials of one action; action is (dx, dy, theta) relative to the drop point."""
    return json.loads(_core.evaluate_action(json.dumps(task), list(action), seed, wind, trials))


def solution_probability(task, n_actions, seed, wind=False):
    return _core.solution_probability(json.dumps(task), n_actions, seed, wind)


def run_stage(stage, config=None, **overrides):
    """Runs one pipeline stage; returns (summary, artifact paths)."""
    cfg = config if config is not None else ExperimentConfig()
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key: {key}")
        setattr(cfg, key, value)
    return _core.run_stage(stage, cfg)
