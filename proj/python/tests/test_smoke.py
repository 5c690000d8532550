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

import json
import os

import pytest

import marble_lab as ml


def easy_task():
    return {
        "task_id": "easy",
        "rect_pose": {"x": 0.15, "y": 0.75, "theta": 0.1},
        "goal_pose": {"x": 0.5, "y": 0.2, "theta": 0.0},
        "wind_direction": 1,
        "split": "test",
    }


def test_generate_tasks_split():
    tasks = ml.generate_tasks(100, 3)
    assert len(tasks) == 100
    splits = [t["split"] for t in tasks]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (80, 10, 10)
    assert ml.generate_tasks(100, 3) == tasks
    assert len(ml.encode_state(tasks[0])) == 8


def test_evaluate_action():
    # Track parked in the top-right corner; the ball drops straight in.
    parked = (0.4, -0.02, 0.0)
    res = ml.evaluate_action(easy_task(), parked, seed=1)
    assert res["valid"]
    assert res["success_rate"] == 1.0
    assert len(res["outcomes"]) == 6
    assert all(len(row) == 3 for row in res["outcomes"][0]["samples"])

    blocked = ml.evaluate_action(easy_task(), (0.0, 0.0, 0.0), seed=1)
    assert not blocked["valid"]
    assert blocked["mean_reward"] == -1.0
    assert blocked["outcomes"] == []

    task = ml.generate_tasks(5, 2)[0]
    a = ml.evaluate_action(task, (0.1, -0.3, 0.5), seed=7, wind=True)
    assert a == ml.evaluate_action(task, (0.1, -0.3, 0.5), seed=7, wind=True)


def test_metrics():
    assert ml.iqm([1, 2, 3, 4, 5, 6, 7, 8]) == 4.5
    point, lo, hi = ml.stratified_bootstrap_ci([[0.4, 0.4], [0.4, 0.4]], n_boot=100)
    assert point == pytest.approx(0.4) and lo == pytest.approx(0.4) and hi == pytest.approx(0.4)
    assert ml.content_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
    assert ml.solution_probability(easy_task(), 20, 1) > 0.0


def test_config_and_stage(tmp_path):
    cfg = ml.ExperimentConfig()
    cfg.out = str(tmp_path / "run")
    cfg.num_tasks = 20
    cfg.k = 2
    path = tmp_path / "exp.toml"
    path.write_text(cfg.to_text())
    assert ml.ExperimentConfig.load(str(path)) == cfg

    with pytest.raises(ml.MissingPrerequisite):
        ml.run_stage("gen-data", cfg)
    summary, paths = ml.run_stage("gen-tasks", cfg)
    assert summary == "20 tasks (16/2/2)"
    assert os.path.exists(paths[0])
    with open(paths[0]) as f:
        assert len(json.load(f)["tasks"]) == 20
    with pytest.raises(ml.ConfigError):
        ml.run_stage("gen-tasks", cfg, k=0)
    with pytest.raises(ml.ConfigError):
        ml.run_stage("gen-tasks", cfg, no_such_key=1)
