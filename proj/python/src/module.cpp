// Copyright 2026 The Marble Lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Python bindings: task generation, action evaluation, metrics and the lab
// pipeline stages. Structured values cross the boundary as JSON text and are
// decoded by the package wrapper.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "marble/evalkit.hpp"
#include "marble/lab.hpp"
#include "marble/taskgen.hpp"

namespace py = pybind11;
using namespace marble;
using nlohmann::json;

namespace {

std::string generate_tasks(int n, std::uint64_t seed) {
  return taskgen::tasks_to_json(taskgen::generate_tasks(n, seed)).dump();
}

taskgen::Task task_of(const std::string& task_json) { return taskgen::task_from_json(json::parse(task_json)); }

std::string evaluate_action(const std::string& task_json, const std::array<double, 3>& action, std::uint64_t seed,
                            bool wind, int trials) {
  const auto task = task_of(task_json);
  const auto e = taskgen::evaluate_task_action(task, action, taskgen::task_dynamics(task, wind), seed, trials);
  json outcomes = json::array();
  for (const auto& o : e.outcomes)
    outcomes.push_back({{"success", o.success},
                        {"d_min", o.d_min},
                        {"termination", sim::to_string(o.termination)},
                        {"samples", sim::trajectory_to_json(o.trajectory)}});
  return json{{"valid", e.valid},
              {"success_rate", e.success_rate},
              {"mean_reward", e.mean_reward},
              {"rewards", e.rewards},
              {"outcomes", outcomes}}
      .dump();
}

std::vector<double> encode_state(const std::string& task_json) {
  const auto s = taskgen::encode_state(task_of(task_json));
  return {s.begin(), s.end()};
}

double solution_probability(const std::string& task_json, int n_actions, std::uint64_t seed, bool wind) {
  const auto task = task_of(task_json);
  return taskgen::estimate_solution_probability(task, n_actions, seed, taskgen::task_dynamics(task, wind));
}

py::tuple bootstrap(const std::vector<std::vector<double>>& values, int n_boot, double alpha, std::uint64_t seed) {
  const auto ci = eval::stratified_bootstrap_ci({values}, n_boot, alpha, seed);
  return py::make_tuple(ci.point, ci.lo, ci.hi);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Marble-run mixture-of-experts lab";

  py::register_exception<lab::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<lab::MissingPrerequisite>(m, "MissingPrerequisite", PyExc_FileNotFoundError);

  m.def("generate_tasks", &generate_tasks, py::arg("n"), py::arg("seed"));
  m.def("encode_state", &encode_state, py::arg("task_json"));
  m.def("evaluate_action", &evaluate_action, py::arg("task_json"), py::arg("action"), py::arg("seed"),
        py::arg("wind") = false, py::arg("trials") = taskgen::kTrialsPerAction);
  m.def("solution_probability", &solution_probability, py::arg("task_json"), py::arg("n_actions"),
        py::arg("seed"), py::arg("wind") = false);
  m.def("iqm", [](const std::vector<double>& v) { return eval::iqm(v); }, py::arg("values"));
  m.def("stratified_bootstrap_ci", &bootstrap, py::arg("values"), py::arg("n_boot") = 2000,
        py::arg("alpha") = 0.05, py::arg("seed") = 0);
  m.def("content_hash", [](const py::bytes& b) { return lab::content_hash(std::string(b)); });
  m.def("stage_names", &lab::stage_names);

  py::class_<lab::ExperimentConfig> cfg(m, "ExperimentConfig");
  cfg.def(py::init<>())
      .def("validate", &lab::ExperimentConfig::validate)
      .def("entries", &lab::ExperimentConfig::entries)
      .def("to_text", [](const lab::ExperimentConfig& c) { return lab::to_config_text(c); })
      .def("__eq__", [](const lab::ExperimentConfig& a, const lab::ExperimentConfig& b) { return a == b; })
      .def_static("load", [](const std::string& path) { return lab::load_config(path); });
#define MARBLE_FIELD(name) cfg.def_readwrite(#name, &lab::ExperimentConfig::name)
  MARBLE_FIELD(seed);
  MARBLE_FIELD(wind);
  MARBLE_FIELD(force);
  MARBLE_FIELD(out);
  MARBLE_FIELD(threads);
  MARBLE_FIELD(num_tasks);
  MARBLE_FIELD(train_tasks);
  MARBLE_FIELD(test_tasks);
  MARBLE_FIELD(quota);
  MARBLE_FIELD(k);
  MARBLE_FIELD(hidden);
  MARBLE_FIELD(offline_steps);
  MARBLE_FIELD(offline_batch);
  MARBLE_FIELD(eta);
  MARBLE_FIELD(weight_clip);
  MARBLE_FIELD(lr_offline);
  MARBLE_FIELD(e_step_period);
  MARBLE_FIELD(reward_steps);
  MARBLE_FIELD(reward_batch);
  MARBLE_FIELD(lr_reward);
  MARBLE_FIELD(attempts);
  MARBLE_FIELD(eval_period);
  MARBLE_FIELD(n_expert);
  MARBLE_FIELD(n_gating);
  MARBLE_FIELD(mc_samples);
  MARBLE_FIELD(lr_online);
  MARBLE_FIELD(online_batch);
  MARBLE_FIELD(adapt_seeds);
  MARBLE_FIELD(offline_eval_samples);
  MARBLE_FIELD(baseline_actions);
  MARBLE_FIELD(baseline_top_k);
  MARBLE_FIELD(profile_actions);
  MARBLE_FIELD(profile_split);
  MARBLE_FIELD(n_boot);
  MARBLE_FIELD(alpha);
#undef MARBLE_FIELD

  m.def(
      "run_stage",
      [](const std::string& stage, const lab::ExperimentConfig& c) {
        lab::StageResult r;
        {
          py::gil_scoped_release release;
          r = lab::run_stage(stage, c);
        }
        std::vector<std::string> paths;
        for (const auto& p : r.artifacts) paths.push_back(p.string());
        return py::make_tuple(r.summary, paths);
      },
      py::arg("stage"), py::arg("config"));
}
