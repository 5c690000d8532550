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

// marble-lab <stage> --config <path> [--seed N] [--wind] [--k N] [--attempts N] [--out DIR]

#include <CLI11.hpp>
#include <iostream>

#include "marble/lab.hpp"

int main(int argc, char** argv) {
  namespace lab = marble::lab;
  lab::ExperimentConfig cfg;
  std::string stage;
  CLI::App app{"Marble-run mixture-of-experts lab pipeline", "marble-lab"};
  app.add_option("stage", stage, "pipeline stage")
      ->required()
      ->check(CLI::IsMember(lab::stage_names()));
  lab::bind_options(app, cfg);
  app.set_config("--config", "", "flat key = value configuration file", true);
  app.allow_config_extras(false);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::Error& e) {
    app.exit(e);
    return lab::kConfigError;
  }
  return lab::run_stage_guarded(stage, cfg);
}
