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

// marble-play --tasks tasks.json [--log sessions.jsonl] [--port 8080] [--seed N] [--static DIR]

#include <httplib.h>

#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "marble/play_service.hpp"

int main(int argc, char** argv) {
  namespace play = marble::play;
  std::string tasks_path, log_path, host = "127.0.0.1", static_dir;
  int port = 8080;
  play::PlayConfig cfg;
  CLI::App app{"Human-play HTTP service", "marble-play"};
  app.add_option("--tasks", tasks_path, "task file written by gen-tasks")->required();
  app.add_option("--log", log_path, "append-only session log");
  app.add_option("--host", host);
  app.add_option("--port", port);
  app.add_option("--seed", cfg.seed, "server seed");
  app.add_option("--max-attempts", cfg.max_attempts);
  app.add_option("--static", static_dir, "directory served at /");
  CLI11_PARSE(app, argc, argv);

  std::vector<marble::taskgen::Task> tasks;
  try {
    std::ifstream in(tasks_path);
    if (!in) throw std::runtime_error("cannot read " + tasks_path);
    tasks = marble::taskgen::tasks_from_json(nlohmann::json::parse(in));
  } catch (const std::exception& e) {
    std::cerr << "marble-play: " << e.what() << '\n';
    return 2;
  }
  cfg.log_path = log_path;
  play::PlayService service(std::move(tasks), cfg);

  httplib::Server server;
  play::register_routes(server, service);
  if (!static_dir.empty() && !server.set_mount_point("/", static_dir)) {
    std::cerr << "marble-play: cannot serve " << static_dir << '\n';
    return 2;
  }
  std::cout << "listening on http://" << host << ':' << port << std::endl;
  if (!server.listen(host, port)) {
    std::cerr << "marble-play: cannot bind " << host << ':' << port << '\n';
    return 4;
  }
  return 0;
}
