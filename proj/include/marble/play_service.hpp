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

#pragma once

// Human-play sessions over HTTP: task listing, attempts with six-trial
// evaluation, per-session summaries and trial replays.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "marble/taskgen.hpp"

namespace httplib {
class Server;
}

namespace marble::play {

/// Protocol error returned to clients as {code, message}.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }
  nlohmann::json body() const { return {{"code", code_}, {"message", what()}}; }

 private:
  int status_;
  std::string code_;
};

struct PlayConfig {
  std::uint64_t seed = 0;
  int max_attempts = 10;
  int trials = taskgen::kTrialsPerAction;
  std::filesystem::path log_path;  // empty: in-memory only
};

struct PlayAttempt {
  taskgen::ActionVector action{};
  std::uint64_t seed = 0;
  bool valid = true;
  double success_rate = 0.0;
  double mean_reward = 0.0;
  std::vector<sim::TrialRecord> replays;
};

struct PlaySession {
  std::string session_id;
  std::string task_id;
  bool wind = false;
  std::uint64_t seed = 0;
  int max_attempts = 10;
  std::vector<PlayAttempt> attempts;
};

/// Mean success rate over the final min(5, n) attempts; nullopt when empty.
std::optional<double> last5_mean(const std::vector<double>& series);

class PlayService {
 public:
  PlayService(std::vector<taskgen::Task> tasks, PlayConfig config);

  nlohmann::json list_tasks() const;
  nlohmann::json create_session(const nlohmann::json& body);
  nlohmann::json submit_attempt(const std::string& session_id, const nlohmann::json& body);
  nlohmann::json summary(const std::string& session_id) const;
  nlohmann::json replay(const std::string& session_id, int attempt, int trial) const;

  std::size_t session_count() const;
  /// Copy of a session's current state.
  PlaySession session(const std::string& session_id) const;

 private:
  struct Entry {
    mutable std::mutex mu;
    PlaySession s;
  };

  const taskgen::Task& task(const std::string& id) const;
  std::shared_ptr<Entry> find(const std::string& session_id) const;
  void append_log(const nlohmann::json& event);
  void load_log();
  PlayAttempt run_attempt(const PlaySession& s, const taskgen::ActionVector& a, int index) const;

  std::vector<taskgen::Task> tasks_;
  std::map<std::string, std::size_t> task_index_;
  PlayConfig config_;
  mutable std::shared_mutex map_mu_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  long next_id_ = 1;
  std::mutex log_mu_;
};

nlohmann::json to_json(const PlayAttempt& a, int index);

/// Installs the JSON routes on the server.
void register_routes(httplib::Server& server, PlayService& service);

}  // namespace marble::play
