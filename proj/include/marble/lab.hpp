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

// Experiment configuration, artifact persistence and the pipeline stages
// behind the marble-lab command.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace CLI {
class App;
}

namespace marble::lab {

namespace fs = std::filesystem;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
/// A required input artifact is absent or unusable.
class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ChecksumError : public MissingPrerequisite {
 public:
  using MissingPrerequisite::MissingPrerequisite;
};

enum ExitCode : int { kOk = 0, kConfigError = 2, kMissingPrerequisite = 3, kRuntimeFault = 4 };

struct ExperimentConfig {
  std::uint64_t seed = 0;
  bool wind = false;
  bool force = false;
  std::string out = "runs";
  int threads = 1;

  // tasks and data
  int num_tasks = 100;
  int train_tasks = 20;
  int test_tasks = 5;
  int quota = 100;

  // policy and offline training
  int k = 4;
  std::string hidden = "256,256";
  long offline_steps = 20000;
  int offline_batch = 256;
  double eta = 0.5;
  double weight_clip = 20.0;
  double lr_offline = 1e-3;
  int e_step_period = 1;

  // reward models
  int reward_steps = 2000;
  int reward_batch = 64;
  double lr_reward = 1e-3;

  // online adaptation
  int attempts = 100;
  int eval_period = 5;
  int n_expert = 25;
  int n_gating = 100;
  int mc_samples = 32;
  double lr_online = 3e-4;
  int online_batch = 64;
  int adapt_seeds = 1;

  // evaluation
  int offline_eval_samples = 20;
  int baseline_actions = 10000;
  int baseline_top_k = 5;
  int profile_actions = 10000;
  std::string profile_split = "test";
  int n_boot = 2000;
  double alpha = 0.05;

  std::vector<int> hidden_layers() const;
  void validate() const;
  /// Flat key = value listing of every field, in declaration order.
  std::vector<std::pair<std::string, std::string>> entries() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Registers every config field as a long option (--name) on the app.
void bind_options(CLI::App& app, ExperimentConfig& cfg);
ExperimentConfig load_config(const fs::path& path);
std::string to_config_text(const ExperimentConfig& cfg);

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"gen-tasks",  "gen-data", "train-offline",
                                              "pretrain-rewards", "adapt-online", "eval",
                                              "baseline", "profile-difficulty", "report"};
  return names;
}

/// Hash of the config keys that can influence the stage's artifacts
/// (including those of its upstream stages).
std::string config_hash(const ExperimentConfig& cfg, const std::string& stage);

/// hash(root seed, stage name, task id).
std::uint64_t stage_seed(std::uint64_t root, const std::string& stage,
                         const std::string& task_id = "");

/// Git blob hash (SHA-1 over "blob <size>\0" + content), lowercase hex.
std::string content_hash(const std::string& bytes);
std::string file_hash(const fs::path& path);

struct InputRef {
  fs::path path;
  std::string hash;
};

struct Manifest {
  std::string artifact;
  std::string stage;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string hash;
  std::vector<InputRef> inputs;
};

fs::path manifest_path(const fs::path& artifact);
/// Writes the artifact bytes and its manifest.
Manifest write_artifact(const fs::path& path, const std::string& bytes, const std::string& stage,
                        const ExperimentConfig& cfg, const std::vector<InputRef>& inputs);
/// Reads an artifact produced by `stage`, verifying its checksum and config
/// hash (skipped with cfg.force).
std::string read_artifact(const fs::path& path, const std::string& stage,
                          const ExperimentConfig& cfg, std::vector<InputRef>* inputs = nullptr);

/// Artifact locations under cfg.out.
struct Layout {
  fs::path root;
  explicit Layout(const ExperimentConfig& cfg);
  fs::path tasks() const;
  fs::path dataset() const;
  fs::path policy(int k) const;
  fs::path train_log(int k) const;
  fs::path rewards(int k) const;
  fs::path sessions(int k, bool wind) const;
  fs::path offline_eval(int k, bool wind) const;
  fs::path baseline(bool wind) const;
  fs::path difficulty(bool wind) const;
  fs::path report_dir() const;
};

std::string method_tag(int k, bool wind);

struct StageResult {
  std::vector<fs::path> artifacts;
  std::string summary;
};

StageResult run_stage(const std::string& stage, const ExperimentConfig& cfg);

/// Runs the stage and maps failures to exit codes, printing errors to stderr.
int run_stage_guarded(const std::string& stage, const ExperimentConfig& cfg);

}  // namespace marble::lab
