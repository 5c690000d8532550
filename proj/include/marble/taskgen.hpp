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

// Marble-run task generation, state/action encoding, difficulty profiling
// and offline experience collection.

#include <array>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "marble/rng.hpp"
#include "marble/sim.hpp"

namespace marble::taskgen {

inline constexpr int kStateDim = 8;
inline constexpr int kActionDim = 3;
inline constexpr int kTrialsPerAction = 6;
inline constexpr double kWindMagnitude = 1.5;
inline constexpr double kSuccessThreshold = 0.5;

using StateVector = std::array<double, kStateDim>;
using ActionVector = std::array<double, kActionDim>;

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Task {
  std::string task_id;
  sim::Pose rect_pose;
  sim::Pose goal_pose;
  int wind_direction = 1;  // sign of the ball's roll-off velocity
  Split split = Split::Train;

  bool operator==(const Task&) const = default;
};

struct TaskGenConfig {
  double rect_x_min = 0.38, rect_x_max = 0.62;
  double rect_y_min = 0.70, rect_y_max = 0.80;
  double rect_abs_theta_min_deg = 5.0, rect_abs_theta_max_deg = 25.0;
  double goal_x_min = 0.10, goal_x_max = 0.90;
  double goal_y_min = 0.10, goal_y_max = 0.60;
  int max_candidates = 10000;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dynamics used for a task: nominal, or with wind along the roll-off direction.
sim::DynamicsConfig task_dynamics(const Task& task, bool wind,
                                  const sim::DynamicsConfig& base = sim::DynamicsConfig::nominal());

/// Scene without the placed piece.
sim::Scene base_scene(const Task& task, const sim::DynamicsConfig& dynamics);

bool check_nontrivial(const Task& task);

std::vector<Task> generate_tasks(int n, std::uint64_t seed, const TaskGenConfig& config = {});

StateVector encode_state(const Task& task);

struct DecodedPoses {
  sim::Pose rect;
  sim::Pose goal;
};
DecodedPoses decode_state(const StateVector& s);

/// Absolute pose of the placed piece for an action (relative to the drop point).
sim::Pose action_to_pose(const ActionVector& a);
ActionVector pose_to_action(const sim::Pose& p);
ActionVector clip_action(const ActionVector& a);

/// Scene with the curved piece placed, or nullopt when the placement overlaps.
std::optional<sim::Scene> apply_action(const Task& task, const ActionVector& a,
                                       const sim::DynamicsConfig& dynamics);

/// Evaluates an action with the configured trial count; invalid placements
/// score -1 on every trial.
sim::ActionEvaluation evaluate_task_action(const Task& task, const ActionVector& a,
                                           const sim::DynamicsConfig& dynamics,
                                           std::uint64_t seed,
                                           int n_trials = kTrialsPerAction);

/// Uniform action over the world and [-pi, pi], resampled until valid.
ActionVector sample_valid_action(const Task& task, Rng& rng);

struct DifficultyProfile {
  double solution_probability = 0.0;
  std::vector<double> success_rates;  // one per sampled action
  bool hard = false;                  // no successful trial in any action
};

DifficultyProfile profile_difficulty(const Task& task, int n_actions, std::uint64_t seed,
                                     const sim::DynamicsConfig& dynamics);
double estimate_solution_probability(const Task& task, int n_actions, std::uint64_t seed,
                                     const sim::DynamicsConfig& dynamics);

enum class Origin { Offline, Online };

struct ExperienceRecord {
  std::string task_id;
  StateVector state{};
  ActionVector action{};
  int expert = -1;  // -1: not yet assigned
  std::vector<double> rewards;
  double mean_reward = 0.0;
  double success_rate = 0.0;
  Origin origin = Origin::Offline;

  bool positive() const { return success_rate >= kSuccessThreshold; }
  bool operator==(const ExperienceRecord&) const = default;
};

ExperienceRecord make_record(const Task& task, const ActionVector& a,
                             const sim::ActionEvaluation& eval, Origin origin, int expert = -1);

struct ExperienceDataset {
  std::vector<ExperienceRecord> records;
  std::vector<std::string> flagged_tasks;  // hit the sampling cap

  std::size_t size() const { return records.size(); }
  bool operator==(const ExperienceDataset&) const = default;
};

ExperienceDataset build_offline_dataset(const std::vector<Task>& tasks, int quota,
                                        std::uint64_t seed,
                                        const sim::DynamicsConfig& dynamics =
                                            sim::DynamicsConfig::nominal());

inline constexpr const char* kTaskFormat = "marble-tasks/1";
inline constexpr const char* kDatasetFormat = "marble-dataset/1";

nlohmann::json to_json(const Task& t);
Task task_from_json(const nlohmann::json& j);
nlohmann::json tasks_to_json(const std::vector<Task>& tasks);
std::vector<Task> tasks_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ExperienceRecord& r);
ExperienceRecord record_from_json(const nlohmann::json& j);
void write_dataset(std::ostream& os, const ExperienceDataset& d);
ExperienceDataset read_dataset(std::istream& is);

std::vector<Task> filter_split(const std::vector<Task>& tasks, Split split);

}  // namespace marble::taskgen
