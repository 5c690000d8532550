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

// Offline generalized-EM training of the mixture policy with
// advantage-weighted regression.

#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "marble/moe_policy.hpp"
#include "marble/taskgen.hpp"

namespace marble::offline {

using nn::Matrix;
using nn::Vector;

class MissingValueError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class TrainingFault : public std::runtime_error {
 public:
  TrainingFault(const std::string& what, long step)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// Per-task state values: mean of the task's record rewards.
struct ValueTable {
  std::map<std::string, double> values;
  double at(const std::string& task_id) const;
};

ValueTable precompute_values(const taskgen::ExperienceDataset& dataset);

/// min(exp((mean_reward - value) / eta), weight_clip).
double awr_weight(double mean_reward, double value, double eta, double weight_clip);

struct BatchMatrices {
  Matrix states;   // state_dim x B
  Matrix actions;  // action_dim x B
  Vector mean_rewards;
};

BatchMatrices gather(const taskgen::ExperienceDataset& dataset, std::span<const std::size_t> idx);

/// Inputs of the frozen-weight EM objective for one batch.
struct EmBatch {
  Matrix states;
  Matrix actions;
  Vector adv_weights;     // exp(A / eta), clipped
  Matrix resp;            // K x B, held fixed
  Matrix gating_noise;    // K x B Gumbel noise; zeros disable the relaxation
  double tau = 1.0;
};

struct ObjectiveResult {
  double value = 0.0;
  moe::PolicyGradient grad;  // d value / d params (ascent direction)
};

/// J = mean_b sum_k w'_bk * aw_b * (log pi_k(a_b|s_b) + log psi_k(s_b)).
ObjectiveResult em_objective(const moe::MixturePolicy& policy, const EmBatch& batch,
                             bool with_grad = true);

struct OfflineTrainConfig {
  double eta = 0.5;
  double weight_clip = 20.0;
  int batch_size = 256;
  long steps = 20000;
  int e_step_period = 1;
  double lr = 1e-3;
  double tau = 1.0;
  bool gumbel_relaxation = true;
  bool warm_start = true;
  int log_every = 100;
};

struct TrainLogRow {
  long step = 0;
  double objective = 0.0;
  double mean_weight = 0.0;
  std::vector<double> usage;  // mean responsibility per expert
};

struct EmTrainResult {
  std::vector<TrainLogRow> log;
};

/// k-means over high-advantage actions; shifts each expert's mean bias so its
/// dataset-average mean sits on a distinct centroid.
void warm_start_experts(moe::MixturePolicy& policy, const taskgen::ExperienceDataset& dataset,
                        const ValueTable& values, std::uint64_t seed);

EmTrainResult em_train(moe::MixturePolicy& policy, const taskgen::ExperienceDataset& dataset,
                       const ValueTable& values, const OfflineTrainConfig& config,
                       std::uint64_t seed);

void write_train_log(std::ostream& os, const EmTrainResult& result);

std::vector<Vector> kmeans(const std::vector<Vector>& points, int k, std::uint64_t seed,
                           int iterations = 25);

}  // namespace marble::offline
