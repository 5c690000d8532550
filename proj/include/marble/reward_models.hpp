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

// Per-expert learned reward approximators and the balanced batches used to
// train them (and the online policy updates).

#include <cstdint>
#include <span>
#include <vector>

#include "marble/moe_policy.hpp"
#include "marble/taskgen.hpp"

namespace marble::reward {

using nn::Matrix;
using nn::Vector;

class EmptyPartitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RewardModel {
  nn::Mlp net;
  int expert = 0;

  double predict(const Vector& s, const Vector& a) const;
  /// Columns are samples.
  Vector predict_batch(const Matrix& states, const Matrix& actions) const;
};

RewardModel make_reward_model(int expert, std::uint64_t seed,
                              const std::vector<int>& hidden = {256, 256},
                              int state_dim = taskgen::kStateDim,
                              int action_dim = taskgen::kActionDim);

/// Clamp of a predicted reward to the attainable range [-d_max, 1].
double clamp_reward(double r);

struct Partition {
  std::vector<std::vector<std::size_t>> offline;  // indices into the dataset per expert
  std::vector<std::vector<std::size_t>> online;
  int degenerate = 0;

  std::size_t total() const;
};

/// Labels each offline record with its most responsible expert (ties to the
/// lowest index); online records keep their generating expert.
Partition assign_experts(taskgen::ExperienceDataset& dataset, const moe::MixturePolicy& policy);
/// Rebuilds the per-expert index lists from already-labelled records.
Partition partition_of(const taskgen::ExperienceDataset& dataset, int experts);

struct BatchSpec {
  int batch_size = 64;
  double ratio_online = 0.0;
};

struct Batch {
  std::vector<std::size_t> indices;
  int online = 0;
  int offline = 0;
  int positives = 0;
  int negatives = 0;
};

/// ceil(ratio * B) online draws and the rest offline; each source split half
/// positive / half negative, falling back to whichever class exists.
Batch balanced_batch(const taskgen::ExperienceDataset& dataset,
                     std::span<const std::size_t> offline_pool,
                     std::span<const std::size_t> online_pool, const BatchSpec& spec, Rng& rng);

struct RewardTrainer {
  RewardModel model;
  nn::AdamState adam;

  RewardTrainer() = default;
  RewardTrainer(RewardModel m, const nn::AdamConfig& cfg) : model(std::move(m)), adam(model.net, cfg) {}
};

/// One Adam step on the batch MSE against mean_reward targets; returns the
/// loss before the step.
double train_reward_model(RewardTrainer& trainer, const taskgen::ExperienceDataset& dataset,
                          const Batch& batch);
double mse(const RewardModel& model, const taskgen::ExperienceDataset& dataset,
           std::span<const std::size_t> idx);

struct PretrainConfig {
  int steps = 2000;
  int batch_size = 64;
  double lr = 1e-3;
  std::vector<int> hidden{256, 256};
};

std::vector<RewardModel> pretrain_reward_models(const taskgen::ExperienceDataset& dataset,
                                                const Partition& partition,
                                                const PretrainConfig& config, std::uint64_t seed);

inline constexpr const char* kRewardModelsFormat = "marble-reward-models/1";
nlohmann::json models_to_json(const std::vector<RewardModel>& models);
std::vector<RewardModel> models_from_json(const nlohmann::json& j);

}  // namespace marble::reward
