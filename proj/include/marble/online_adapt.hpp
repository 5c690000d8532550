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

// Online adaptation with hard per-expert updates: each attempt updates the
// sampled expert's reward model and policy, then the gating network.

#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "marble/moe_policy.hpp"
#include "marble/reward_models.hpp"
#include "marble/sim.hpp"
#include "marble/taskgen.hpp"

namespace marble::online {

using nn::Matrix;
using nn::Vector;

/// min(step / N, 1).
double online_ratio(long step, long n);

/// Monte Carlo estimate of E_{a ~ pi_k(.|s)}[clamp(R_k(s, a))] for each
/// column state.
Vector expected_model_reward(const reward::RewardModel& model, const moe::MixturePolicy& policy,
                             int k, const Matrix& states, int mc_samples, Rng& rng);

/// R_k(s,a) - E_{a' ~ pi_k}[R_k(s,a')].
double expert_advantage(const reward::RewardModel& model, const moe::MixturePolicy& policy, int k,
                        const Vector& s, const Vector& a, int mc_samples, Rng& rng);

/// A(s,k) for every k: expert value minus the gating-weighted mean value.
Vector gating_advantages(const std::vector<reward::RewardModel>& models,
                         const moe::MixturePolicy& policy, const Vector& s, int mc_samples,
                         Rng& rng);
double gating_advantage(const std::vector<reward::RewardModel>& models,
                        const moe::MixturePolicy& policy, const Vector& s, int k, int mc_samples,
                        Rng& rng);

struct UpdateConfig {
  double eta = 0.5;
  double weight_clip = 20.0;
  int mc_samples = 32;
  double tau = 1.0;
  bool gumbel_relaxation = true;
};

struct PolicyUpdateStats {
  double objective = 0.0;
  double mean_weight = 0.0;
};

/// sum_b w_b log pi_k(a_b|s_b) / B and its gradient w.r.t. theta_k.
double expert_objective(const moe::MixturePolicy& policy, int k, const Matrix& states,
                        const Matrix& actions, const Vector& weights, nn::LayerSet* grad);
/// sum_b w_b log y_{k_b}(s_b) / B with y the (relaxed) gating output.
double gating_objective(const moe::MixturePolicy& policy, const Matrix& states,
                        const std::vector<int>& experts, const Vector& weights,
                        const Matrix& noise, double tau, nn::LayerSet* grad);

/// One Adam ascent step on expert k's advantage-weighted likelihood.
PolicyUpdateStats update_expert(moe::MixturePolicy& policy, nn::AdamState& adam, int k,
                                const reward::RewardModel& model_k,
                                const taskgen::ExperienceDataset& dataset,
                                const reward::Batch& batch, const UpdateConfig& cfg, Rng& rng);

/// One Adam ascent step on the gating network's advantage-weighted
/// log-probability of each record's assigned expert.
PolicyUpdateStats update_gating(moe::MixturePolicy& policy, nn::AdamState& adam,
                                const std::vector<reward::RewardModel>& models,
                                const taskgen::ExperienceDataset& dataset,
                                const reward::Batch& batch, const UpdateConfig& cfg, Rng& rng);

struct OnlineConfig {
  int attempts = 100;
  int eval_period = 5;
  int n_expert = 25;
  int n_gating = 100;
  UpdateConfig update;
  double lr_online = 3e-4;
  double lr_reward = 1e-3;
  int batch_size = 64;
  int reward_steps = 1;
  int expert_steps = 1;
  int gating_steps = 1;
  int trials = taskgen::kTrialsPerAction;
};

/// The environment an online session acts in.
struct OnlineProblem {
  std::string task_id;
  taskgen::StateVector state{};
  std::function<sim::ActionEvaluation(const taskgen::ActionVector&, std::uint64_t seed)> evaluate;
  std::function<taskgen::ActionVector(const taskgen::ActionVector&)> clip;
};

OnlineProblem marble_problem(const taskgen::Task& task, const sim::DynamicsConfig& dynamics,
                             int trials = taskgen::kTrialsPerAction);

struct AttemptRecord {
  int attempt = 0;
  int expert = 0;
  taskgen::ActionVector action{};
  double success_rate = 0.0;
  double mean_reward = 0.0;
  bool valid = true;

  bool operator==(const AttemptRecord&) const = default;
};

struct BatchAudit {
  int attempt = 0;
  int reward_online = 0, reward_total = 0;
  int expert_online = 0, expert_total = 0;
  int gating_online = 0, gating_total = 0;
  bool provenance_ok = true;  // every reward/expert batch element belongs to the expert

  bool operator==(const BatchAudit&) const = default;
};

struct EvalRecord {
  int attempt = 0;  // attempts completed before this evaluation
  int expert = 0;
  taskgen::ActionVector action{};
  double success_rate = 0.0;
  double mean_reward = 0.0;

  bool operator==(const EvalRecord&) const = default;
};

struct SessionHistory {
  std::string task_id;
  std::vector<AttemptRecord> attempts;
  std::vector<EvalRecord> evals;
  std::vector<BatchAudit> audits;

  bool empty() const { return attempts.empty() && evals.empty(); }
  bool operator==(const SessionHistory&) const = default;
};

struct SessionResult {
  moe::MixturePolicy policy;
  std::vector<reward::RewardModel> models;
  taskgen::ExperienceDataset dataset;
  SessionHistory history;
};

SessionResult run_online_session(const OnlineProblem& problem, moe::MixturePolicy policy,
                                 taskgen::ExperienceDataset dataset,
                                 std::vector<reward::RewardModel> models,
                                 const OnlineConfig& config, std::uint64_t seed);

void write_history(std::ostream& os, const SessionHistory& h);
SessionHistory read_history(std::istream& is);

}  // namespace marble::online
