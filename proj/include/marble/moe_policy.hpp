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

// Mixture-of-experts policy: a gating network producing a categorical
// distribution over K Gaussian expert networks.

#include <cstdint>
#include <vector>

#include "marble/tensornet.hpp"

namespace marble::moe {

using nn::Matrix;
using nn::Vector;

struct PolicyConfig {
  int state_dim = 8;
  int action_dim = 3;
  int experts = 4;
  std::vector<int> hidden{256, 256};
  double init_sigma = 0.1;

  bool operator==(const PolicyConfig&) const = default;
};

class DegenerateResponsibilities : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ActionSample {
  int expert = 0;
  Vector action;
};

/// Per-network gradients, laid out like the policy.
struct PolicyGradient {
  nn::LayerSet gating;
  std::vector<nn::LayerSet> experts;
};

class MixturePolicy {
 public:
  MixturePolicy() = default;
  MixturePolicy(const PolicyConfig& config, std::uint64_t seed);

  const PolicyConfig& config() const { return config_; }
  int experts() const { return config_.experts; }
  int state_dim() const { return config_.state_dim; }
  int action_dim() const { return config_.action_dim; }

  nn::Mlp& gating() { return gating_; }
  const nn::Mlp& gating() const { return gating_; }
  nn::Mlp& expert(int k) { return experts_.at(static_cast<std::size_t>(k)); }
  const nn::Mlp& expert(int k) const { return experts_.at(static_cast<std::size_t>(k)); }

  Vector gating_logits(const Vector& s) const;
  Vector gating_probs(const Vector& s) const;
  Vector log_gating_probs(const Vector& s) const;
  nn::GaussianHead expert_head(int k, const Vector& s) const;
  Vector mean_action(const Vector& s, int k) const;

  /// k via Gumbel-max over the gating logits, then a = mu_k + L_k z.
  ActionSample sample_action(const Vector& s, Rng& rng) const;
  ActionSample sample_action(const Vector& s, std::uint64_t seed) const;

  /// Posterior expert probabilities for (s, a), computed in the log domain.
  Vector responsibilities(const Vector& s, const Vector& a) const;
  /// K x B log(psi_k pi_k) for a batch (columns are samples).
  Matrix log_joint_batch(const Matrix& states, const Matrix& actions) const;
  Matrix responsibilities_batch(const Matrix& states, const Matrix& actions) const;

  bool operator==(const MixturePolicy& o) const;

 private:
  PolicyConfig config_;
  nn::Mlp gating_;
  std::vector<nn::Mlp> experts_;
};

/// log pi_k(a_b | s_b) for each column given raw expert outputs.
Vector expert_log_likelihoods(const Matrix& expert_out, const Matrix& actions, int action_dim);

/// Responsibilities from a K x B matrix of log joint densities.
Matrix normalize_log_joint(const Matrix& log_joint);

inline constexpr const char* kPolicyFormat = "marble-policy/1";
nlohmann::json to_json(const MixturePolicy& p);
MixturePolicy policy_from_json(const nlohmann::json& j);

}  // namespace marble::moe
