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

#include "marble/moe_policy.hpp"

#include <cmath>
#include <limits>

namespace marble::moe {

namespace {

void check_state(const PolicyConfig& c, const Vector& s) {
  if (s.size() != c.state_dim) throw nn::ShapeError("policy: state dimension mismatch");
}

}  // namespace

MixturePolicy::MixturePolicy(const PolicyConfig& config, std::uint64_t seed) : config_(config) {
  if (config.experts < 1) throw std::invalid_argument("policy: need at least one expert");
  gating_ = nn::Mlp({config.state_dim, config.hidden, config.experts}, derive_seed(seed, "gating"));
  const int out = nn::gaussian_output_dim(config.action_dim);
  const double raw_diag = std::log(std::max(config.init_sigma - nn::kCholeskyFloor, 1e-12));
  for (int k = 0; k < config.experts; ++k) {
    nn::Mlp net({config.state_dim, config.hidden, out},
                derive_seed(seed, "expert", static_cast<std::uint64_t>(k)));
    Vector& b = net.layers().back().b;
    int idx = config.action_dim;
    for (int i = 0; i < config.action_dim; ++i)
      for (int j = 0; j <= i; ++j, ++idx)
        if (i == j) b[idx] = raw_diag;
    experts_.push_back(std::move(net));
  }
}

Vector MixturePolicy::gating_logits(const Vector& s) const {
  check_state(config_, s);
  return gating_.forward(s);
}

Vector MixturePolicy::gating_probs(const Vector& s) const { return nn::softmax(gating_logits(s)); }

Vector MixturePolicy::log_gating_probs(const Vector& s) const {
  return nn::log_softmax(gating_logits(s));
}

nn::GaussianHead MixturePolicy::expert_head(int k, const Vector& s) const {
  check_state(config_, s);
  return nn::GaussianHead::from_output(expert(k).forward(s), config_.action_dim);
}

Vector MixturePolicy::mean_action(const Vector& s, int k) const {
  check_state(config_, s);
  return expert(k).forward(s).head(config_.action_dim);
}

ActionSample MixturePolicy::sample_action(const Vector& s, Rng& rng) const {
  const int k = nn::gumbel_max_sample(gating_logits(s), rng);
  return {k, expert_head(k, s).sample(rng)};
}

ActionSample MixturePolicy::sample_action(const Vector& s, std::uint64_t seed) const {
  Rng rng(seed);
  return sample_action(s, rng);
}

Vector expert_log_likelihoods(const Matrix& out, const Matrix& actions, int d) {
  Vector ll(out.cols());
  for (Eigen::Index b = 0; b < out.cols(); ++b) {
    ll[b] = nn::gaussian_logpdf(nn::GaussianHead::from_output(out.col(b), d), actions.col(b));
  }
  return ll;
}

Matrix MixturePolicy::log_joint_batch(const Matrix& states, const Matrix& actions) const {
  if (states.cols() != actions.cols()) throw nn::ShapeError("policy: batch size mismatch");
  const Matrix logits = gating_.forward_batch(states);
  Matrix joint(config_.experts, states.cols());
  for (Eigen::Index b = 0; b < states.cols(); ++b) joint.col(b) = nn::log_softmax(logits.col(b));
  for (int k = 0; k < config_.experts; ++k) {
    joint.row(k) += expert_log_likelihoods(expert(k).forward_batch(states), actions,
                                           config_.action_dim)
                        .transpose();
  }
  return joint;
}

Matrix normalize_log_joint(const Matrix& log_joint) {
  Matrix w(log_joint.rows(), log_joint.cols());
  for (Eigen::Index b = 0; b < log_joint.cols(); ++b) {
    const double m = log_joint.col(b).maxCoeff();
    if (!std::isfinite(m))
      throw DegenerateResponsibilities("responsibilities: all joint densities underflow");
    const Vector e = (log_joint.col(b).array() - m).unaryExpr([](double x) { return std::exp(x); });
    w.col(b) = e / e.sum();
  }
  return w;
}

Matrix MixturePolicy::responsibilities_batch(const Matrix& states, const Matrix& actions) const {
  return normalize_log_joint(log_joint_batch(states, actions));
}

Vector MixturePolicy::responsibilities(const Vector& s, const Vector& a) const {
  check_state(config_, s);
  if (a.size() != config_.action_dim) throw nn::ShapeError("policy: action dimension mismatch");
  return responsibilities_batch(s, a).col(0);
}

bool MixturePolicy::operator==(const MixturePolicy& o) const {
  return config_ == o.config_ && gating_ == o.gating_ && experts_ == o.experts_;
}

nlohmann::json to_json(const MixturePolicy& p) {
  auto experts = nlohmann::json::array();
  auto meta = nlohmann::json::array();
  for (int k = 0; k < p.experts(); ++k) {
    experts.push_back(nn::to_json(p.expert(k)));
    meta.push_back({{"index", k}, {"action_dim", p.action_dim()}});
  }
  const auto& c = p.config();
  return {{"format", kPolicyFormat},
          {"config",
           {{"state_dim", c.state_dim},
            {"action_dim", c.action_dim},
            {"experts", c.experts},
            {"hidden", c.hidden},
            {"init_sigma", c.init_sigma}}},
          {"gating", nn::to_json(p.gating())},
          {"experts", experts},
          {"expert_metadata", meta}};
}

MixturePolicy policy_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kPolicyFormat) throw std::invalid_argument("policy checkpoint: bad format tag");
  const auto& c = j.at("config");
  PolicyConfig cfg;
  cfg.state_dim = c.at("state_dim").get<int>();
  cfg.action_dim = c.at("action_dim").get<int>();
  cfg.experts = c.at("experts").get<int>();
  cfg.hidden = c.at("hidden").get<std::vector<int>>();
  cfg.init_sigma = c.at("init_sigma").get<double>();
  MixturePolicy p(cfg, 0);
  p.gating() = nn::mlp_from_json(j.at("gating"));
  const auto& experts = j.at("experts");
  if (static_cast<int>(experts.size()) != cfg.experts)
    throw std::invalid_argument("policy checkpoint: expert count mismatch");
  for (int k = 0; k < cfg.experts; ++k) p.expert(k) = nn::mlp_from_json(experts[k]);
  return p;
}

}  // namespace marble::moe
