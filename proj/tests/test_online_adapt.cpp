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

#include <doctest.h>

#include <cmath>
#include <sstream>

#include "marble/online_adapt.hpp"

using namespace marble;
using namespace marble::online;
using reward::RewardModel;
using taskgen::ExperienceDataset;
using taskgen::ExperienceRecord;

namespace {

moe::PolicyConfig small_policy(int k) {
  moe::PolicyConfig c;
  c.experts = k;
  c.hidden = {16, 16};
  return c;
}

RewardModel constant_model(int expert, double value) {
  auto m = reward::make_reward_model(expert, 1, {4, 4});
  for (auto& l : m.net.layers()) {
    l.W.setZero();
    l.b.setZero();
  }
  m.net.layers().back().b[0] = value;
  return m;
}

// R(s, a) = 0.5 - |a0 - c|, built from two ReLU units.
RewardModel vee_model(int expert, double c) {
  auto m = reward::make_reward_model(expert, 1, {2, 2});
  auto& L = m.net.layers();
  for (auto& l : L) {
    l.W.setZero();
    l.b.setZero();
  }
  L[0].W(0, taskgen::kStateDim) = 1.0;
  L[0].b[0] = -c;
  L[0].W(1, taskgen::kStateDim) = -1.0;
  L[0].b[1] = c;
  L[1].W(0, 0) = 1.0;
  L[1].W(1, 1) = 1.0;
  L[2].W << -1.0, -1.0;
  L[2].b << 0.5;
  return m;
}

void set_gating(moe::MixturePolicy& p, const Vector& logits) {
  p.gating().layers().back().W.setZero();
  p.gating().layers().back().b = logits;
}

ExperienceRecord record(const std::string& id, const taskgen::StateVector& s, const taskgen::ActionVector& a,
                        int k, double reward, taskgen::Origin origin = taskgen::Origin::Offline) {
  ExperienceRecord r;
  r.task_id = id;
  r.state = s;
  r.action = a;
  r.expert = k;
  r.rewards.assign(taskgen::kTrialsPerAction, reward);
  r.mean_reward = reward;
  r.success_rate = reward >= 0.9 ? 1.0 : 0.0;
  r.origin = origin;
  return r;
}

taskgen::StateVector toy_state() { return {0.1, -0.2, 0.3, 0.95, 0.2, -0.1, 0.0, 1.0}; }

Vector as_vector(const taskgen::StateVector& s) { return Eigen::Map<const Vector>(s.data(), taskgen::kStateDim); }

// Deterministic toy: success inside a disc around `target` in the (x, y) action plane.
OnlineProblem toy_problem(const taskgen::ActionVector& target, double radius) {
  OnlineProblem p;
  p.task_id = "toy";
  p.state = toy_state();
  p.evaluate = [target, radius](const taskgen::ActionVector& a, std::uint64_t) {
    const double d = std::hypot(a[0] - target[0], a[1] - target[1]);
    sim::ActionEvaluation e;
    e.valid = true;
    const bool ok = d < radius;
    e.rewards.assign(taskgen::kTrialsPerAction, ok ? 1.0 : -d);
    e.mean_reward = ok ? 1.0 : -d;
    e.success_rate = ok ? 1.0 : 0.0;
    return e;
  };
  p.clip = [](const taskgen::ActionVector& a) {
    taskgen::ActionVector c = a;
    for (auto& x : c) x = std::clamp(x, -1.0, 1.0);
    return c;
  };
  return p;
}

}  // namespace

TEST_CASE("online_ratio") {
  CHECK(online_ratio(0, 25) == 0.0);
  CHECK(online_ratio(25, 25) == 1.0);
  CHECK(online_ratio(80, 25) == 1.0);
  CHECK(online_ratio(50, 100) == 0.5);
  CHECK(online_ratio(5, 10) == 0.5);
  CHECK_THROWS(online_ratio(3, 0));
}

TEST_CASE("expert advantage") {
  moe::MixturePolicy p(small_policy(2), 3);
  const Vector s = as_vector(toy_state());
  Rng rng(1);
  Vector a(3);
  a << 0.3, -0.2, 0.1;
  CHECK(expert_advantage(constant_model(0, 0.4), p, 0, s, a, 32, rng) == doctest::Approx(0.0).epsilon(1e-12));

  // The vee peaks at its centre, so the peak beats the policy's average.
  const double c = p.mean_action(s, 1)[0] + 0.05;
  Vector peak = p.mean_action(s, 1);
  peak[0] = c;
  CHECK(expert_advantage(vee_model(1, c), p, 1, s, peak, 32, rng) > 0.0);
  CHECK_THROWS(expert_advantage(vee_model(1, c), p, 1, s, peak, 0, rng));
}

TEST_CASE("expert advantage Monte Carlo convergence") {
  moe::MixturePolicy p(small_policy(1), 8);
  const Vector s = as_vector(toy_state());
  const auto model = vee_model(0, p.mean_action(s, 0)[0] + 0.1);
  Vector a = p.mean_action(s, 0);
  Rng ref_rng(99);
  const double reference = expert_advantage(model, p, 0, s, a, 100000, ref_rng);
  std::vector<double> est;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    est.push_back(expert_advantage(model, p, 0, s, a, 32, rng));
  }
  double mean = 0, var = 0;
  for (double e : est) mean += e / est.size();
  for (double e : est) var += (e - mean) * (e - mean) / (est.size() - 1);
  CHECK(std::abs(mean - reference) <= 2.0 * std::sqrt(var) / std::sqrt(100.0));
}

TEST_CASE("gating advantage") {
  moe::MixturePolicy p(small_policy(2), 4);
  const Vector s = as_vector(toy_state());
  set_gating(p, Vector::Zero(2));
  Rng rng(2);
  const std::vector<RewardModel> models{constant_model(0, 0.9), constant_model(1, 0.1)};
  const Vector adv = gating_advantages(models, p, s, 32, rng);
  CHECK(adv[0] == doctest::Approx(0.4));
  CHECK(adv[1] == doctest::Approx(-0.4));
  CHECK(gating_advantage(models, p, s, 1, 32, rng) == doctest::Approx(-0.4));

  moe::MixturePolicy twin(small_policy(3), 4);
  twin.expert(1) = twin.expert(0);
  twin.expert(2) = twin.expert(0);
  const std::vector<RewardModel> same{constant_model(0, 0.3), constant_model(1, 0.3), constant_model(2, 0.3)};
  const Vector zero = gating_advantages(same, twin, s, 8, rng);
  for (int k = 0; k < 3; ++k) CHECK(zero[k] == doctest::Approx(0.0).epsilon(1e-12));

  // Centering: psi-weighted advantages sum to zero.
  moe::MixturePolicy r(small_policy(3), 5);
  const std::vector<RewardModel> vees{vee_model(0, 0.1), vee_model(1, -0.2), vee_model(2, 0.4)};
  const Vector ar = gating_advantages(vees, r, s, 64, rng);
  CHECK(std::abs(r.gating_probs(s).dot(ar)) < 1e-12);
}

TEST_CASE("objective gradients") {
  moe::MixturePolicy p(small_policy(3), 6);
  Rng rng(7);
  std::normal_distribution<double> g(0.0, 1.0);
  const int B = 5;
  Matrix S(8, B), A(3, B), noise(3, B);
  Vector w(B);
  std::vector<int> ks;
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < 8; ++i) S(i, b) = g(rng);
    for (int i = 0; i < 3; ++i) A(i, b) = 0.2 * g(rng);
    noise.col(b) = nn::sample_gumbel(3, rng);
    w[b] = std::exp(g(rng));
    ks.push_back(b % 3);
  }
  auto check = [&](nn::Mlp& net, const nn::LayerSet& grad, const std::function<double()>& f) {
    auto objective = [&](std::span<const double> flat) {
      const auto saved = net.flat();
      net.set_flat(flat);
      const double v = f();
      net.set_flat(saved);
      return v;
    };
    nn::GradCheckOptions opts;
    opts.probe_count = 80;
    opts.pattern = [&](std::span<const double> flat) {
      const auto saved = net.flat();
      net.set_flat(flat);
      auto pat = net.activation_pattern(S);
      net.set_flat(saved);
      return pat;
    };
    const auto gf = nn::flatten(grad);
    const auto params = net.flat();
    return nn::grad_check(objective, gf, params, opts).max_rel_error;
  };
  nn::LayerSet ge;
  expert_objective(p, 1, S, A, w, &ge);
  CHECK(check(p.expert(1), ge, [&] { return expert_objective(p, 1, S, A, w, nullptr); }) < 1e-4);
  nn::LayerSet gg;
  gating_objective(p, S, ks, w, noise, 1.0, &gg);
  CHECK(check(p.gating(), gg, [&] { return gating_objective(p, S, ks, w, noise, 1.0, nullptr); }) < 1e-4);

  // Unit weights and no noise: weighted categorical cross-entropy toward the labels.
  nn::LayerSet gce;
  gating_objective(p, S, ks, Vector::Ones(B), Matrix::Zero(3, B), 1.0, &gce);
  auto cross_entropy = [&] {
    const Matrix logits = p.gating().forward_batch(S);
    double v = 0.0;
    for (int b = 0; b < B; ++b) {
      const Vector col = logits.col(b);
      v += (col[ks[b]] - std::log(col.array().exp().sum())) / B;
    }
    return v;
  };
  CHECK(check(p.gating(), gce, cross_entropy) < 1e-4);
}

TEST_CASE("hard updates touch only their own parameters") {
  moe::MixturePolicy p(small_policy(3), 9);
  ExperienceDataset d;
  Rng rng(3);
  for (int i = 0; i < 12; ++i) {
    const taskgen::ActionVector a{0.1 * i - 0.5, 0.05 * i, 0.0};
    d.records.push_back(record(i % 2 ? "t1" : "t0", toy_state(), a, i % 3, i % 4 == 0 ? 1.0 : -0.3));
  }
  d.records[1].state[0] = 0.7;
  for (std::size_t i = 1; i < d.records.size(); i += 2) d.records[i].state = d.records[1].state;
  const std::vector<RewardModel> models{vee_model(0, 0.0), vee_model(1, 0.2), vee_model(2, -0.3)};
  reward::Batch batch;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.records[i].expert == 1) batch.indices.push_back(i);

  const auto before = p;
  nn::AdamState adam(p.expert(1), {3e-4});
  update_expert(p, adam, 1, models[1], d, batch, {}, rng);
  CHECK(p.gating() == before.gating());
  CHECK(p.expert(0) == before.expert(0));
  CHECK(p.expert(2) == before.expert(2));
  CHECK_FALSE(p.expert(1) == before.expert(1));

  reward::Batch all;
  for (std::size_t i = 0; i < d.size(); ++i) all.indices.push_back(i);
  const auto mid = p;
  nn::AdamState gadam(p.gating(), {3e-4});
  update_gating(p, gadam, models, d, all, {}, rng);
  for (int k = 0; k < 3; ++k) CHECK(p.expert(k) == mid.expert(k));
  CHECK_FALSE(p.gating() == mid.gating());

  d.records[0].expert = -1;
  CHECK_THROWS(update_gating(p, gadam, models, d, all, {}, rng));
}

TEST_CASE("zero-weight batch leaves the expert unchanged") {
  moe::MixturePolicy p(small_policy(1), 10);
  const Vector s = as_vector(toy_state());
  const double c = p.mean_action(s, 0)[0];
  ExperienceDataset d;
  taskgen::ActionVector far{c + 0.9, 0.0, 0.0};
  d.records.push_back(record("toy", toy_state(), far, 0, -0.5));
  reward::Batch batch;
  batch.indices = {0};
  UpdateConfig cfg;
  cfg.eta = 1e-3;
  const auto before = p.expert(0).flat();
  nn::AdamState adam(p.expert(0), {3e-4});
  Rng rng(4);
  const auto stats = update_expert(p, adam, 0, vee_model(0, c), d, batch, cfg, rng);
  CHECK(stats.mean_weight < 1e-200);
  const auto after = p.expert(0).flat();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(std::abs(after[i] - before[i]) <= 1e-12);
}

TEST_CASE("single high-advantage sample pulls the mean") {
  moe::MixturePolicy p(small_policy(1), 11);
  const Vector s = as_vector(toy_state());
  const Vector mu = p.mean_action(s, 0);
  taskgen::ActionVector target{mu[0] + 0.2, mu[1], mu[2]};
  ExperienceDataset d;
  d.records.push_back(record("toy", toy_state(), target, 0, 1.0));
  reward::Batch batch;
  batch.indices = {0};
  nn::AdamState adam(p.expert(0), {1e-3});
  Rng rng(5);
  update_expert(p, adam, 0, vee_model(0, target[0]), d, batch, {}, rng);
  const Vector t = Eigen::Map<const Vector>(target.data(), 3);
  CHECK((p.mean_action(s, 0) - t).norm() < (mu - t).norm());
}

TEST_CASE("dominant expert gains gating mass") {
  moe::MixturePolicy p(small_policy(2), 12);
  const Vector s = as_vector(toy_state());
  ExperienceDataset d;
  for (int i = 0; i < 8; ++i) d.records.push_back(record("toy", toy_state(), {0.0, 0.0, 0.0}, i % 2, 0.0));
  reward::Batch batch;
  for (std::size_t i = 0; i < d.size(); ++i) batch.indices.push_back(i);
  const std::vector<RewardModel> models{constant_model(0, 0.9), constant_model(1, 0.1)};
  const double before = p.gating_probs(s)[0];
  nn::AdamState adam(p.gating(), {1e-3});
  Rng rng(6);
  update_gating(p, adam, models, d, batch, {}, rng);
  CHECK(p.gating_probs(s)[0] > before);
}

TEST_CASE("session bookkeeping") {
  moe::MixturePolicy p(small_policy(2), 13);
  std::vector<RewardModel> models{reward::make_reward_model(0, 1, {16, 16}),
                                  reward::make_reward_model(1, 2, {16, 16})};
  ExperienceDataset d;
  for (int i = 0; i < 20; ++i)
    d.records.push_back(record("toy", toy_state(), {0.05 * i - 0.5, 0.0, 0.0}, -1, i % 5 == 0 ? 1.0 : -0.4));
  const auto problem = toy_problem({0.5, 0.3, 0.0}, 0.15);

  OnlineConfig none;
  none.attempts = 0;
  const auto empty = run_online_session(problem, p, d, models, none, 1);
  CHECK(empty.history.empty());
  CHECK(empty.policy == p);

  OnlineConfig cfg;
  cfg.attempts = 105;
  cfg.batch_size = 16;
  cfg.update.mc_samples = 8;
  const auto res = run_online_session(problem, p, d, models, cfg, 7);
  CHECK(res.dataset.size() == d.size() + 105);
  CHECK(res.history.attempts.size() == 105);
  REQUIRE(res.history.evals.size() == 21);
  for (std::size_t i = 0; i < res.history.evals.size(); ++i) {
    CHECK(res.history.evals[i].attempt == static_cast<int>(5 * (i + 1)));
    bool stored = false;
    for (std::size_t j = d.size(); j < res.dataset.size(); ++j)
      stored = stored || res.dataset.records[j].action == res.history.evals[i].action;
    // Mean actions are continuous draws apart from samples; equality would mean it was stored.
    CHECK_FALSE(stored);
  }
  for (std::size_t j = d.size(); j < res.dataset.size(); ++j) {
    const auto& r = res.dataset.records[j];
    CHECK(r.origin == taskgen::Origin::Online);
    CHECK(r.expert == res.history.attempts[j - d.size()].expert);
  }
  for (const auto& a : res.history.audits) {
    CHECK(a.provenance_ok);
    if (a.attempt == 0) {
      CHECK(a.expert_online <= 1);
      CHECK(a.gating_online == 0);
    }
    if (a.attempt >= 25) {
      CHECK(a.expert_online == a.expert_total);
      CHECK(a.reward_online == a.reward_total);
    }
    if (a.attempt >= 100) CHECK(a.gating_online == a.gating_total);
    CHECK(a.gating_online == static_cast<int>(std::ceil(online_ratio(a.attempt, 100) * 16 - 1e-9)));
    if (a.attempt == 50) CHECK(a.gating_online == 8);
  }

  const auto again = run_online_session(problem, p, d, models, cfg, 7);
  CHECK(again.history == res.history);
  CHECK(again.policy == res.policy);

  std::stringstream ss;
  write_history(ss, res.history);
  CHECK(read_history(ss) == res.history);
  std::stringstream bad("{\"format\":\"nope\"}\n");
  CHECK_THROWS(read_history(bad));
}

TEST_CASE("toy environment is solved within 40 attempts") {
  int solved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    moe::MixturePolicy p(small_policy(2), 100 + seed);
    const Vector s = as_vector(toy_state());
    // Rewarding disc centred a short way off expert 0's initial mean.
    const Vector mu = p.mean_action(s, 0);
    const auto problem = toy_problem({mu[0] + 0.15, mu[1] - 0.1, 0.0}, 0.1);
    // Offline data: uniform actions over the unit box, models pretrained per expert.
    ExperienceDataset offline;
    Rng data_rng(seed + 50);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 200; ++i) {
      const taskgen::ActionVector a{u(data_rng), u(data_rng), u(data_rng)};
      const auto e = problem.evaluate(a, 0);
      offline.records.push_back(record("toy", toy_state(), a, -1, e.mean_reward));
    }
    const auto part = reward::assign_experts(offline, p);
    reward::PretrainConfig pre;
    pre.steps = 500;
    pre.hidden = {32, 32};
    const auto models = reward::pretrain_reward_models(offline, part, pre, seed);
    OnlineConfig cfg;
    cfg.attempts = 40;
    cfg.batch_size = 32;
    cfg.lr_online = 3e-3;
    cfg.lr_reward = 3e-3;
    cfg.reward_steps = 10;
    cfg.expert_steps = 5;
    cfg.gating_steps = 5;
    const auto res = run_online_session(problem, p, offline, models, cfg, seed);
    REQUIRE(!res.history.evals.empty());
    if (res.history.evals.back().success_rate == 1.0) ++solved;
  }
  CHECK(solved >= 8);
}

TEST_CASE("marble problem wraps the simulator") {
  const auto task = taskgen::generate_tasks(1, 3).front();
  const auto prob = marble_problem(task, sim::DynamicsConfig::nominal());
  CHECK(prob.task_id == task.task_id);
  CHECK(prob.state == taskgen::encode_state(task));
  const taskgen::ActionVector a{0.0, -0.3, 0.0};
  const auto got = prob.evaluate(a, 4);
  const auto want = taskgen::evaluate_task_action(task, a, sim::DynamicsConfig::nominal(), 4);
  CHECK(got.rewards == want.rewards);
  CHECK(got.success_rate == want.success_rate);
  CHECK(prob.clip({9.0, 0.0, 0.0}) == taskgen::clip_action({9.0, 0.0, 0.0}));
}
