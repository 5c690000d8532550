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

#include "marble/online_adapt.hpp"

#include <algorithm>
#include <cmath>

#include "marble/offline_awr.hpp"

namespace marble::online {

namespace {

// Distinct states in a batch, keyed by task id.
struct StateGroups {
  Matrix states;               // state_dim x S
  std::vector<int> column_of;  // per batch element
};

StateGroups group_states(const taskgen::ExperienceDataset& dataset,
                         const std::vector<std::size_t>& idx) {
  std::map<std::string, int> seen;
  std::vector<std::size_t> firsts;
  StateGroups g;
  for (std::size_t i : idx) {
    const auto& id = dataset.records[i].task_id;
    auto [it, inserted] = seen.emplace(id, static_cast<int>(firsts.size()));
    if (inserted) firsts.push_back(i);
    g.column_of.push_back(it->second);
  }
  g.states = offline::gather(dataset, firsts).states;
  return g;
}

void negate(nn::LayerSet& g) {
  for (auto& d : g) {
    d.W = -d.W;
    d.b = -d.b;
  }
}

Vector clipped_weights(const Vector& adv, const UpdateConfig& cfg) {
  Vector w(adv.size());
  for (Eigen::Index i = 0; i < adv.size(); ++i)
    w[i] = std::min(std::exp(adv[i] / cfg.eta), cfg.weight_clip);
  return w;
}

}  // namespace

double online_ratio(long step, long n) {
  if (n < 1) throw std::invalid_argument("online_ratio: N must be >= 1");
  return std::min(static_cast<double>(std::max(step, 0L)) / static_cast<double>(n), 1.0);
}

Vector expected_model_reward(const reward::RewardModel& model, const moe::MixturePolicy& policy,
                             int k, const Matrix& states, int mc_samples, Rng& rng) {
  if (mc_samples < 1) throw std::invalid_argument("expected_model_reward: mc_samples must be >= 1");
  const Eigen::Index S = states.cols();
  const int d = policy.action_dim();
  const Matrix out = policy.expert(k).forward_batch(states);
  Matrix big_s(states.rows(), S * mc_samples);
  Matrix big_a(d, S * mc_samples);
  for (Eigen::Index c = 0; c < S; ++c) {
    const auto head = nn::GaussianHead::from_output(out.col(c), d);
    for (int m = 0; m < mc_samples; ++m) {
      big_s.col(c * mc_samples + m) = states.col(c);
      big_a.col(c * mc_samples + m) = head.sample(rng);
    }
  }
  const Vector pred = model.predict_batch(big_s, big_a);
  Vector mean(S);
  for (Eigen::Index c = 0; c < S; ++c) {
    double sum = 0.0;
    for (int m = 0; m < mc_samples; ++m) sum += reward::clamp_reward(pred[c * mc_samples + m]);
    mean[c] = sum / mc_samples;
  }
  return mean;
}

double expert_advantage(const reward::RewardModel& model, const moe::MixturePolicy& policy, int k,
                        const Vector& s, const Vector& a, int mc_samples, Rng& rng) {
  const double r = reward::clamp_reward(model.predict(s, a));
  return r - expected_model_reward(model, policy, k, s, mc_samples, rng)[0];
}

Vector gating_advantages(const std::vector<reward::RewardModel>& models,
                         const moe::MixturePolicy& policy, const Vector& s, int mc_samples,
                         Rng& rng) {
  const int K = policy.experts();
  Vector v(K);
  for (int k = 0; k < K; ++k) v[k] = expected_model_reward(models.at(k), policy, k, s, mc_samples, rng)[0];
  const Vector psi = policy.gating_probs(s);
  return v.array() - psi.dot(v);
}

double gating_advantage(const std::vector<reward::RewardModel>& models,
                        const moe::MixturePolicy& policy, const Vector& s, int k, int mc_samples,
                        Rng& rng) {
  return gating_advantages(models, policy, s, mc_samples, rng)[k];
}

double expert_objective(const moe::MixturePolicy& policy, int k, const Matrix& states,
                        const Matrix& actions, const Vector& weights, nn::LayerSet* grad) {
  const int d = policy.action_dim();
  const double inv_b = 1.0 / static_cast<double>(states.cols());
  nn::ForwardCache cache;
  const Matrix out = policy.expert(k).forward_batch(states, cache);
  const Vector ll = moe::expert_log_likelihoods(out, actions, d);
  if (grad) {
    Matrix d_out(out.rows(), out.cols());
    for (Eigen::Index b = 0; b < out.cols(); ++b)
      d_out.col(b) = weights[b] * inv_b * nn::gaussian_logpdf_grad(out.col(b), d, actions.col(b));
    *grad = policy.expert(k).backward(cache, d_out);
  }
  return inv_b * weights.dot(ll);
}

double gating_objective(const moe::MixturePolicy& policy, const Matrix& states,
                        const std::vector<int>& experts, const Vector& weights,
                        const Matrix& noise, double tau, nn::LayerSet* grad) {
  const int K = policy.experts();
  const Eigen::Index B = states.cols();
  const double inv_b = 1.0 / static_cast<double>(B);
  nn::ForwardCache cache;
  const Matrix logits = policy.gating().forward_batch(states, cache);
  double value = 0.0;
  Matrix d_logits(K, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const Vector y = nn::gumbel_softmax(logits.col(b), noise.col(b), tau);
    const int k = experts[static_cast<std::size_t>(b)];
    value += inv_b * weights[b] * std::log(y[k]);
    Vector c = Vector::Zero(K);
    c[k] = weights[b] * inv_b;
    d_logits.col(b) = nn::gumbel_softmax_log_grad(y, c, tau);
  }
  if (grad) *grad = policy.gating().backward(cache, d_logits);
  return value;
}

PolicyUpdateStats update_expert(moe::MixturePolicy& policy, nn::AdamState& adam, int k,
                                const reward::RewardModel& model_k,
                                const taskgen::ExperienceDataset& dataset,
                                const reward::Batch& batch, const UpdateConfig& cfg, Rng& rng) {
  const auto m = offline::gather(dataset, batch.indices);
  const StateGroups groups = group_states(dataset, batch.indices);
  const Vector baseline =
      expected_model_reward(model_k, policy, k, groups.states, cfg.mc_samples, rng);
  const Vector pred = model_k.predict_batch(m.states, m.actions);
  Vector adv(pred.size());
  for (Eigen::Index b = 0; b < pred.size(); ++b)
    adv[b] = reward::clamp_reward(pred[b]) - baseline[groups.column_of[static_cast<std::size_t>(b)]];
  const Vector w = clipped_weights(adv, cfg);

  nn::LayerSet grad;
  PolicyUpdateStats stats;
  stats.objective = expert_objective(policy, k, m.states, m.actions, w, &grad);
  stats.mean_weight = w.mean();
  if (!std::isfinite(stats.objective)) throw std::runtime_error("update_expert: non-finite objective");
  negate(grad);
  nn::adam_step(policy.expert(k), grad, adam);
  return stats;
}

PolicyUpdateStats update_gating(moe::MixturePolicy& policy, nn::AdamState& adam,
                                const std::vector<reward::RewardModel>& models,
                                const taskgen::ExperienceDataset& dataset,
                                const reward::Batch& batch, const UpdateConfig& cfg, Rng& rng) {
  const int K = policy.experts();
  const auto m = offline::gather(dataset, batch.indices);
  const StateGroups groups = group_states(dataset, batch.indices);
  const Eigen::Index S = groups.states.cols();

  Matrix values(K, S);
  for (int k = 0; k < K; ++k)
    values.row(k) =
        expected_model_reward(models.at(k), policy, k, groups.states, cfg.mc_samples, rng).transpose();
  const Matrix logits = policy.gating().forward_batch(groups.states);
  Matrix adv_table(K, S);
  for (Eigen::Index c = 0; c < S; ++c) {
    const Vector psi = nn::softmax(logits.col(c));
    adv_table.col(c) = values.col(c).array() - psi.dot(values.col(c));
  }

  const auto B = static_cast<Eigen::Index>(batch.indices.size());
  std::vector<int> experts(static_cast<std::size_t>(B));
  Vector adv(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const int k = dataset.records[batch.indices[static_cast<std::size_t>(b)]].expert;
    if (k < 0 || k >= K) throw std::invalid_argument("update_gating: record without expert label");
    experts[static_cast<std::size_t>(b)] = k;
    adv[b] = adv_table(k, groups.column_of[static_cast<std::size_t>(b)]);
  }
  const Vector w = clipped_weights(adv, cfg);
  Matrix noise = Matrix::Zero(K, B);
  if (cfg.gumbel_relaxation)
    for (Eigen::Index b = 0; b < B; ++b) noise.col(b) = nn::sample_gumbel(K, rng);

  nn::LayerSet grad;
  PolicyUpdateStats stats;
  stats.objective = gating_objective(policy, m.states, experts, w, noise, cfg.tau, &grad);
  stats.mean_weight = w.mean();
  if (!std::isfinite(stats.objective)) throw std::runtime_error("update_gating: non-finite objective");
  negate(grad);
  nn::adam_step(policy.gating(), grad, adam);
  return stats;
}

OnlineProblem marble_problem(const taskgen::Task& task, const sim::DynamicsConfig& dynamics,
                             int trials) {
  OnlineProblem p;
  p.task_id = task.task_id;
  p.state = taskgen::encode_state(task);
  p.evaluate = [task, dynamics, trials](const taskgen::ActionVector& a, std::uint64_t seed) {
    return taskgen::evaluate_task_action(task, a, dynamics, seed, trials);
  };
  p.clip = taskgen::clip_action;
  return p;
}

SessionResult run_online_session(const OnlineProblem& problem, moe::MixturePolicy policy,
                                 taskgen::ExperienceDataset dataset,
                                 std::vector<reward::RewardModel> models,
                                 const OnlineConfig& cfg, std::uint64_t seed) {
  const int K = policy.experts();
  if (static_cast<int>(models.size()) != K)
    throw std::invalid_argument("run_online_session: need one reward model per expert");
  if (cfg.n_expert < 1 || cfg.n_gating < 1 || cfg.eval_period < 1)
    throw std::invalid_argument("run_online_session: schedule lengths must be >= 1");

  const bool unlabelled = std::any_of(dataset.records.begin(), dataset.records.end(),
                                      [](const auto& r) { return r.expert < 0; });
  reward::Partition part = unlabelled ? reward::assign_experts(dataset, policy)
                                      : reward::partition_of(dataset, K);
  std::vector<std::size_t> all_offline, all_online;
  for (const auto& p : part.offline) all_offline.insert(all_offline.end(), p.begin(), p.end());
  for (const auto& p : part.online) all_online.insert(all_online.end(), p.begin(), p.end());
  std::sort(all_offline.begin(), all_offline.end());
  std::sort(all_online.begin(), all_online.end());

  nn::AdamConfig policy_adam;
  policy_adam.lr = cfg.lr_online;
  nn::AdamConfig reward_adam;
  reward_adam.lr = cfg.lr_reward;
  nn::AdamState gating_adam(policy.gating(), policy_adam);
  std::vector<nn::AdamState> expert_adam;
  std::vector<reward::RewardTrainer> trainers;
  for (int k = 0; k < K; ++k) {
    expert_adam.emplace_back(policy.expert(k), policy_adam);
    trainers.emplace_back(std::move(models[static_cast<std::size_t>(k)]), reward_adam);
  }

  SessionHistory history;
  history.task_id = problem.task_id;
  const Vector s = Eigen::Map<const Vector>(problem.state.data(), taskgen::kStateDim);
  auto to_action = [&](const Vector& v) {
    taskgen::ActionVector a{};
    for (int i = 0; i < taskgen::kActionDim; ++i) a[i] = v[i];
    return problem.clip ? problem.clip(a) : a;
  };

  for (int t = 0; t < cfg.attempts; ++t) {
    Rng rng(derive_seed(seed, "attempt", static_cast<std::uint64_t>(t)));
    const moe::ActionSample sample = policy.sample_action(s, rng);
    const int k = sample.expert;
    const taskgen::ActionVector a = to_action(sample.action);
    const sim::ActionEvaluation eval =
        problem.evaluate(a, derive_seed(seed, "trials", static_cast<std::uint64_t>(t)));

    taskgen::ExperienceRecord rec;
    rec.task_id = problem.task_id;
    rec.state = problem.state;
    rec.action = a;
    rec.expert = k;
    rec.rewards = eval.rewards;
    rec.mean_reward = eval.mean_reward;
    rec.success_rate = eval.success_rate;
    rec.origin = taskgen::Origin::Online;
    dataset.records.push_back(rec);
    const std::size_t new_index = dataset.records.size() - 1;
    part.online[static_cast<std::size_t>(k)].push_back(new_index);
    all_online.push_back(new_index);
    history.attempts.push_back({t, k, a, eval.success_rate, eval.mean_reward, eval.valid});

    BatchAudit audit;
    audit.attempt = t;
    const double ratio_expert = online_ratio(t, cfg.n_expert);
    const double ratio_gating = online_ratio(t, cfg.n_gating);
    const auto& off_k = part.offline[static_cast<std::size_t>(k)];
    const auto& on_k = part.online[static_cast<std::size_t>(k)];
    auto check_provenance = [&](const reward::Batch& b) {
      for (std::size_t i : b.indices)
        if (dataset.records[i].expert != k) audit.provenance_ok = false;
    };

    for (int i = 0; i < cfg.reward_steps; ++i) {
      const auto batch = reward::balanced_batch(dataset, off_k, on_k, {cfg.batch_size, ratio_expert}, rng);
      check_provenance(batch);
      audit.reward_online += batch.online;
      audit.reward_total += batch.online + batch.offline;
      reward::train_reward_model(trainers[static_cast<std::size_t>(k)], dataset, batch);
    }
    for (int i = 0; i < cfg.expert_steps; ++i) {
      const auto batch = reward::balanced_batch(dataset, off_k, on_k, {cfg.batch_size, ratio_expert}, rng);
      check_provenance(batch);
      audit.expert_online += batch.online;
      audit.expert_total += batch.online + batch.offline;
      update_expert(policy, expert_adam[static_cast<std::size_t>(k)], k,
                    trainers[static_cast<std::size_t>(k)].model, dataset, batch, cfg.update, rng);
    }
    if (K > 1) {
      std::vector<reward::RewardModel> current;
      for (const auto& tr : trainers) current.push_back(tr.model);
      for (int i = 0; i < cfg.gating_steps; ++i) {
        const auto batch = reward::balanced_batch(dataset, all_offline, all_online,
                                                  {cfg.batch_size, ratio_gating}, rng);
        audit.gating_online += batch.online;
        audit.gating_total += batch.online + batch.offline;
        update_gating(policy, gating_adam, current, dataset, batch, cfg.update, rng);
      }
    }
    history.audits.push_back(audit);

    if ((t + 1) % cfg.eval_period == 0) {
      Rng eval_rng(derive_seed(seed, "eval", static_cast<std::uint64_t>(t + 1)));
      const int k_eval = nn::gumbel_max_sample(policy.gating_logits(s), eval_rng);
      const taskgen::ActionVector a_eval = to_action(policy.mean_action(s, k_eval));
      const auto e = problem.evaluate(a_eval, derive_seed(seed, "eval-trials", static_cast<std::uint64_t>(t + 1)));
      history.evals.push_back({t + 1, k_eval, a_eval, e.success_rate, e.mean_reward});
    }
  }

  SessionResult result;
  for (auto& tr : trainers) result.models.push_back(std::move(tr.model));
  result.policy = std::move(policy);
  result.dataset = std::move(dataset);
  result.history = std::move(history);
  return result;
}

void write_history(std::ostream& os, const SessionHistory& h) {
  os << nlohmann::json{{"format", "marble-session/1"}, {"task_id", h.task_id}}.dump() << '\n';
  for (const auto& a : h.attempts)
    os << nlohmann::json{{"type", "attempt"},   {"attempt", a.attempt},
                         {"k", a.expert},       {"a", a.action},
                         {"success_rate", a.success_rate}, {"mean_reward", a.mean_reward},
                         {"valid", a.valid}}
              .dump()
       << '\n';
  for (const auto& e : h.evals)
    os << nlohmann::json{{"type", "eval"}, {"attempt", e.attempt}, {"k", e.expert}, {"a", e.action},
                         {"success_rate", e.success_rate}, {"mean_reward", e.mean_reward}}
              .dump()
       << '\n';
  for (const auto& b : h.audits)
    os << nlohmann::json{{"type", "audit"},
                         {"attempt", b.attempt},
                         {"reward_online", b.reward_online},
                         {"reward_total", b.reward_total},
                         {"expert_online", b.expert_online},
                         {"expert_total", b.expert_total},
                         {"gating_online", b.gating_online},
                         {"gating_total", b.gating_total},
                         {"provenance_ok", b.provenance_ok}}
              .dump()
       << '\n';
}

SessionHistory read_history(std::istream& is) {
  SessionHistory h;
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("session history: empty");
  const auto header = nlohmann::json::parse(line);
  if (header.value("format", "") != "marble-session/1")
    throw std::invalid_argument("session history: bad format tag");
  h.task_id = header.at("task_id").get<std::string>();
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto type = j.at("type").get<std::string>();
    if (type == "attempt") {
      h.attempts.push_back({j.at("attempt").get<int>(), j.at("k").get<int>(),
                            j.at("a").get<taskgen::ActionVector>(), j.at("success_rate").get<double>(),
                            j.at("mean_reward").get<double>(), j.at("valid").get<bool>()});
    } else if (type == "eval") {
      h.evals.push_back({j.at("attempt").get<int>(), j.at("k").get<int>(),
                         j.at("a").get<taskgen::ActionVector>(), j.at("success_rate").get<double>(),
                         j.at("mean_reward").get<double>()});
    } else if (type == "audit") {
      BatchAudit b;
      b.attempt = j.at("attempt").get<int>();
      b.reward_online = j.at("reward_online").get<int>();
      b.reward_total = j.at("reward_total").get<int>();
      b.expert_online = j.at("expert_online").get<int>();
      b.expert_total = j.at("expert_total").get<int>();
      b.gating_online = j.at("gating_online").get<int>();
      b.gating_total = j.at("gating_total").get<int>();
      b.provenance_ok = j.at("provenance_ok").get<bool>();
      h.audits.push_back(b);
    }
  }
  return h;
}

}  // namespace marble::online
