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

#include "marble/offline_awr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace marble::offline {

double ValueTable::at(const std::string& task_id) const {
  const auto it = values.find(task_id);
  if (it == values.end()) throw MissingValueError("no state value for task " + task_id);
  return it->second;
}

ValueTable precompute_values(const taskgen::ExperienceDataset& dataset) {
  std::map<std::string, std::pair<double, long>> acc;
  for (const auto& r : dataset.records) {
    auto& [sum, n] = acc[r.task_id];
    sum += r.mean_reward;
    ++n;
  }
  ValueTable table;
  for (const auto& [id, sn] : acc) table.values[id] = sn.first / static_cast<double>(sn.second);
  return table;
}

double awr_weight(double mean_reward, double value, double eta, double weight_clip) {
  if (!(eta > 0.0)) throw std::invalid_argument("awr_weight: eta must be > 0");
  return std::min(std::exp((mean_reward - value) / eta), weight_clip);
}

BatchMatrices gather(const taskgen::ExperienceDataset& dataset, std::span<const std::size_t> idx) {
  BatchMatrices m{Matrix(taskgen::kStateDim, static_cast<Eigen::Index>(idx.size())),
                  Matrix(taskgen::kActionDim, static_cast<Eigen::Index>(idx.size())),
                  Vector(static_cast<Eigen::Index>(idx.size()))};
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& r = dataset.records.at(idx[b]);
    const auto col = static_cast<Eigen::Index>(b);
    for (int i = 0; i < taskgen::kStateDim; ++i) m.states(i, col) = r.state[i];
    for (int i = 0; i < taskgen::kActionDim; ++i) m.actions(i, col) = r.action[i];
    m.mean_rewards[col] = r.mean_reward;
  }
  return m;
}

ObjectiveResult em_objective(const moe::MixturePolicy& policy, const EmBatch& batch,
                             bool with_grad) {
  const int K = policy.experts();
  const int d = policy.action_dim();
  const Eigen::Index B = batch.states.cols();
  if (batch.actions.cols() != B || batch.adv_weights.size() != B || batch.resp.rows() != K ||
      batch.resp.cols() != B || batch.gating_noise.rows() != K || batch.gating_noise.cols() != B)
    throw nn::ShapeError("em_objective: batch shape mismatch");
  const double inv_b = 1.0 / static_cast<double>(B);

  ObjectiveResult res;
  nn::ForwardCache gcache;
  const Matrix logits = policy.gating().forward_batch(batch.states, gcache);
  Matrix relaxed(K, B);
  for (Eigen::Index b = 0; b < B; ++b)
    relaxed.col(b) = nn::gumbel_softmax(logits.col(b), batch.gating_noise.col(b), batch.tau);

  Matrix coeff = batch.resp;
  for (Eigen::Index b = 0; b < B; ++b) coeff.col(b) *= batch.adv_weights[b];

  for (int k = 0; k < K; ++k) {
    nn::ForwardCache cache;
    const Matrix out = policy.expert(k).forward_batch(batch.states, cache);
    const Vector ll = moe::expert_log_likelihoods(out, batch.actions, d);
    res.value += inv_b * coeff.row(k).dot(ll);
    if (with_grad) {
      Matrix d_out(out.rows(), B);
      for (Eigen::Index b = 0; b < B; ++b)
        d_out.col(b) = coeff(k, b) * inv_b * nn::gaussian_logpdf_grad(out.col(b), d, batch.actions.col(b));
      res.grad.experts.push_back(policy.expert(k).backward(cache, d_out));
    }
  }
  for (Eigen::Index b = 0; b < B; ++b) {
    res.value += inv_b * coeff.col(b).dot(relaxed.col(b).array().log().matrix());
  }
  if (with_grad) {
    Matrix d_logits(K, B);
    for (Eigen::Index b = 0; b < B; ++b)
      d_logits.col(b) = inv_b * nn::gumbel_softmax_log_grad(relaxed.col(b), coeff.col(b), batch.tau);
    res.grad.gating = policy.gating().backward(gcache, d_logits);
  }
  return res;
}

std::vector<Vector> kmeans(const std::vector<Vector>& points, int k, std::uint64_t seed,
                           int iterations) {
  if (points.empty() || k < 1) throw std::invalid_argument("kmeans: need points and k >= 1");
  Rng rng(seed);
  std::vector<Vector> centers;
  std::uniform_int_distribution<std::size_t> pick(0, points.size() - 1);
  centers.push_back(points[pick(rng)]);
  std::vector<double> d2(points.size());
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, (points[i] - c).squaredNorm());
      d2[i] = best;
      total += best;
    }
    if (total <= 0.0) {
      centers.push_back(points[pick(rng)]);
      continue;
    }
    std::uniform_real_distribution<double> u(0.0, total);
    double r = u(rng);
    std::size_t i = 0;
    for (; i + 1 < points.size() && r > d2[i]; ++i) r -= d2[i];
    centers.push_back(points[i]);
  }
  std::vector<int> label(points.size(), 0);
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < points.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double dist = (points[i] - centers[c]).squaredNorm();
        if (dist < best) {
          best = dist;
          label[i] = c;
        }
      }
    }
    for (int c = 0; c < k; ++c) {
      Vector sum = Vector::Zero(points[0].size());
      int n = 0;
      for (std::size_t i = 0; i < points.size(); ++i)
        if (label[i] == c) {
          sum += points[i];
          ++n;
        }
      if (n > 0) centers[c] = sum / n;
    }
  }
  return centers;
}

void warm_start_experts(moe::MixturePolicy& policy, const taskgen::ExperienceDataset& dataset,
                        const ValueTable& values, std::uint64_t seed) {
  if (dataset.records.empty()) return;
  std::vector<Vector> good;
  for (const auto& r : dataset.records) {
    if (r.mean_reward > values.at(r.task_id))
      good.push_back(Eigen::Map<const Vector>(r.action.data(), taskgen::kActionDim));
  }
  if (static_cast<int>(good.size()) < policy.experts()) {
    good.clear();
    for (const auto& r : dataset.records)
      good.push_back(Eigen::Map<const Vector>(r.action.data(), taskgen::kActionDim));
  }
  const auto centers = kmeans(good, policy.experts(), seed);

  std::vector<std::size_t> all(dataset.records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Matrix states = gather(dataset, all).states;
  const int d = policy.action_dim();
  for (int k = 0; k < policy.experts(); ++k) {
    const Matrix out = policy.expert(k).forward_batch(states);
    const Vector avg = out.topRows(d).rowwise().mean();
    policy.expert(k).layers().back().b.head(d) += centers[k] - avg;
  }
}

EmTrainResult em_train(moe::MixturePolicy& policy, const taskgen::ExperienceDataset& dataset,
                       const ValueTable& values, const OfflineTrainConfig& cfg,
                       std::uint64_t seed) {
  if (dataset.records.empty()) throw std::invalid_argument("em_train: empty dataset");
  if (policy.state_dim() != taskgen::kStateDim || policy.action_dim() != taskgen::kActionDim)
    throw nn::ShapeError("em_train: policy dimensions do not match the dataset");
  if (!(cfg.eta > 0.0) || !(cfg.weight_clip >= 1.0))
    throw std::invalid_argument("em_train: eta must be > 0 and weight_clip >= 1");

  const int K = policy.experts();
  if (cfg.warm_start && K > 1) warm_start_experts(policy, dataset, values, derive_seed(seed, "warm"));

  nn::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  nn::AdamState gating_adam(policy.gating(), adam_cfg);
  std::vector<nn::AdamState> expert_adam;
  for (int k = 0; k < K; ++k) expert_adam.emplace_back(policy.expert(k), adam_cfg);

  std::vector<double> weights(dataset.records.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto& r = dataset.records[i];
    weights[i] = awr_weight(r.mean_reward, values.at(r.task_id), cfg.eta, cfg.weight_clip);
  }

  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.records.size() - 1);
  std::vector<std::size_t> all(dataset.records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Matrix cached_resp;

  EmTrainResult result;
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> idx(B);
  for (long step = 0; step < cfg.steps; ++step) {
    for (auto& i : idx) i = pick(rng);
    const BatchMatrices m = gather(dataset, idx);

    EmBatch batch;
    batch.states = m.states;
    batch.actions = m.actions;
    batch.tau = cfg.tau;
    batch.adv_weights.resize(static_cast<Eigen::Index>(B));
    for (std::size_t b = 0; b < B; ++b) batch.adv_weights[static_cast<Eigen::Index>(b)] = weights[idx[b]];

    if (cfg.e_step_period <= 1) {
      batch.resp = policy.responsibilities_batch(m.states, m.actions);
    } else {
      if (step % cfg.e_step_period == 0) {
        const BatchMatrices full = gather(dataset, all);
        cached_resp = policy.responsibilities_batch(full.states, full.actions);
      }
      batch.resp.resize(K, static_cast<Eigen::Index>(B));
      for (std::size_t b = 0; b < B; ++b)
        batch.resp.col(static_cast<Eigen::Index>(b)) = cached_resp.col(static_cast<Eigen::Index>(idx[b]));
    }
    batch.gating_noise = Matrix::Zero(K, static_cast<Eigen::Index>(B));
    if (cfg.gumbel_relaxation)
      for (std::size_t b = 0; b < B; ++b)
        batch.gating_noise.col(static_cast<Eigen::Index>(b)) = nn::sample_gumbel(K, rng);

    ObjectiveResult obj = em_objective(policy, batch, true);
    if (!std::isfinite(obj.value)) throw TrainingFault("em_train: non-finite objective", step);

    if (cfg.log_every > 0 && step % cfg.log_every == 0) {
      TrainLogRow row;
      row.step = step;
      row.objective = obj.value;
      row.mean_weight = batch.adv_weights.mean();
      for (int k = 0; k < K; ++k) row.usage.push_back(batch.resp.row(k).mean());
      result.log.push_back(std::move(row));
    }

    // Adam minimizes; ascend J by descending -J.
    if (K > 1) {
      for (auto& d : obj.grad.gating) {
        d.W = -d.W;
        d.b = -d.b;
      }
      nn::adam_step(policy.gating(), obj.grad.gating, gating_adam);
    }
    for (int k = 0; k < K; ++k) {
      for (auto& d : obj.grad.experts[k]) {
        d.W = -d.W;
        d.b = -d.b;
      }
      nn::adam_step(policy.expert(k), obj.grad.experts[k], expert_adam[k]);
    }
  }
  return result;
}

void write_train_log(std::ostream& os, const EmTrainResult& result) {
  os << "step,objective,mean_weight";
  const std::size_t K = result.log.empty() ? 0 : result.log.front().usage.size();
  for (std::size_t k = 0; k < K; ++k) os << ",usage_" << k;
  os << '\n';
  for (const auto& row : result.log) {
    os << row.step << ',' << row.objective << ',' << row.mean_weight;
    for (double u : row.usage) os << ',' << u;
    os << '\n';
  }
}

}  // namespace marble::offline
