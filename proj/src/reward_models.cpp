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

#include "marble/reward_models.hpp"

#include <algorithm>
#include <cmath>

#include "marble/offline_awr.hpp"

namespace marble::reward {

namespace {

Matrix joint_input(const Matrix& states, const Matrix& actions) {
  Matrix x(states.rows() + actions.rows(), states.cols());
  x.topRows(states.rows()) = states;
  x.bottomRows(actions.rows()) = actions;
  return x;
}

}  // namespace

double RewardModel::predict(const Vector& s, const Vector& a) const {
  return predict_batch(s, a)[0];
}

Vector RewardModel::predict_batch(const Matrix& states, const Matrix& actions) const {
  if (states.cols() != actions.cols()) throw nn::ShapeError("reward model: batch size mismatch");
  return net.forward_batch(joint_input(states, actions)).row(0).transpose();
}

RewardModel make_reward_model(int expert, std::uint64_t seed, const std::vector<int>& hidden,
                              int state_dim, int action_dim) {
  return {nn::Mlp({state_dim + action_dim, hidden, 1}, seed), expert};
}

double clamp_reward(double r) { return std::clamp(r, -sim::kMaxGoalDistance, 1.0); }

std::size_t Partition::total() const {
  std::size_t n = 0;
  for (const auto& p : offline) n += p.size();
  for (const auto& p : online) n += p.size();
  return n;
}

Partition partition_of(const taskgen::ExperienceDataset& dataset, int experts) {
  Partition part;
  part.offline.resize(static_cast<std::size_t>(experts));
  part.online.resize(static_cast<std::size_t>(experts));
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const auto& r = dataset.records[i];
    if (r.expert < 0 || r.expert >= experts)
      throw std::invalid_argument("partition: record without a valid expert label");
    auto& pools = r.origin == taskgen::Origin::Online ? part.online : part.offline;
    pools[static_cast<std::size_t>(r.expert)].push_back(i);
  }
  return part;
}

Partition assign_experts(taskgen::ExperienceDataset& dataset, const moe::MixturePolicy& policy) {
  int degenerate = 0;
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < dataset.records.size(); ++i)
    if (dataset.records[i].origin == taskgen::Origin::Offline) todo.push_back(i);

  constexpr std::size_t kChunk = 1024;
  for (std::size_t start = 0; start < todo.size(); start += kChunk) {
    const std::span<const std::size_t> chunk(todo.data() + start, std::min(kChunk, todo.size() - start));
    const auto m = offline::gather(dataset, chunk);
    const Matrix joint = policy.log_joint_batch(m.states, m.actions);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const auto col = static_cast<Eigen::Index>(b);
      Eigen::Index k = 0;
      if (std::isfinite(joint.col(col).maxCoeff())) {
        // maxCoeff returns the first maximum, i.e. ties go to the lowest index.
        joint.col(col).maxCoeff(&k);
      } else {
        ++degenerate;
        policy.gating_logits(m.states.col(col)).maxCoeff(&k);
      }
      dataset.records[chunk[b]].expert = static_cast<int>(k);
    }
  }
  Partition part = partition_of(dataset, policy.experts());
  part.degenerate = degenerate;
  return part;
}

Batch balanced_batch(const taskgen::ExperienceDataset& dataset,
                     std::span<const std::size_t> offline_pool,
                     std::span<const std::size_t> online_pool, const BatchSpec& spec, Rng& rng) {
  if (spec.batch_size < 1) throw std::invalid_argument("balanced_batch: batch_size must be >= 1");
  if (offline_pool.empty() && online_pool.empty())
    throw EmptyPartitionError("balanced_batch: expert partition is empty");
  const double ratio = std::clamp(spec.ratio_online, 0.0, 1.0);
  int n_online = static_cast<int>(std::ceil(ratio * spec.batch_size - 1e-9));
  if (online_pool.empty()) n_online = 0;
  if (offline_pool.empty()) n_online = spec.batch_size;

  Batch batch;
  auto draw = [&](std::span<const std::size_t> pool, int n, bool extra_positive) {
    if (n <= 0) return;
    std::vector<std::size_t> pos, neg;
    for (std::size_t i : pool) (dataset.records.at(i).positive() ? pos : neg).push_back(i);
    int n_pos = 0;
    if (pos.empty()) n_pos = 0;
    else if (neg.empty()) n_pos = n;
    else n_pos = extra_positive ? (n + 1) / 2 : n / 2;
    auto take = [&](const std::vector<std::size_t>& from, int count) {
      if (count <= 0) return;
      std::uniform_int_distribution<std::size_t> pick(0, from.size() - 1);
      for (int i = 0; i < count; ++i) batch.indices.push_back(from[pick(rng)]);
    };
    take(pos, n_pos);
    take(neg, n - n_pos);
    batch.positives += n_pos;
    batch.negatives += n - n_pos;
  };
  draw(online_pool, n_online, true);
  draw(offline_pool, spec.batch_size - n_online, false);
  batch.online = n_online;
  batch.offline = spec.batch_size - n_online;
  return batch;
}

double train_reward_model(RewardTrainer& trainer, const taskgen::ExperienceDataset& dataset,
                          const Batch& batch) {
  if (batch.indices.empty()) throw std::invalid_argument("train_reward_model: empty batch");
  const auto m = offline::gather(dataset, batch.indices);
  nn::ForwardCache cache;
  const Matrix pred = trainer.model.net.forward_batch(joint_input(m.states, m.actions), cache);
  const Vector err = pred.row(0).transpose() - m.mean_rewards;
  const double n = static_cast<double>(err.size());
  const double loss = err.squaredNorm() / n;
  if (!std::isfinite(loss)) throw std::runtime_error("train_reward_model: non-finite loss");
  const Matrix d_out = (2.0 / n) * err.transpose();
  nn::adam_step(trainer.model.net, trainer.model.net.backward(cache, d_out), trainer.adam);
  return loss;
}

double mse(const RewardModel& model, const taskgen::ExperienceDataset& dataset,
           std::span<const std::size_t> idx) {
  const auto m = offline::gather(dataset, idx);
  return (model.predict_batch(m.states, m.actions) - m.mean_rewards).squaredNorm() /
         static_cast<double>(idx.size());
}

std::vector<RewardModel> pretrain_reward_models(const taskgen::ExperienceDataset& dataset,
                                                const Partition& partition,
                                                const PretrainConfig& cfg, std::uint64_t seed) {
  nn::AdamConfig adam;
  adam.lr = cfg.lr;
  std::vector<RewardModel> models;
  for (std::size_t k = 0; k < partition.offline.size(); ++k) {
    RewardTrainer trainer(make_reward_model(static_cast<int>(k), derive_seed(seed, "reward", k), cfg.hidden),
                          adam);
    if (!partition.offline[k].empty() || !partition.online[k].empty()) {
      Rng rng(derive_seed(seed, "reward-batches", k));
      for (int step = 0; step < cfg.steps; ++step) {
        const Batch batch = balanced_batch(dataset, partition.offline[k], partition.online[k],
                                           {cfg.batch_size, 0.0}, rng);
        train_reward_model(trainer, dataset, batch);
      }
    }
    models.push_back(std::move(trainer.model));
  }
  return models;
}

nlohmann::json models_to_json(const std::vector<RewardModel>& models) {
  auto arr = nlohmann::json::array();
  for (const auto& m : models) arr.push_back({{"expert", m.expert}, {"net", nn::to_json(m.net)}});
  return {{"format", kRewardModelsFormat}, {"models", arr}};
}

std::vector<RewardModel> models_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kRewardModelsFormat)
    throw std::invalid_argument("reward model checkpoint: bad format tag");
  std::vector<RewardModel> out;
  for (const auto& m : j.at("models"))
    out.push_back({nn::mlp_from_json(m.at("net")), m.at("expert").get<int>()});
  return out;
}

}  // namespace marble::reward
