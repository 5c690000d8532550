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

#include "marble/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace marble::eval {

namespace {

double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

double iqm(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("iqm: empty input");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const std::size_t cut = v.size() / 4;
  const auto first = v.begin() + static_cast<std::ptrdiff_t>(cut);
  const auto last = v.end() - static_cast<std::ptrdiff_t>(cut);
  return std::accumulate(first, last, 0.0) / static_cast<double>(last - first);
}

std::vector<double> RunMatrix::pooled() const {
  std::vector<double> out;
  for (const auto& row : values) out.insert(out.end(), row.begin(), row.end());
  return out;
}

void RunMatrix::validate() const {
  for (const auto& row : values) {
    if (row.empty()) throw std::invalid_argument("run matrix: task without runs");
    for (double x : row)
      if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("run matrix: value outside [0,1]");
  }
}

double resample_iqm(const RunMatrix& m, const std::vector<std::vector<std::size_t>>& picks) {
  if (picks.size() != m.tasks()) throw std::invalid_argument("resample_iqm: one pick list per task");
  std::vector<double> pool;
  for (std::size_t t = 0; t < picks.size(); ++t)
    for (std::size_t i : picks[t]) pool.push_back(m.values[t].at(i));
  return iqm(pool);
}

Interval stratified_bootstrap_ci(const RunMatrix& m, int n_boot, double alpha,
                                 std::uint64_t seed) {
  m.validate();
  if (m.tasks() < 1) throw std::invalid_argument("bootstrap: no tasks");
  if (n_boot < 1) throw std::invalid_argument("bootstrap: n_boot must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("bootstrap: alpha must be in (0,1)");

  Interval out;
  const auto pooled = m.pooled();
  out.point = iqm(pooled);

  Rng rng(seed);
  std::vector<double> reps;
  reps.reserve(static_cast<std::size_t>(n_boot));
  std::vector<std::vector<std::size_t>> picks(m.tasks());
  for (int b = 0; b < n_boot; ++b) {
    for (std::size_t t = 0; t < m.tasks(); ++t) {
      const std::size_t n = m.values[t].size();
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      picks[t].resize(n);
      for (auto& i : picks[t]) i = pick(rng);
    }
    reps.push_back(resample_iqm(m, picks));
  }
  std::sort(reps.begin(), reps.end());
  out.lo = std::min(quantile_sorted(reps, alpha / 2.0), out.point);
  out.hi = std::max(quantile_sorted(reps, 1.0 - alpha / 2.0), out.point);
  return out;
}

BaselineResult sim_baseline(const taskgen::Task& task, const sim::DynamicsConfig& dynamics,
                            int n_actions, int top_k, std::uint64_t seed, int trials,
                            int threads) {
  if (top_k < 1 || n_actions < top_k)
    throw std::invalid_argument("sim_baseline: need n_actions >= top_k >= 1");
  struct Scored {
    taskgen::ActionVector a;
    double success = 0.0;
    double reward = 0.0;
  };
  std::vector<Scored> scored(static_cast<std::size_t>(n_actions));
  auto work = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      Rng rng(derive_seed(seed, "baseline-action", static_cast<std::uint64_t>(i)));
      const auto a = taskgen::sample_valid_action(task, rng);
      const auto e = taskgen::evaluate_task_action(
          task, a, dynamics, derive_seed(seed, "baseline-trials", static_cast<std::uint64_t>(i)), trials);
      scored[static_cast<std::size_t>(i)] = {a, e.success_rate, e.mean_reward};
    }
  };
  threads = std::clamp(threads, 1, n_actions);
  if (threads == 1) {
    work(0, n_actions);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n_actions + threads - 1) / threads;
    for (int w = 0; w < threads; ++w)
      pool.emplace_back(work, w * chunk, std::min(n_actions, (w + 1) * chunk));
    for (auto& t : pool) t.join();
  }

  std::vector<std::size_t> order(scored.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (scored[x].success != scored[y].success) return scored[x].success > scored[y].success;
    return scored[x].reward > scored[y].reward;
  });
  BaselineResult res;
  res.evaluated = n_actions;
  for (int i = 0; i < top_k; ++i) {
    const auto& s = scored[order[static_cast<std::size_t>(i)]];
    res.top_actions.push_back(s.a);
    res.top_success.push_back(s.success);
    res.score += s.success / top_k;
  }
  return res;
}

std::vector<double> offline_eval(const moe::MixturePolicy& policy,
                                 const std::vector<taskgen::Task>& tasks,
                                 const sim::DynamicsConfig& dynamics, int n_samples,
                                 std::uint64_t seed, int trials) {
  if (n_samples < 1) throw std::invalid_argument("offline_eval: n_samples must be >= 1");
  std::vector<double> scores;
  for (const auto& task : tasks) {
    const auto sv = taskgen::encode_state(task);
    const nn::Vector s = Eigen::Map<const nn::Vector>(sv.data(), taskgen::kStateDim);
    const nn::Vector logits = policy.gating_logits(s);
    double total = 0.0;
    for (int j = 0; j < n_samples; ++j) {
      Rng rng(derive_seed(seed, task.task_id, static_cast<std::uint64_t>(j)));
      const int k = nn::gumbel_max_sample(logits, rng);
      const nn::Vector mu = policy.mean_action(s, k);
      taskgen::ActionVector a{};
      for (int i = 0; i < taskgen::kActionDim; ++i) a[i] = mu[i];
      a = taskgen::clip_action(a);
      total += taskgen::evaluate_task_action(task, a, dynamics, rng(), trials).success_rate;
    }
    scores.push_back(total / n_samples);
  }
  return scores;
}

std::vector<CurvePoint> learning_curve(
    const std::vector<std::vector<online::SessionHistory>>& sessions, int n_boot, double alpha,
    std::uint64_t seed) {
  if (sessions.empty() || sessions.front().empty())
    throw std::invalid_argument("learning_curve: no sessions");
  const auto& grid = sessions.front().front().evals;
  std::vector<CurvePoint> curve;
  for (std::size_t step = 0; step < grid.size(); ++step) {
    RunMatrix m;
    for (const auto& task : sessions) {
      std::vector<double> row;
      for (const auto& h : task) {
        if (h.evals.size() != grid.size() || h.evals[step].attempt != grid[step].attempt)
          throw std::invalid_argument("learning_curve: sessions have different eval grids");
        row.push_back(h.evals[step].success_rate);
      }
      m.values.push_back(std::move(row));
    }
    curve.push_back({grid[step].attempt,
                     stratified_bootstrap_ci(m, n_boot, alpha, derive_seed(seed, "curve", step))});
  }
  return curve;
}

double final_iqm(const std::vector<std::vector<online::SessionHistory>>& sessions) {
  std::vector<double> pool;
  for (const auto& task : sessions)
    for (const auto& h : task) {
      if (h.evals.empty()) throw std::invalid_argument("final_iqm: session without evals");
      pool.push_back(h.evals.back().success_rate);
    }
  return iqm(pool);
}

Comparison compare_paired(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("compare_paired: size mismatch");
  Comparison c;
  c.seeds = static_cast<int>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c.wins += a[i] >= b[i] ? 1 : 0;
  return c;
}

void write_curve_csv_header(std::ostream& os) { os << "attempt,iqm,ci_lo,ci_hi,method\n"; }

void write_curve_csv(std::ostream& os, const std::string& method,
                     const std::vector<CurvePoint>& curve) {
  for (const auto& p : curve)
    os << p.attempt << ',' << p.value.point << ',' << p.value.lo << ',' << p.value.hi << ','
       << method << '\n';
}

void write_bar_csv(std::ostream& os, const std::vector<BarRow>& rows) {
  os << "task,method,mean_success\n";
  for (const auto& r : rows) os << r.task << ',' << r.method << ',' << r.mean_success << '\n';
}

}  // namespace marble::eval
