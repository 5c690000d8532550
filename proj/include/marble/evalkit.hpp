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

// Aggregate metrics (IQM with stratified bootstrap intervals) and the
// simulation and offline baselines.

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "marble/moe_policy.hpp"
#include "marble/online_adapt.hpp"
#include "marble/taskgen.hpp"

namespace marble::eval {

/// Mean of the middle half after sorting; floor(n/4) values are dropped
/// from each end. Throws std::invalid_argument on empty input.
double iqm(std::span<const double> values);

/// Success rates at one evaluation step: values[task][seed].
struct RunMatrix {
  std::vector<std::vector<double>> values;

  std::size_t tasks() const { return values.size(); }
  std::vector<double> pooled() const;
  void validate() const;
};

struct Interval {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// IQM of the pooled resample where picks[t] lists the seed indices drawn
/// for task t.
double resample_iqm(const RunMatrix& m, const std::vector<std::vector<std::size_t>>& picks);

/// Percentile interval of the pooled IQM with seeds resampled within each
/// task. The interval is widened to contain the point estimate if needed.
Interval stratified_bootstrap_ci(const RunMatrix& m, int n_boot = 2000, double alpha = 0.05,
                                 std::uint64_t seed = 0);

struct BaselineResult {
  double score = 0.0;
  std::vector<taskgen::ActionVector> top_actions;
  std::vector<double> top_success;
  int evaluated = 0;
};

/// Evaluates n_actions random valid actions and averages the success rate of
/// the best top_k (ranked by success rate, then mean reward, then sample
/// order). Actions are spread over `threads` workers; results do not depend
/// on the thread count.
BaselineResult sim_baseline(const taskgen::Task& task, const sim::DynamicsConfig& dynamics,
                            int n_actions = 10000, int top_k = 5, std::uint64_t seed = 0,
                            int trials = taskgen::kTrialsPerAction, int threads = 1);

/// Per task: mean success rate of n_samples mean actions, each from an
/// expert drawn from the gating distribution.
std::vector<double> offline_eval(const moe::MixturePolicy& policy,
                                 const std::vector<taskgen::Task>& tasks,
                                 const sim::DynamicsConfig& dynamics, int n_samples = 20,
                                 std::uint64_t seed = 0, int trials = taskgen::kTrialsPerAction);

struct CurvePoint {
  int attempt = 0;
  Interval value;
};

/// IQM curve over eval steps; sessions[task][seed] must share one eval grid.
std::vector<CurvePoint> learning_curve(
    const std::vector<std::vector<online::SessionHistory>>& sessions, int n_boot = 2000,
    double alpha = 0.05, std::uint64_t seed = 0);

/// Pooled IQM of the last eval of each session.
double final_iqm(const std::vector<std::vector<online::SessionHistory>>& sessions);

/// Seed-paired comparison of two methods' scores.
struct Comparison {
  int wins = 0;  // seeds where a >= b
  int seeds = 0;
};
Comparison compare_paired(std::span<const double> a, std::span<const double> b);

void write_curve_csv_header(std::ostream& os);
void write_curve_csv(std::ostream& os, const std::string& method,
                     const std::vector<CurvePoint>& curve);

struct BarRow {
  std::string task;
  std::string method;
  double mean_success = 0.0;
};
void write_bar_csv(std::ostream& os, const std::vector<BarRow>& rows);

}  // namespace marble::eval
