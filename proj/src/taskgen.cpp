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

#include "marble/taskgen.hpp"

#include <algorithm>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

namespace marble::taskgen {

using sim::Pose;
using sim::Vec2;

namespace {

constexpr double kPi = std::numbers::pi;
const Vec2 kDrop = sim::kDropPoint;

double deg(double d) { return d * kPi / 180.0; }

// Sign of the ball's horizontal velocity when it first separates from the
// rectangular track under noiseless nominal dynamics.
int roll_off_direction(const Pose& rect) {
  sim::Scene scene;
  scene.bodies.push_back(sim::make_rect_track(rect));
  scene.dynamics = sim::DynamicsConfig::noiseless();
  const double reach = scene.ball_radius + sim::kHalfThickness;
  sim::BallState ball = scene.ball;
  bool touched = false;
  const int max_steps = static_cast<int>(4.0 / scene.dynamics.dt);
  for (int i = 0; i < max_steps; ++i) {
    ball = sim::integrate_step(scene, ball);
    const double gap = sim::point_segment_distance(ball.position, scene.bodies[0].segments[0]);
    if (gap <= reach + 1e-6) {
      touched = true;
    } else if (touched && gap > reach + 0.005 && std::abs(ball.velocity.x) > 1e-6) {
      return ball.velocity.x > 0.0 ? 1 : -1;
    }
  }
  return rect.theta > 0.0 ? -1 : 1;
}

double lowest_point(const sim::StaticBody& b) {
  double y = 1e9;
  for (const auto& s : b.segments) y = std::min({y, s.a.y, s.b.y});
  return y - b.half_thickness;
}

double highest_point(const sim::StaticBody& b) {
  double y = -1e9;
  for (const auto& s : b.segments) y = std::max({y, s.a.y, s.b.y});
  return y + b.half_thickness;
}

std::string format_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "task-%03d", i);
  return buf;
}

}  // namespace

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split: " + s);
}

sim::DynamicsConfig task_dynamics(const Task& task, bool wind, const sim::DynamicsConfig& base) {
  sim::DynamicsConfig d = base;
  d.wind_accel = wind ? kWindMagnitude * task.wind_direction : 0.0;
  return d;
}

sim::Scene base_scene(const Task& task, const sim::DynamicsConfig& dynamics) {
  sim::Scene scene;
  scene.bodies.push_back(sim::make_rect_track(task.rect_pose));
  scene.bodies.push_back(sim::make_goal(task.goal_pose));
  scene.goal_ref_point = sim::goal_reference_point(scene.bodies.back(), scene.ball_radius);
  scene.dynamics = dynamics;
  return scene;
}

bool check_nontrivial(const Task& task) {
  const sim::Scene scene = base_scene(task, sim::DynamicsConfig::noiseless());
  return !sim::run_trial(scene, 0).success;
}

std::vector<Task> generate_tasks(int n, std::uint64_t seed, const TaskGenConfig& config) {
  if (n < 1) throw std::invalid_argument("generate_tasks: n must be >= 1");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  std::vector<Task> tasks;
  int candidates = 0;
  while (static_cast<int>(tasks.size()) < n) {
    if (candidates++ >= config.max_candidates)
      throw GenerationError("task generation: rejection budget exhausted after " +
                            std::to_string(config.max_candidates) + " candidates");
    Task t;
    const double abs_theta =
        deg(uniform(config.rect_abs_theta_min_deg, config.rect_abs_theta_max_deg));
    const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
    t.rect_pose = {uniform(config.rect_x_min, config.rect_x_max),
                   uniform(config.rect_y_min, config.rect_y_max), sign * abs_theta};
    t.goal_pose = {uniform(config.goal_x_min, config.goal_x_max),
                   uniform(config.goal_y_min, config.goal_y_max), 0.0};

    const auto rect = sim::make_rect_track(t.rect_pose);
    const auto goal = sim::make_goal(t.goal_pose);
    if (highest_point(goal) > lowest_point(rect) - 2.0 * sim::kBallRadius) continue;
    if (!check_nontrivial(t)) continue;

    t.wind_direction = roll_off_direction(t.rect_pose);
    t.task_id = format_id(static_cast<int>(tasks.size()));
    tasks.push_back(t);
  }

  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::lround(0.8 * n));
  const auto n_val = static_cast<std::size_t>(std::lround(0.1 * n));
  for (std::size_t i = 0; i < order.size(); ++i) {
    tasks[order[i]].split = i < n_train ? Split::Train
                            : i < n_train + n_val ? Split::Val
                                                  : Split::Test;
  }
  return tasks;
}

StateVector encode_state(const Task& task) {
  const Pose& r = task.rect_pose;
  const Pose& g = task.goal_pose;
  return {r.x - kDrop.x, r.y - kDrop.y, std::sin(r.theta), std::cos(r.theta),
          g.x - kDrop.x, g.y - kDrop.y, std::sin(g.theta), std::cos(g.theta)};
}

DecodedPoses decode_state(const StateVector& s) {
  return {{s[0] + kDrop.x, s[1] + kDrop.y, std::atan2(s[2], s[3])},
          {s[4] + kDrop.x, s[5] + kDrop.y, std::atan2(s[6], s[7])}};
}

Pose action_to_pose(const ActionVector& a) { return {a[0] + kDrop.x, a[1] + kDrop.y, a[2]}; }

ActionVector pose_to_action(const Pose& p) { return {p.x - kDrop.x, p.y - kDrop.y, p.theta}; }

ActionVector clip_action(const ActionVector& a) {
  const Pose p = action_to_pose(a);
  auto clean = [](double v, double lo, double hi) {
    return std::isfinite(v) ? std::clamp(v, lo, hi) : 0.5 * (lo + hi);
  };
  return pose_to_action(
      {clean(p.x, 0.0, sim::kWorldSize), clean(p.y, 0.0, sim::kWorldSize), clean(p.theta, -kPi, kPi)});
}

std::optional<sim::Scene> apply_action(const Task& task, const ActionVector& a,
                                       const sim::DynamicsConfig& dynamics) {
  sim::Scene scene = base_scene(task, dynamics);
  auto piece = sim::make_curved_piece(action_to_pose(clip_action(a)));
  if (!sim::placement_valid(scene, piece)) return std::nullopt;
  scene.bodies.push_back(std::move(piece));
  return scene;
}

sim::ActionEvaluation evaluate_task_action(const Task& task, const ActionVector& a,
                                           const sim::DynamicsConfig& dynamics,
                                           std::uint64_t seed, int n_trials) {
  const auto scene = apply_action(task, a, dynamics);
  if (!scene) return sim::invalid_action_evaluation(n_trials);
  return sim::evaluate_action(*scene, n_trials, seed);
}

ActionVector sample_valid_action(const Task& task, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const sim::Scene scene = base_scene(task, sim::DynamicsConfig::nominal());
  for (int attempt = 0; attempt < 100000; ++attempt) {
    const Pose p{unit(rng) * sim::kWorldSize, unit(rng) * sim::kWorldSize,
                 -kPi + 2.0 * kPi * unit(rng)};
    if (sim::placement_valid(scene, sim::make_curved_piece(p))) return pose_to_action(p);
  }
  throw GenerationError("no valid placement found for " + task.task_id);
}

DifficultyProfile profile_difficulty(const Task& task, int n_actions, std::uint64_t seed,
                                     const sim::DynamicsConfig& dynamics) {
  if (n_actions < 1) throw std::invalid_argument("profile_difficulty: n_actions must be >= 1");
  Rng rng(derive_seed(seed, "actions"));
  DifficultyProfile prof;
  prof.hard = true;
  double total = 0.0;
  for (int i = 0; i < n_actions; ++i) {
    const ActionVector a = sample_valid_action(task, rng);
    const auto eval = evaluate_task_action(task, a, dynamics,
                                           derive_seed(seed, "trials", static_cast<std::uint64_t>(i)));
    prof.success_rates.push_back(eval.success_rate);
    total += eval.success_rate;
    if (eval.success_rate > 0.0) prof.hard = false;
  }
  prof.solution_probability = total / n_actions;
  return prof;
}

double estimate_solution_probability(const Task& task, int n_actions, std::uint64_t seed,
                                     const sim::DynamicsConfig& dynamics) {
  return profile_difficulty(task, n_actions, seed, dynamics).solution_probability;
}

ExperienceRecord make_record(const Task& task, const ActionVector& a,
                             const sim::ActionEvaluation& eval, Origin origin, int expert) {
  ExperienceRecord r;
  r.task_id = task.task_id;
  r.state = encode_state(task);
  r.action = a;
  r.expert = expert;
  r.rewards = eval.rewards;
  r.mean_reward = eval.mean_reward;
  r.success_rate = eval.success_rate;
  r.origin = origin;
  return r;
}

ExperienceDataset build_offline_dataset(const std::vector<Task>& tasks, int quota,
                                        std::uint64_t seed, const sim::DynamicsConfig& dynamics) {
  if (quota < 1) throw std::invalid_argument("build_offline_dataset: quota must be >= 1");
  ExperienceDataset data;
  const long cap = 100L * quota;
  for (const auto& task : tasks) {
    const std::uint64_t task_seed = derive_seed(seed, task.task_id);
    Rng rng(derive_seed(task_seed, "actions"));
    int pos = 0, neg = 0;
    long sampled = 0;
    while ((pos < quota || neg < quota) && sampled < cap) {
      const ActionVector a = sample_valid_action(task, rng);
      const auto eval = evaluate_task_action(task, a, dynamics,
                                             derive_seed(task_seed, "trials",
                                                         static_cast<std::uint64_t>(sampled)));
      ++sampled;
      const bool positive = eval.success_rate >= kSuccessThreshold;
      if (positive ? pos >= quota : neg >= quota) continue;
      (positive ? pos : neg)++;
      data.records.push_back(make_record(task, a, eval, Origin::Offline));
    }
    if (pos < quota || neg < quota) data.flagged_tasks.push_back(task.task_id);
  }
  return data;
}

nlohmann::json to_json(const Task& t) {
  auto pose = [](const Pose& p) { return nlohmann::json{{"x", p.x}, {"y", p.y}, {"theta", p.theta}}; };
  return {{"task_id", t.task_id},
          {"rect_pose", pose(t.rect_pose)},
          {"goal_pose", pose(t.goal_pose)},
          {"wind_direction", t.wind_direction},
          {"split", to_string(t.split)}};
}

Task task_from_json(const nlohmann::json& j) {
  auto pose = [](const nlohmann::json& p) {
    return Pose{p.at("x").get<double>(), p.at("y").get<double>(), p.at("theta").get<double>()};
  };
  Task t;
  t.task_id = j.at("task_id").get<std::string>();
  t.rect_pose = pose(j.at("rect_pose"));
  t.goal_pose = pose(j.at("goal_pose"));
  t.wind_direction = j.at("wind_direction").get<int>();
  t.split = split_from_string(j.at("split").get<std::string>());
  return t;
}

nlohmann::json tasks_to_json(const std::vector<Task>& tasks) {
  auto arr = nlohmann::json::array();
  for (const auto& t : tasks) arr.push_back(to_json(t));
  return {{"format", kTaskFormat}, {"tasks", arr}};
}

std::vector<Task> tasks_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kTaskFormat)
    throw std::invalid_argument("task file: expected format " + std::string(kTaskFormat));
  std::vector<Task> out;
  for (const auto& t : j.at("tasks")) out.push_back(task_from_json(t));
  return out;
}

nlohmann::json to_json(const ExperienceRecord& r) {
  return {{"task_id", r.task_id},
          {"s", r.state},
          {"a", r.action},
          {"k", r.expert},
          {"rewards", r.rewards},
          {"mean_reward", r.mean_reward},
          {"success_rate", r.success_rate},
          {"origin", r.origin == Origin::Offline ? "offline" : "online"}};
}

ExperienceRecord record_from_json(const nlohmann::json& j) {
  ExperienceRecord r;
  r.task_id = j.at("task_id").get<std::string>();
  r.state = j.at("s").get<StateVector>();
  r.action = j.at("a").get<ActionVector>();
  r.expert = j.at("k").get<int>();
  r.rewards = j.at("rewards").get<std::vector<double>>();
  r.mean_reward = j.at("mean_reward").get<double>();
  r.success_rate = j.at("success_rate").get<double>();
  const auto origin = j.at("origin").get<std::string>();
  if (origin != "offline" && origin != "online")
    throw std::invalid_argument("dataset record: bad origin " + origin);
  r.origin = origin == "offline" ? Origin::Offline : Origin::Online;
  return r;
}

void write_dataset(std::ostream& os, const ExperienceDataset& d) {
  os << nlohmann::json{{"format", kDatasetFormat}, {"flagged_tasks", d.flagged_tasks}}.dump()
     << '\n';
  for (const auto& r : d.records) os << to_json(r).dump() << '\n';
}

ExperienceDataset read_dataset(std::istream& is) {
  ExperienceDataset d;
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("dataset file: empty");
  const auto header = nlohmann::json::parse(line);
  if (header.value("format", "") != kDatasetFormat)
    throw std::invalid_argument("dataset file: expected format " + std::string(kDatasetFormat));
  d.flagged_tasks = header.at("flagged_tasks").get<std::vector<std::string>>();
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    d.records.push_back(record_from_json(nlohmann::json::parse(line)));
  }
  return d;
}

std::vector<Task> filter_split(const std::vector<Task>& tasks, Split split) {
  std::vector<Task> out;
  std::copy_if(tasks.begin(), tasks.end(), std::back_inserter(out),
               [&](const Task& t) { return t.split == split; });
  return out;
}

}  // namespace marble::taskgen
