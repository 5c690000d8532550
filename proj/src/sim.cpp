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

#include "marble/sim.hpp"

#include <algorithm>
#include <limits>
#include <numbers>

#include "marble/rng.hpp"

namespace marble::sim {

namespace {

constexpr int kSolverIterations = 4;

Vec2 closest_point(Vec2 p, const Segment& s) {
  const Vec2 d = s.b - s.a;
  const double len2 = dot(d, d);
  if (len2 <= 0.0) return s.a;
  const double t = std::clamp(dot(p - s.a, d) / len2, 0.0, 1.0);
  return s.a + d * t;
}

bool finite(const BallState& b) {
  return std::isfinite(b.position.x) && std::isfinite(b.position.y) &&
         std::isfinite(b.velocity.x) && std::isfinite(b.velocity.y);
}

double kinetic_energy(Vec2 v) { return 0.5 * dot(v, v); }

bool segments_intersect(const Segment& s, const Segment& t) {
  const Vec2 r = s.b - s.a;
  const Vec2 q = t.b - t.a;
  const double d1 = cross(r, t.a - s.a);
  const double d2 = cross(r, t.b - s.a);
  const double d3 = cross(q, s.a - t.a);
  const double d4 = cross(q, s.b - t.a);
  return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) &&
         ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

StaticBody chain_body(BodyKind kind, const Pose& pose, const std::vector<Vec2>& local) {
  StaticBody body;
  body.kind = kind;
  body.pose = pose;
  const Vec2 origin{pose.x, pose.y};
  for (std::size_t i = 0; i + 1 < local.size(); ++i) {
    body.segments.push_back(
        {origin + rotate(local[i], pose.theta), origin + rotate(local[i + 1], pose.theta)});
  }
  return body;
}

bool out_of_bounds(Vec2 p, double r) {
  return p.x < -r || p.x > kWorldSize + r || p.y < -r || p.y > 2.0 * kWorldSize;
}

}  // namespace

void DynamicsConfig::validate() const {
  if (!(dt > 0.0)) throw std::invalid_argument("dynamics: dt must be > 0");
  if (!(restitution >= 0.0 && restitution <= 1.0))
    throw std::invalid_argument("dynamics: restitution must lie in [0,1]");
  if (!(friction >= 0.0)) throw std::invalid_argument("dynamics: friction must be >= 0");
  if (!(max_sim_time > 0.0)) throw std::invalid_argument("dynamics: max_sim_time must be > 0");
  if (!(pos_noise_sigma >= 0.0 && vel_noise_sigma >= 0.0))
    throw std::invalid_argument("dynamics: noise sigmas must be >= 0");
  if (!(record_hz > 0.0)) throw std::invalid_argument("dynamics: record_hz must be > 0");
}

StaticBody make_rect_track(const Pose& pose, double length) {
  return chain_body(BodyKind::RampRect, pose, {{-0.5 * length, 0.0}, {0.5 * length, 0.0}});
}

StaticBody make_curved_piece(const Pose& pose) {
  std::vector<Vec2> pts;
  Vec2 centroid;
  for (int i = 0; i <= kArcSegments; ++i) {
    const double phi = std::numbers::pi + 0.5 * std::numbers::pi * i / kArcSegments;
    pts.push_back({kArcRadius * std::cos(phi), kArcRadius * std::sin(phi)});
    centroid += pts.back();
  }
  centroid = centroid * (1.0 / static_cast<double>(pts.size()));
  for (auto& p : pts) p = p - centroid;
  return chain_body(BodyKind::RampCurved, pose, pts);
}

StaticBody make_goal(const Pose& pose) {
  const double hx = 0.5 * kGoalInnerWidth + kHalfThickness;
  return chain_body(BodyKind::Goal, pose,
                    {{-hx, kGoalWallHeight}, {-hx, 0.0}, {hx, 0.0}, {hx, kGoalWallHeight}});
}

const StaticBody& Scene::goal() const {
  for (const auto& b : bodies)
    if (b.kind == BodyKind::Goal) return b;
  throw std::invalid_argument("scene has no goal body");
}

void Scene::validate() const {
  dynamics.validate();
  int goals = 0;
  for (const auto& b : bodies) {
    if (b.segments.empty()) throw std::invalid_argument("static body without segments");
    if (!(b.half_thickness > 0.0)) throw std::invalid_argument("half_thickness must be > 0");
    goals += b.kind == BodyKind::Goal;
  }
  if (goals != 1) throw std::invalid_argument("scene must contain exactly one goal");
  if (!(ball_radius > 0.0)) throw std::invalid_argument("ball_radius must be > 0");
  if (!inside_goal_basin(goal(), goal_ref_point))
    throw std::invalid_argument("goal_ref_point outside the goal basin");
}

Vec2 goal_reference_point(const StaticBody& goal, double ball_radius) {
  return Vec2{goal.pose.x, goal.pose.y} +
         rotate({0.0, goal.half_thickness + ball_radius}, goal.pose.theta);
}

bool inside_goal_basin(const StaticBody& goal, Vec2 p) {
  const Vec2 local = rotate(p - Vec2{goal.pose.x, goal.pose.y}, -goal.pose.theta);
  const double hx = 0.5 * kGoalInnerWidth + goal.half_thickness;
  return std::abs(local.x) <= hx && local.y >= 0.0 && local.y <= kGoalWallHeight;
}

std::string to_string(Termination t) {
  switch (t) {
    case Termination::RestInGoal: return "rest_in_goal";
    case Termination::RestOutside: return "rest_outside";
    case Termination::Timeout: return "timeout";
    case Termination::OutOfBounds: return "out_of_bounds";
  }
  return "timeout";
}

Termination termination_from_string(const std::string& s) {
  if (s == "rest_in_goal") return Termination::RestInGoal;
  if (s == "rest_outside") return Termination::RestOutside;
  if (s == "timeout") return Termination::Timeout;
  if (s == "out_of_bounds") return Termination::OutOfBounds;
  throw std::invalid_argument("unknown termination: " + s);
}

BallState integrate_step(const Scene& scene, const BallState& ball,
                         const ContactObserver& observer) {
  const DynamicsConfig& dyn = scene.dynamics;
  BallState next = ball;
  next.velocity += Vec2{dyn.wind_accel, -dyn.gravity} * dyn.dt;
  // Exact for constant acceleration between contacts.
  next.position += (ball.velocity + next.velocity) * (0.5 * dyn.dt);

  for (int iter = 0; iter < kSolverIterations; ++iter) {
    bool touched = false;
    for (const auto& body : scene.bodies) {
      const double reach = scene.ball_radius + body.half_thickness;
      for (const auto& seg : body.segments) {
        const Vec2 cp = closest_point(next.position, seg);
        const Vec2 delta = next.position - cp;
        const double dist = norm(delta);
        if (dist >= reach) continue;
        touched = true;
        Vec2 n;
        if (dist > 1e-12) {
          n = delta * (1.0 / dist);
        } else {
          const Vec2 d = seg.b - seg.a;
          const double len = norm(d);
          n = len > 0.0 ? Vec2{-d.y / len, d.x / len} : Vec2{0.0, 1.0};
        }
        const double penetration = reach - dist;
        next.position += n * penetration;

        const double vn = dot(next.velocity, n);
        if (vn >= 0.0) continue;
        const double ke_before = kinetic_energy(next.velocity);
        const double e = -vn > dyn.bounce_threshold ? dyn.restitution : 0.0;
        const double jn = -(1.0 + e) * vn;
        const Vec2 vt_vec = next.velocity - n * vn;
        const double vt = norm(vt_vec);
        Vec2 v = next.velocity + n * jn;
        if (vt > 0.0) {
          const double jt = std::min({vt, dyn.friction * jn,
                                      dyn.rolling_resistance * jn + dyn.rolling_drag * dyn.dt * vt});
          v = v - vt_vec * (jt / vt);
        }
        next.velocity = v;
        if (observer) {
          observer({vn, ke_before, kinetic_energy(next.velocity), penetration});
        }
      }
    }
    if (!touched) break;
  }
  if (!finite(next)) throw SimulationFault("non-finite ball state during integration");
  return next;
}

Scene integrate_step(Scene scene) {
  scene.ball = integrate_step(scene, scene.ball);
  return scene;
}

double max_penetration(const Scene& scene, Vec2 c) {
  double worst = 0.0;
  for (const auto& body : scene.bodies) {
    const double reach = scene.ball_radius + body.half_thickness;
    for (const auto& seg : body.segments) {
      worst = std::max(worst, reach - point_segment_distance(c, seg));
    }
  }
  return worst;
}

TrialOutcome run_trial(const Scene& scene, std::uint64_t seed) {
  const DynamicsConfig& dyn = scene.dynamics;
  const StaticBody& goal = scene.goal();
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  BallState ball = scene.ball;
  ball.position.x += dyn.pos_noise_sigma * normal(rng);
  ball.position.y += dyn.pos_noise_sigma * normal(rng);
  ball.velocity.x += dyn.vel_noise_sigma * normal(rng);
  ball.velocity.y += dyn.vel_noise_sigma * normal(rng);
  if (!finite(ball)) throw SimulationFault("non-finite initial ball state");

  const int record_every =
      std::max(1, static_cast<int>(std::lround(1.0 / (dyn.record_hz * dyn.dt))));
  const long max_steps = std::lround(dyn.max_sim_time / dyn.dt);

  TrialOutcome out;
  out.d_min = std::numeric_limits<double>::infinity();
  auto record = [&](long step) {
    out.trajectory.push_back({static_cast<double>(step) * dyn.dt, ball.position});
    out.d_min = std::min(out.d_min, norm(ball.position - scene.goal_ref_point));
  };
  record(0);

  double rest_time = 0.0;
  long step = 0;
  bool recorded_last = true;
  out.termination = Termination::Timeout;
  while (step < max_steps) {
    ball = integrate_step(scene, ball);
    ++step;
    recorded_last = step % record_every == 0;
    if (recorded_last) record(step);

    if (out_of_bounds(ball.position, scene.ball_radius)) {
      out.termination = Termination::OutOfBounds;
      break;
    }
    rest_time = norm(ball.velocity) < dyn.rest_speed ? rest_time + dyn.dt : 0.0;
    if (rest_time >= dyn.rest_hold - 1e-12) {
      out.success = inside_goal_basin(goal, ball.position);
      out.termination = out.success ? Termination::RestInGoal : Termination::RestOutside;
      break;
    }
  }
  if (!recorded_last) record(step);
  return out;
}

double trial_reward(const TrialOutcome& outcome) {
  return outcome.success ? 1.0 : -outcome.d_min;
}

ActionEvaluation evaluate_action(const Scene& scene, int n_trials, std::uint64_t seed) {
  if (n_trials < 1) throw std::invalid_argument("evaluate_action: n_trials must be >= 1");
  ActionEvaluation eval;
  int successes = 0;
  double total = 0.0;
  for (int i = 0; i < n_trials; ++i) {
    eval.outcomes.push_back(run_trial(scene, derive_seed(seed, static_cast<std::uint64_t>(i))));
    const double r = trial_reward(eval.outcomes.back());
    eval.rewards.push_back(r);
    total += r;
    successes += eval.outcomes.back().success;
  }
  eval.mean_reward = total / n_trials;
  eval.success_rate = static_cast<double>(successes) / n_trials;
  return eval;
}

ActionEvaluation invalid_action_evaluation(int n_trials) {
  ActionEvaluation eval;
  eval.valid = false;
  eval.rewards.assign(static_cast<std::size_t>(n_trials), -1.0);
  eval.mean_reward = -1.0;
  eval.success_rate = 0.0;
  return eval;
}

double point_segment_distance(Vec2 p, const Segment& s) { return norm(p - closest_point(p, s)); }

double segment_segment_distance(const Segment& s, const Segment& t) {
  if (segments_intersect(s, t)) return 0.0;
  return std::min({point_segment_distance(s.a, t), point_segment_distance(s.b, t),
                   point_segment_distance(t.a, s), point_segment_distance(t.b, s)});
}

double body_distance(const StaticBody& a, const StaticBody& b) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : a.segments)
    for (const auto& t : b.segments) best = std::min(best, segment_segment_distance(s, t));
  return best - a.half_thickness - b.half_thickness;
}

bool placement_valid(const Scene& scene, const StaticBody& piece) {
  for (const auto& seg : piece.segments) {
    for (Vec2 p : {seg.a, seg.b}) {
      if (p.x - piece.half_thickness < 0.0 || p.x + piece.half_thickness > kWorldSize ||
          p.y - piece.half_thickness < 0.0 || p.y + piece.half_thickness > kWorldSize)
        return false;
    }
  }
  for (const auto& body : scene.bodies) {
    if (!(body_distance(piece, body) > kPlacementClearance)) return false;
  }
  double ball_gap = std::numeric_limits<double>::infinity();
  for (const auto& seg : piece.segments)
    ball_gap = std::min(ball_gap, point_segment_distance(scene.ball.position, seg));
  return ball_gap - piece.half_thickness - scene.ball_radius > kPlacementClearance;
}

nlohmann::json trajectory_to_json(const std::vector<TrajectorySample>& samples) {
  auto arr = nlohmann::json::array();
  for (const auto& s : samples) arr.push_back({s.t, s.position.x, s.position.y});
  return arr;
}

std::vector<TrajectorySample> trajectory_from_json(const nlohmann::json& j) {
  std::vector<TrajectorySample> out;
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != 3) throw std::invalid_argument("bad trajectory sample");
    out.push_back({row[0].get<double>(), {row[1].get<double>(), row[2].get<double>()}});
  }
  return out;
}

nlohmann::json to_json(const TrialRecord& r) {
  return {{"task_id", r.task_id},
          {"action", r.action},
          {"seed", r.seed},
          {"success", r.outcome.success},
          {"d_min", r.outcome.d_min},
          {"termination", to_string(r.outcome.termination)},
          {"samples", trajectory_to_json(r.outcome.trajectory)}};
}

TrialRecord trial_record_from_json(const nlohmann::json& j) {
  TrialRecord r;
  r.task_id = j.at("task_id").get<std::string>();
  r.action = j.at("action").get<std::vector<double>>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.outcome.success = j.at("success").get<bool>();
  r.outcome.d_min = j.at("d_min").get<double>();
  r.outcome.termination = termination_from_string(j.at("termination").get<std::string>());
  r.outcome.trajectory = trajectory_from_json(j.at("samples"));
  return r;
}

}  // namespace marble::sim
