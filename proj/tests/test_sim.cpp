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

#include <algorithm>

#include "marble/rng.hpp"
#include "marble/sim.hpp"
#include "marble/taskgen.hpp"

using namespace marble;
using namespace marble::sim;

namespace {

Scene goal_only(Pose goal_pose, DynamicsConfig dyn = DynamicsConfig::noiseless()) {
  Scene s;
  s.bodies.push_back(make_goal(goal_pose));
  s.goal_ref_point = goal_reference_point(s.bodies.back());
  s.dynamics = dyn;
  return s;
}

Scene free_space(DynamicsConfig dyn) {
  // Goal far below the world so the ball never touches it during the check.
  Scene s = goal_only({0.5, -50.0, 0.0}, dyn);
  return s;
}

bool same(const TrialOutcome& a, const TrialOutcome& b) {
  if (a.success != b.success || a.d_min != b.d_min || a.termination != b.termination) return false;
  if (a.trajectory.size() != b.trajectory.size()) return false;
  for (std::size_t i = 0; i < a.trajectory.size(); ++i)
    if (a.trajectory[i].t != b.trajectory[i].t || !(a.trajectory[i].position == b.trajectory[i].position))
      return false;
  return true;
}

}  // namespace

TEST_CASE("free fall one step") {
  auto dyn = DynamicsConfig::noiseless();
  Scene s = free_space(dyn);
  s.ball = {{0.5, 0.5}, {0.0, 0.0}};
  const BallState b = integrate_step(s, s.ball);
  CHECK(b.velocity.x == 0.0);
  CHECK(b.velocity.y == doctest::Approx(-9.81 / 240.0).epsilon(1e-12));
  CHECK(b.position.y == doctest::Approx(0.5 - 0.5 * 9.81 / (240.0 * 240.0)).epsilon(1e-12));
}

TEST_CASE("wind accelerates horizontally") {
  auto dyn = DynamicsConfig::noiseless();
  dyn.wind_accel = 2.0;
  Scene s = free_space(dyn);
  s.ball = {{0.5, 0.5}, {0.3, 0.0}};
  const BallState b = integrate_step(s, s.ball);
  CHECK(b.velocity.x == doctest::Approx(0.3 + 2.0 / 240.0).epsilon(1e-12));
}

TEST_CASE("head-on contact with restitution 0.5") {
  auto dyn = DynamicsConfig::noiseless();
  dyn.gravity = 0.0;
  dyn.restitution = 0.5;
  Scene s = goal_only({0.5, -50.0, 0.0}, dyn);
  StaticBody floor{BodyKind::RampRect, {{{0.2, 0.5}, {0.8, 0.5}}}, kHalfThickness, {0.5, 0.5, 0.0}};
  s.bodies.push_back(floor);
  s.ball = {{0.5, 0.5 + kHalfThickness + kBallRadius + 0.001}, {0.0, -1.0}};
  const BallState b = integrate_step(s, s.ball);
  CHECK(b.velocity.y == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(b.velocity.x == 0.0);
}

TEST_CASE("free fall accuracy after one second") {
  auto dyn = DynamicsConfig::noiseless();
  Scene s = free_space(dyn);
  s.ball = {{0.5, 0.9}, {0.1, 0.0}};
  BallState b = s.ball;
  for (int i = 0; i < 240; ++i) b = integrate_step(s, b);
  const double ex = 0.5 + 0.1;
  const double ey = 0.9 - 0.5 * 9.81;
  CHECK(std::hypot(b.position.x - ex, b.position.y - ey) < 1e-3);
}

TEST_CASE("run_trial determinism") {
  const auto tasks = taskgen::generate_tasks(5, 3);
  for (const auto& t : tasks) {
    Rng rng(11);
    const auto a = taskgen::sample_valid_action(t, rng);
    const auto scene = taskgen::apply_action(t, a, DynamicsConfig::nominal());
    REQUIRE(scene);
    CHECK(same(run_trial(*scene, 42), run_trial(*scene, 42)));
  }
  auto quiet = goal_only({0.3, 0.2, 0.0});
  CHECK(same(run_trial(quiet, 1), run_trial(quiet, 1)));
}

TEST_CASE("straight drop lands in the goal") {
  const Scene s = goal_only({kDropPoint.x, 0.2, 0.0});
  const auto out = run_trial(s, 0);
  CHECK(out.success);
  CHECK(out.termination == Termination::RestInGoal);
  CHECK(out.d_min < 1e-6);
  CHECK(trial_reward(out) == 1.0);
}

TEST_CASE("ball missing the goal reports the sampled closest approach") {
  const Scene s = goal_only({0.15, 0.2, 0.0});
  const auto out = run_trial(s, 0);
  CHECK_FALSE(out.success);
  REQUIRE(!out.trajectory.empty());
  double scan = 1e9;
  for (const auto& p : out.trajectory) scan = std::min(scan, norm(p.position - s.goal_ref_point));
  CHECK(out.d_min > 0.0);
  CHECK(out.d_min == scan);

  // A dense every-step scan can only be closer, by at most one sampling interval of travel.
  BallState b = s.ball;
  double dense = norm(b.position - s.goal_ref_point);
  for (int i = 0; i < 2400 && b.position.y > -0.1; ++i) {
    b = integrate_step(s, b);
    dense = std::min(dense, norm(b.position - s.goal_ref_point));
  }
  CHECK(dense <= out.d_min + 1e-12);
  CHECK(out.d_min - dense < 0.1);
}

TEST_CASE("trial_reward definition") {
  TrialOutcome o;
  o.success = true;
  o.d_min = 0.0;
  CHECK(trial_reward(o) == 1.0);
  o.success = false;
  o.d_min = 0.25;
  CHECK(trial_reward(o) == -0.25);
  o.d_min = 0.0;
  CHECK(trial_reward(o) == 0.0);
}

TEST_CASE("evaluate_action aggregates") {
  const Scene s = goal_only({kDropPoint.x, 0.2, 0.0});
  for (int n : {1, 3, 6}) {
    const auto e = evaluate_action(s, n, 5);
    CHECK(e.success_rate == 1.0);
    CHECK(e.mean_reward == 1.0);
    CHECK(e.outcomes.size() == static_cast<std::size_t>(n));
  }
  Scene noisy = goal_only({0.35, 0.2, 0.0}, DynamicsConfig::nominal());
  const auto e = evaluate_action(noisy, 6, 9);
  double sum = 0.0;
  int succ = 0;
  for (const auto& o : e.outcomes) {
    sum += trial_reward(o);
    succ += o.success;
  }
  CHECK(e.mean_reward == doctest::Approx(sum / 6.0));
  CHECK(e.success_rate == doctest::Approx(succ / 6.0));
  const auto inv = invalid_action_evaluation(6);
  CHECK_FALSE(inv.valid);
  CHECK(inv.mean_reward == -1.0);
  CHECK(inv.rewards.size() == 6);
}

TEST_CASE("bifurcation gives mixed outcomes matching a large-sample estimate") {
  // Drop straight onto the top of the goal's left wall.
  const double wall_offset = kGoalInnerWidth / 2 + kHalfThickness;
  const Scene s = goal_only({kDropPoint.x + wall_offset, 0.2, 0.0}, DynamicsConfig::nominal());
  const auto big = evaluate_action(s, 1000, 101);
  CHECK(big.success_rate > 0.0);
  CHECK(big.success_rate < 1.0);
  const auto small = evaluate_action(s, 200, 202);
  CHECK(std::abs(small.success_rate - big.success_rate) <= 0.15);
}

TEST_CASE("placement validity") {
  const auto tasks = taskgen::generate_tasks(3, 9);
  const auto& t = tasks.front();
  const Scene base = taskgen::base_scene(t, DynamicsConfig::nominal());

  CHECK_FALSE(placement_valid(base, make_curved_piece(t.rect_pose)));
  CHECK_FALSE(placement_valid(base, make_curved_piece({-0.2, 0.5, 0.0})));

  // Search a free spot far from everything.
  bool found = false;
  for (double x = 0.15; x <= 0.85 && !found; x += 0.05)
    for (double y = 0.15; y <= 0.85 && !found; y += 0.05) {
      const auto piece = make_curved_piece({x, y, 0.3});
      bool far = true;
      for (const auto& b : base.bodies) far = far && body_distance(piece, b) > 0.05;
      far = far && norm(Vec2{x, y} - kDropPoint) > 0.3;
      if (far) {
        found = true;
        CHECK(placement_valid(base, piece));
      }
    }
  CHECK(found);

  // Slide a piece toward the goal until its clearance is 5e-5 m.
  const StaticBody& goal = base.goal();
  const double gx = goal.pose.x + kGoalInnerWidth / 2 + 2 * kHalfThickness + 0.2;
  double lo = goal.pose.x, hi = gx;
  auto dist_at = [&](double x) { return body_distance(make_curved_piece({x, goal.pose.y + 0.1, 0.0}), goal); };
  REQUIRE(dist_at(hi) > 1e-3);
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (dist_at(mid) > 5e-5 ? hi : lo) = mid;
  }
  const auto tangent = make_curved_piece({hi, goal.pose.y + 0.1, 0.0});
  CHECK(body_distance(tangent, goal) < 1e-4);
  CHECK(body_distance(tangent, goal) > 0.0);
  CHECK_FALSE(placement_valid(base, tangent));
}

TEST_CASE("segment distance oracle") {
  Segment a{{0, 0}, {1, 0}};
  Segment b{{0.5, 0.3}, {0.5, 1.0}};
  CHECK(segment_segment_distance(a, b) == doctest::Approx(0.3));
  Segment c{{0.5, -0.5}, {0.5, 0.5}};
  CHECK(segment_segment_distance(a, c) == 0.0);
  CHECK(point_segment_distance({2, 0}, a) == doctest::Approx(1.0));
}

TEST_CASE("physics invariants over random placements") {
  const auto tasks = taskgen::generate_tasks(6, 21);
  int events = 0;
  double worst_pen = 0.0;
  double worst_gain = 0.0;
  for (const auto& t : tasks) {
    Rng rng(derive_seed(5, t.task_id));
    for (int j = 0; j < 5; ++j) {
      const auto a = taskgen::sample_valid_action(t, rng);
      auto scene = taskgen::apply_action(t, a, DynamicsConfig::nominal());
      REQUIRE(scene);
      BallState b = scene->ball;
      auto obs = [&](const ContactEvent& e) {
        ++events;
        worst_gain = std::max(worst_gain, (e.kinetic_energy_after - e.kinetic_energy_before) /
                                              std::max(e.kinetic_energy_before, 1e-300));
      };
      for (int step = 0; step < 2400 && b.position.y > -0.2; ++step) {
        b = integrate_step(*scene, b, obs);
        worst_pen = std::max(worst_pen, max_penetration(*scene, b.position));
      }
      const auto out = run_trial(*scene, rng());
      const double r = trial_reward(out);
      CHECK(r <= 1.0);
      CHECK(r >= -kMaxGoalDistance);
      CHECK((r == 1.0) == out.success);
    }
  }
  CHECK(events > 0);
  CHECK(worst_gain <= 1e-9);
  CHECK(worst_pen <= 0.1 * kBallRadius);
}

TEST_CASE("dynamics validation and faults") {
  DynamicsConfig d;
  d.dt = 0.0;
  CHECK_THROWS(d.validate());
  d = DynamicsConfig{};
  d.restitution = 1.5;
  CHECK_THROWS(d.validate());
  Scene s = free_space(DynamicsConfig::noiseless());
  s.ball.velocity = {std::nan(""), 0.0};
  CHECK_THROWS_AS(integrate_step(s, s.ball), SimulationFault);
}

TEST_CASE("replay records round-trip") {
  const Scene s = goal_only({0.3, 0.2, 0.0}, DynamicsConfig::nominal());
  TrialRecord r{"task-007", {0.1, -0.2, 0.5}, 77, run_trial(s, 77)};
  const auto j = to_json(r);
  CHECK(j.at("samples").is_array());
  CHECK(j.at("samples").at(0).size() == 3);
  const auto back = trial_record_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.task_id == r.task_id);
  CHECK(back.seed == r.seed);
  CHECK(back.action == r.action);
  CHECK(same(back.outcome, r.outcome));
  CHECK(termination_from_string(to_string(Termination::OutOfBounds)) == Termination::OutOfBounds);
}
