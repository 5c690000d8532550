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

// Seedable 2D marble-run physics: a single dynamic ball against static
// capsule chains (tracks and the U-shaped goal).

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace marble::sim {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator*(double s) const { return {x * s, y * s}; }
  constexpr Vec2& operator+=(Vec2 o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  constexpr bool operator==(const Vec2&) const = default;
};

constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
constexpr double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline Vec2 rotate(Vec2 p, double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * p.x - s * p.y, s * p.x + c * p.y};
}

// Scene constants (normalized 1 m x 1 m world, origin bottom-left).
inline constexpr double kWorldSize = 1.0;
inline constexpr double kBallRadius = 0.025;
inline constexpr Vec2 kDropPoint{0.5, 0.92};
inline constexpr double kHalfThickness = 0.01;
inline constexpr double kRectLength = 0.30;
inline constexpr double kArcRadius = 0.12;
inline constexpr int kArcSegments = 8;
inline constexpr double kGoalInnerWidth = 0.20;
inline constexpr double kGoalWallHeight = 0.08;
inline constexpr double kPlacementClearance = 1e-3;
inline const double kMaxGoalDistance = std::sqrt(2.0) * kWorldSize;

struct DynamicsConfig {
  double gravity = 9.81;
  double wind_accel = 0.0;
  double restitution = 0.3;
  double friction = 0.4;
  // Rolling approximation: tangential impulse per contact is capped by
  // min(friction*jn, rolling_resistance*jn + rolling_drag*dt*|vt|).
  double rolling_resistance = 0.02;
  double rolling_drag = 1.5;
  // Approach speeds below this do not bounce.
  double bounce_threshold = 0.1;
  double pos_noise_sigma = 0.004;
  double vel_noise_sigma = 0.01;
  double dt = 1.0 / 240.0;
  double max_sim_time = 10.0;
  double rest_speed = 0.01;
  double rest_hold = 0.5;
  double record_hz = 60.0;

  void validate() const;
  static DynamicsConfig nominal() { return {}; }
  static DynamicsConfig noiseless() {
    DynamicsConfig d;
    d.pos_noise_sigma = 0.0;
    d.vel_noise_sigma = 0.0;
    return d;
  }
};

enum class BodyKind { RampRect, RampCurved, Goal };

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
  bool operator==(const Pose&) const = default;
};

struct Segment {
  Vec2 a;
  Vec2 b;
};

/// Capsule chain in world frame. `pose` is kept for encoding and display.
struct StaticBody {
  BodyKind kind = BodyKind::RampRect;
  std::vector<Segment> segments;
  double half_thickness = kHalfThickness;
  Pose pose;
};

StaticBody make_rect_track(const Pose& pose, double length = kRectLength);
/// Quarter arc of radius kArcRadius. Local frame origin is the centroid of
/// the arc vertices; at theta = 0 the arc is a cup opening up and to the right.
StaticBody make_curved_piece(const Pose& pose);
/// U-shaped goal; pose is the center of the base segment.
StaticBody make_goal(const Pose& pose);

struct BallState {
  Vec2 position;
  Vec2 velocity;
};

struct Scene {
  std::vector<StaticBody> bodies;
  BallState ball{kDropPoint, {0.0, 0.0}};
  double ball_radius = kBallRadius;
  Vec2 goal_ref_point;
  DynamicsConfig dynamics;

  const StaticBody& goal() const;
  void validate() const;
};

/// Where a ball resting on the center of the goal base has its center.
Vec2 goal_reference_point(const StaticBody& goal, double ball_radius = kBallRadius);
bool inside_goal_basin(const StaticBody& goal, Vec2 p);

enum class Termination { RestInGoal, RestOutside, Timeout, OutOfBounds };
std::string to_string(Termination t);
Termination termination_from_string(const std::string& s);

struct TrajectorySample {
  double t = 0.0;
  Vec2 position;
};

struct TrialOutcome {
  bool success = false;
  double d_min = 0.0;
  Termination termination = Termination::Timeout;
  std::vector<TrajectorySample> trajectory;
};

struct ActionEvaluation {
  std::vector<TrialOutcome> outcomes;  // empty when the placement was invalid
  std::vector<double> rewards;         // one per trial
  double mean_reward = 0.0;
  double success_rate = 0.0;
  bool valid = true;
};

class SimulationFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One impulse applied during contact resolution.
struct ContactEvent {
  double normal_speed_in = 0.0;
  double kinetic_energy_before = 0.0;
  double kinetic_energy_after = 0.0;
  double penetration = 0.0;
};

using ContactObserver = std::function<void(const ContactEvent&)>;

/// Advances the ball by one dt: velocity update, position update, then
/// contact projection and impulses against every capsule.
BallState integrate_step(const Scene& scene, const BallState& ball,
                         const ContactObserver& observer = {});
Scene integrate_step(Scene scene);

/// Deepest penetration of the ball into any capsule (0 when separated).
double max_penetration(const Scene& scene, Vec2 ball_center);

TrialOutcome run_trial(const Scene& scene, std::uint64_t seed);
double trial_reward(const TrialOutcome& outcome);
ActionEvaluation evaluate_action(const Scene& scene, int n_trials, std::uint64_t seed);
/// Evaluation of an action that could not be placed: every trial scores -1.
ActionEvaluation invalid_action_evaluation(int n_trials);

double point_segment_distance(Vec2 p, const Segment& s);
double segment_segment_distance(const Segment& s, const Segment& t);
double body_distance(const StaticBody& a, const StaticBody& b);
bool placement_valid(const Scene& scene_without_piece, const StaticBody& piece);

/// One JSON-lines replay record.
struct TrialRecord {
  std::string task_id;
  std::vector<double> action;
  std::uint64_t seed = 0;
  TrialOutcome outcome;
};

nlohmann::json trajectory_to_json(const std::vector<TrajectorySample>& samples);
std::vector<TrajectorySample> trajectory_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrialRecord& r);
TrialRecord trial_record_from_json(const nlohmann::json& j);

}  // namespace marble::sim
