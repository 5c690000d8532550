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

#include "marble/play_service.hpp"

#include <httplib.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace marble::play {

namespace {

using nlohmann::json;

std::string format_id(long n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "session-%04ld", n);
  return buf;
}

// Placements arrive as world poses in meters and radians.
taskgen::ActionVector parse_action(const json& body) {
  if (!body.is_object()) throw ServiceError(400, "invalid_action", "action must be an object {x, y, theta}");
  std::array<double, 3> a{};
  const char* keys[] = {"x", "y", "theta"};
  for (int i = 0; i < 3; ++i) {
    const auto it = body.find(keys[i]);
    if (it == body.end() || !it->is_number())
      throw ServiceError(400, "invalid_action", std::string("field '") + keys[i] + "' must be a number");
    a[i] = it->get<double>();
    if (!std::isfinite(a[i]))
      throw ServiceError(400, "invalid_action", std::string("field '") + keys[i] + "' must be finite");
  }
  return taskgen::pose_to_action({a[0], a[1], a[2]});
}

json attempt_to_log(const PlayAttempt& a) {
  json replays = json::array();
  for (const auto& r : a.replays) replays.push_back(sim::to_json(r));
  return {{"action", a.action},           {"seed", a.seed},
          {"valid", a.valid},             {"success_rate", a.success_rate},
          {"mean_reward", a.mean_reward}, {"replays", replays}};
}

PlayAttempt attempt_from_log(const json& j) {
  PlayAttempt a;
  a.action = j.at("action").get<taskgen::ActionVector>();
  a.seed = j.at("seed").get<std::uint64_t>();
  a.valid = j.at("valid").get<bool>();
  a.success_rate = j.at("success_rate").get<double>();
  a.mean_reward = j.at("mean_reward").get<double>();
  for (const auto& r : j.at("replays")) a.replays.push_back(sim::trial_record_from_json(r));
  return a;
}

}  // namespace

std::optional<double> last5_mean(const std::vector<double>& series) {
  if (series.empty()) return std::nullopt;
  const std::size_t n = std::min<std::size_t>(5, series.size());
  double sum = 0.0;
  for (std::size_t i = series.size() - n; i < series.size(); ++i) sum += series[i];
  return sum / static_cast<double>(n);
}

json to_json(const PlayAttempt& a, int index) {
  json replays = json::array();
  for (const auto& r : a.replays) replays.push_back(sim::to_json(r));
  const auto pose = taskgen::action_to_pose(a.action);
  return {{"attempt", index},
          {"action", {{"x", pose.x}, {"y", pose.y}, {"theta", pose.theta}}},
          {"valid", a.valid},
          {"success_rate", a.success_rate},
          {"mean_reward", a.mean_reward},
          {"replays", replays}};
}

PlayService::PlayService(std::vector<taskgen::Task> tasks, PlayConfig config)
    : tasks_(std::move(tasks)), config_(std::move(config)) {
  if (config_.max_attempts < 1) throw std::invalid_argument("play: max_attempts must be >= 1");
  for (std::size_t i = 0; i < tasks_.size(); ++i) task_index_[tasks_[i].task_id] = i;
  if (!config_.log_path.empty()) load_log();
}

const taskgen::Task& PlayService::task(const std::string& id) const {
  const auto it = task_index_.find(id);
  if (it == task_index_.end()) throw ServiceError(404, "unknown_task", "no task with id '" + id + "'");
  return tasks_[it->second];
}

std::shared_ptr<PlayService::Entry> PlayService::find(const std::string& session_id) const {
  std::shared_lock lock(map_mu_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end())
    throw ServiceError(404, "unknown_session", "no session with id '" + session_id + "'");
  return it->second;
}

void PlayService::append_log(const json& event) {
  if (config_.log_path.empty()) return;
  std::lock_guard lock(log_mu_);
  std::ofstream out(config_.log_path, std::ios::app);
  out << event.dump() << '\n';
  out.flush();
  if (!out) throw ServiceError(500, "storage_error", "cannot append to the session log");
}

void PlayService::load_log() {
  std::ifstream in(config_.log_path);
  if (!in) return;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    const auto type = j.at("event").get<std::string>();
    const auto id = j.at("session_id").get<std::string>();
    if (type == "session") {
      auto e = std::make_shared<Entry>();
      e->s.session_id = id;
      e->s.task_id = j.at("task_id").get<std::string>();
      e->s.wind = j.at("dynamics").get<std::string>() == "wind";
      e->s.seed = j.at("seed").get<std::uint64_t>();
      e->s.max_attempts = j.at("max_attempts").get<int>();
      sessions_[id] = e;
      const long n = std::stol(id.substr(id.find('-') + 1));
      next_id_ = std::max(next_id_, n + 1);
    } else if (type == "attempt") {
      const auto it = sessions_.find(id);
      if (it == sessions_.end()) throw std::runtime_error("session log: attempt before session " + id);
      it->second->s.attempts.push_back(attempt_from_log(j.at("result")));
    }
  }
}

json PlayService::list_tasks() const {
  json arr = json::array();
  for (const auto& t : tasks_) {
    json j = taskgen::to_json(t);
    j["state"] = taskgen::encode_state(t);
    arr.push_back(j);
  }
  return {{"drop_point", {sim::kDropPoint.x, sim::kDropPoint.y}},
          {"ball_radius", sim::kBallRadius},
          {"max_attempts", config_.max_attempts},
          {"tasks", arr}};
}

json PlayService::create_session(const json& body) {
  if (!body.is_object() || !body.contains("task_id") || !body["task_id"].is_string())
    throw ServiceError(400, "bad_request", "body must be {task_id, dynamics}");
  const std::string task_id = body["task_id"].get<std::string>();
  task(task_id);
  std::string dynamics = "nominal";
  if (body.contains("dynamics")) {
    if (!body["dynamics"].is_string()) throw ServiceError(400, "bad_request", "dynamics must be a string");
    dynamics = body["dynamics"].get<std::string>();
  }
  if (dynamics != "nominal" && dynamics != "wind")
    throw ServiceError(400, "bad_request", "dynamics must be 'nominal' or 'wind'");

  auto e = std::make_shared<Entry>();
  {
    std::unique_lock lock(map_mu_);
    e->s.session_id = format_id(next_id_++);
    e->s.task_id = task_id;
    e->s.wind = dynamics == "wind";
    e->s.seed = derive_seed(config_.seed, e->s.session_id);
    e->s.max_attempts = config_.max_attempts;
    sessions_[e->s.session_id] = e;
  }
  append_log({{"event", "session"},
              {"session_id", e->s.session_id},
              {"task_id", task_id},
              {"dynamics", dynamics},
              {"seed", e->s.seed},
              {"max_attempts", e->s.max_attempts}});
  return {{"session_id", e->s.session_id}, {"task_id", task_id},      {"dynamics", dynamics},
          {"attempts", 0},                 {"max_attempts", e->s.max_attempts}};
}

PlayAttempt PlayService::run_attempt(const PlaySession& s, const taskgen::ActionVector& raw,
                                     int index) const {
  const auto& t = task(s.task_id);
  PlayAttempt a;
  a.action = taskgen::clip_action(raw);
  a.seed = derive_seed(s.seed, "attempt", static_cast<std::uint64_t>(index));
  const auto scene = taskgen::apply_action(t, a.action, taskgen::task_dynamics(t, s.wind));
  const std::vector<double> action(a.action.begin(), a.action.end());
  if (!scene) {
    const auto eval = sim::invalid_action_evaluation(config_.trials);
    a.valid = false;
    a.mean_reward = eval.mean_reward;
    a.success_rate = 0.0;
    for (int i = 0; i < config_.trials; ++i) {
      sim::TrialRecord r{t.task_id, action, derive_seed(a.seed, static_cast<std::uint64_t>(i)), {}};
      r.outcome.d_min = -eval.rewards[static_cast<std::size_t>(i)];
      a.replays.push_back(std::move(r));
    }
    return a;
  }
  const auto eval = sim::evaluate_action(*scene, config_.trials, a.seed);
  a.mean_reward = eval.mean_reward;
  a.success_rate = eval.success_rate;
  for (int i = 0; i < config_.trials; ++i)
    a.replays.push_back({t.task_id, action, derive_seed(a.seed, static_cast<std::uint64_t>(i)),
                         eval.outcomes[static_cast<std::size_t>(i)]});
  return a;
}

json PlayService::submit_attempt(const std::string& session_id, const json& body) {
  const auto e = find(session_id);
  const auto action = parse_action(body);
  std::lock_guard lock(e->mu);
  const int index = static_cast<int>(e->s.attempts.size());
  if (index >= e->s.max_attempts)
    throw ServiceError(409, "session_full",
                       "session already has " + std::to_string(e->s.max_attempts) + " attempts");
  PlayAttempt a = run_attempt(e->s, action, index);
  append_log({{"event", "attempt"}, {"session_id", session_id}, {"attempt", index}, {"result", attempt_to_log(a)}});
  e->s.attempts.push_back(a);
  json out = to_json(a, index);
  out["remaining"] = e->s.max_attempts - index - 1;
  return out;
}

json PlayService::summary(const std::string& session_id) const {
  const auto e = find(session_id);
  std::lock_guard lock(e->mu);
  std::vector<double> series;
  for (const auto& a : e->s.attempts) series.push_back(a.success_rate);
  const auto last5 = last5_mean(series);
  return {{"session_id", session_id},
          {"task_id", e->s.task_id},
          {"dynamics", e->s.wind ? "wind" : "nominal"},
          {"attempts", series.size()},
          {"max_attempts", e->s.max_attempts},
          {"series", series},
          {"last5_mean", last5 ? json(*last5) : json(nullptr)}};
}

json PlayService::replay(const std::string& session_id, int attempt, int trial) const {
  const auto e = find(session_id);
  std::lock_guard lock(e->mu);
  if (attempt < 0 || attempt >= static_cast<int>(e->s.attempts.size()))
    throw ServiceError(404, "unknown_attempt", "no attempt " + std::to_string(attempt));
  const auto& reps = e->s.attempts[static_cast<std::size_t>(attempt)].replays;
  if (trial < 0 || trial >= static_cast<int>(reps.size()))
    throw ServiceError(404, "unknown_trial", "no trial " + std::to_string(trial));
  return sim::to_json(reps[static_cast<std::size_t>(trial)]);
}

std::size_t PlayService::session_count() const {
  std::shared_lock lock(map_mu_);
  return sessions_.size();
}

PlaySession PlayService::session(const std::string& session_id) const {
  const auto e = find(session_id);
  std::lock_guard lock(e->mu);
  return e->s;
}

void register_routes(httplib::Server& server, PlayService& service) {
  auto send = [](httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };
  auto guard = [send](httplib::Response& res, auto&& fn) {
    try {
      send(res, 200, fn());
    } catch (const ServiceError& e) {
      send(res, e.status(), e.body());
    } catch (const json::exception& e) {
      send(res, 400, {{"code", "bad_request"}, {"message", std::string("malformed JSON: ") + e.what()}});
    } catch (const std::exception& e) {
      send(res, 500, {{"code", "internal_error"}, {"message", e.what()}});
    }
  };
  auto parse_body = [](const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    return json::parse(req.body);
  };

  server.Get("/tasks", [&service, guard](const httplib::Request&, httplib::Response& res) {
    guard(res, [&] { return service.list_tasks(); });
  });
  server.Post("/sessions", [&service, guard, parse_body](const httplib::Request& req, httplib::Response& res) {
    guard(res, [&] { return service.create_session(parse_body(req)); });
  });
  server.Post(R"(/sessions/([^/]+)/attempts)",
              [&service, guard, parse_body](const httplib::Request& req, httplib::Response& res) {
                guard(res, [&] { return service.submit_attempt(req.matches[1], parse_body(req)); });
              });
  server.Get(R"(/sessions/([^/]+)/summary)", [&service, guard](const httplib::Request& req, httplib::Response& res) {
    guard(res, [&] { return service.summary(req.matches[1]); });
  });
  server.Get(R"(/sessions/([^/]+)/replays/(-?\d+)/(-?\d+))",
             [&service, guard](const httplib::Request& req, httplib::Response& res) {
               guard(res, [&] {
                 return service.replay(req.matches[1], std::stoi(req.matches[2]), std::stoi(req.matches[3]));
               });
             });
  server.set_error_handler([send](const httplib::Request& req, httplib::Response& res) {
    if (res.body.empty())
      send(res, res.status, {{"code", res.status == 404 ? "not_found" : "http_error"},
                             {"message", "no route for " + req.method + " " + req.path}});
  });
}

}  // namespace marble::play
