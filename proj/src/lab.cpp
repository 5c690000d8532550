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

#include "marble/lab.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <regex>
#include <set>
#include <sstream>

#include "marble/evalkit.hpp"
#include "marble/offline_awr.hpp"
#include "marble/online_adapt.hpp"
#include "marble/reward_models.hpp"
#include "marble/taskgen.hpp"

namespace marble::lab {

namespace {

using nlohmann::json;

template <class Cfg, class F>
void visit_fields(Cfg& c, F&& f) {
  f("seed", c.seed);
  f("wind", c.wind);
  f("force", c.force);
  f("out", c.out);
  f("threads", c.threads);
  f("num_tasks", c.num_tasks);
  f("train_tasks", c.train_tasks);
  f("test_tasks", c.test_tasks);
  f("quota", c.quota);
  f("k", c.k);
  f("hidden", c.hidden);
  f("offline_steps", c.offline_steps);
  f("offline_batch", c.offline_batch);
  f("eta", c.eta);
  f("weight_clip", c.weight_clip);
  f("lr_offline", c.lr_offline);
  f("e_step_period", c.e_step_period);
  f("reward_steps", c.reward_steps);
  f("reward_batch", c.reward_batch);
  f("lr_reward", c.lr_reward);
  f("attempts", c.attempts);
  f("eval_period", c.eval_period);
  f("n_expert", c.n_expert);
  f("n_gating", c.n_gating);
  f("mc_samples", c.mc_samples);
  f("lr_online", c.lr_online);
  f("online_batch", c.online_batch);
  f("adapt_seeds", c.adapt_seeds);
  f("offline_eval_samples", c.offline_eval_samples);
  f("baseline_actions", c.baseline_actions);
  f("baseline_top_k", c.baseline_top_k);
  f("profile_actions", c.profile_actions);
  f("profile_split", c.profile_split);
  f("n_boot", c.n_boot);
  f("alpha", c.alpha);
}

std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return json(v).dump(); }
std::string format_value(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, end);
  if (s.find_first_of(".en") == std::string::npos) s += ".0";
  return s;
}
template <class T>
std::string format_value(T v) {
  return std::to_string(v);
}

// Keys each stage reads directly; upstream keys are added by stage_keys().
const std::map<std::string, std::vector<std::string>>& own_keys() {
  static const std::map<std::string, std::vector<std::string>> m{
      {"gen-tasks", {"seed", "num_tasks"}},
      {"gen-data", {"train_tasks", "quota"}},
      {"train-offline",
       {"k", "hidden", "offline_steps", "offline_batch", "eta", "weight_clip", "lr_offline",
        "e_step_period"}},
      {"pretrain-rewards", {"reward_steps", "reward_batch", "lr_reward"}},
      {"adapt-online",
       {"wind", "test_tasks", "attempts", "eval_period", "n_expert", "n_gating", "mc_samples",
        "lr_online", "online_batch", "adapt_seeds"}},
      {"eval", {"wind", "test_tasks", "offline_eval_samples"}},
      {"baseline", {"wind", "test_tasks", "baseline_actions", "baseline_top_k"}},
      {"profile-difficulty", {"wind", "test_tasks", "profile_actions", "profile_split"}},
      {"report", {"n_boot", "alpha"}},
  };
  return m;
}

const std::map<std::string, std::string>& parent_stage() {
  static const std::map<std::string, std::string> m{
      {"gen-data", "gen-tasks"},        {"train-offline", "gen-data"},
      {"pretrain-rewards", "train-offline"}, {"adapt-online", "pretrain-rewards"},
      {"eval", "train-offline"},        {"baseline", "gen-tasks"},
      {"profile-difficulty", "gen-tasks"}, {"report", "gen-tasks"},
  };
  return m;
}

std::set<std::string> stage_keys(const std::string& stage) {
  std::set<std::string> keys;
  for (std::string s = stage;;) {
    const auto it = own_keys().find(s);
    if (it == own_keys().end()) throw ConfigError("unknown stage: " + stage);
    keys.insert(it->second.begin(), it->second.end());
    const auto p = parent_stage().find(s);
    if (p == parent_stage().end()) break;
    s = p->second;
  }
  return keys;
}

std::string hex(const unsigned char* d, unsigned n) {
  std::ostringstream os;
  for (unsigned i = 0; i < n; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(d[i]);
  return os.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingPrerequisite("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<taskgen::Task> load_tasks(const ExperimentConfig& cfg, std::vector<InputRef>& inputs) {
  const Layout L(cfg);
  return taskgen::tasks_from_json(json::parse(read_artifact(L.tasks(), "gen-tasks", cfg, &inputs)));
}

std::vector<taskgen::Task> test_tasks(const std::vector<taskgen::Task>& all,
                                      const ExperimentConfig& cfg) {
  auto test = taskgen::filter_split(all, taskgen::Split::Test);
  if (static_cast<int>(test.size()) < cfg.test_tasks)
    throw ConfigError("test_tasks = " + std::to_string(cfg.test_tasks) + " but only " +
                      std::to_string(test.size()) + " held-out tasks exist");
  test.resize(static_cast<std::size_t>(cfg.test_tasks));
  return test;
}

taskgen::ExperienceDataset load_dataset(const ExperimentConfig& cfg, std::vector<InputRef>& inputs) {
  std::istringstream in(read_artifact(Layout(cfg).dataset(), "gen-data", cfg, &inputs));
  return taskgen::read_dataset(in);
}

moe::MixturePolicy load_policy(const ExperimentConfig& cfg, std::vector<InputRef>& inputs) {
  return moe::policy_from_json(
      json::parse(read_artifact(Layout(cfg).policy(cfg.k), "train-offline", cfg, &inputs)));
}

std::string dyn_name(bool wind) { return wind ? "wind" : "nominal"; }

std::string csv_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

// --- stages ---------------------------------------------------------------

StageResult stage_gen_tasks(const ExperimentConfig& cfg) {
  const Layout L(cfg);
  const auto tasks = taskgen::generate_tasks(cfg.num_tasks, stage_seed(cfg.seed, "gen-tasks"));
  write_artifact(L.tasks(), taskgen::tasks_to_json(tasks).dump(2), "gen-tasks", cfg, {});
  const auto n_train = taskgen::filter_split(tasks, taskgen::Split::Train).size();
  const auto n_val = taskgen::filter_split(tasks, taskgen::Split::Val).size();
  const auto n_test = taskgen::filter_split(tasks, taskgen::Split::Test).size();
  return {{L.tasks()}, std::to_string(tasks.size()) + " tasks (" + std::to_string(n_train) + "/" +
                           std::to_string(n_val) + "/" + std::to_string(n_test) + ")"};
}

StageResult stage_gen_data(const ExperimentConfig& cfg) {
  const Layout L(cfg);
  std::vector<InputRef> inputs;
  auto train = taskgen::filter_split(load_tasks(cfg, inputs), taskgen::Split::Train);
  if (static_cast<int>(train.size()) < cfg.train_tasks)
    throw ConfigError("train_tasks exceeds the number of training-split tasks");
  train.resize(static_cast<std::size_t>(cfg.train_tasks));
  const auto data = taskgen::build_offline_dataset(train, cfg.quota, stage_seed(cfg.seed, "gen-data"));
  std::ostringstream os;
  taskgen::write_dataset(os, data);
  write_artifact(L.dataset(), os.str(), "gen-data", cfg, inputs);
  return {{L.dataset()}, std::to_string(data.size()) + " records, " +
                             std::to_string(data.flagged_tasks.size()) + " flagged tasks"};
}

StageResult stage_train_offline(const ExperimentConfig& cfg) {
  const Layout L(cfg);
  std::vector<InputRef> inputs;
  const auto data = load_dataset(cfg, inputs);
  moe::PolicyConfig pc;
  pc.experts = cfg.k;
  pc.hidden = cfg.hidden_layers();
  const auto seed = stage_seed(cfg.seed, "train-offline");
  moe::MixturePolicy policy(pc, derive_seed(seed, "init"));
  offline::OfflineTrainConfig oc;
  oc.eta = cfg.eta;
  oc.weight_clip = cfg.weight_clip;
  oc.batch_size = cfg.offline_batch;
  oc.steps = cfg.offline_steps;
  oc.e_step_period = cfg.e_step_period;
  oc.lr = cfg.lr_offline;
  const auto result = offline::em_train(policy, data, offline::precompute_values(data), oc, seed);
  write_artifact(L.policy(cfg.k), moe::to_json(policy).dump(), "train-offline", cfg, inputs);
  std::ostringstream log;
  offline::write_train_log(log, result);
  write_artifact(L.train_log(cfg.k), log.str(), "train-offline", cfg, inputs);
  return {{L.policy(cfg.k), L.train_log(cfg.k)},
          "K=" + std::to_string(cfg.k) + ", " + std::to_string(cfg.offline_steps) + " steps"};
}

StageResult stage_pretrain_rewards(const ExperimentConfig& cfg) {
  const Layout L(cfg);
  std::vector<InputRef> inputs;
  auto data = load_dataset(cfg, inputs);
  const auto policy = load_policy(cfg, inputs);
  const auto part = reward::assign_experts(data, policy);
  reward::PretrainConfig pc;
  pc.steps = cfg.reward_steps;
  pc.batch_size = cfg.reward_batch;
  pc.lr = cfg.lr_reward;
  pc.hidden = cfg.hidden_layers();
  const auto models = reward::pretrain_reward_models(data, part, pc, stage_seed(cfg.seed, "pretrain-rewards"));
  write_artifact(L.rewards(cfg.k), reward::models_to_json(models).dump(), "pretrain-rewards", cfg, inputs);
  std::string sizes;
  for (std::size_t k = 0; k < part.offline.size(); ++k)
    sizes += (k ? "/" : "") + std::to_string(part.offline[k].size());
  return {{L.rewards(cfg.k)}, "partition sizes " + sizes};
}

StageResult stage_adapt_online(const ExperimentConfig& cfg) {
  const Layout L(cfg);
  std::vector<InputRef> inputs;
  const auto tasks = test_tasks(load_tasks(cfg, inputs), cfg);
  const auto data = load_dataset(cfg, inputs);
  const auto policy = load_policy(cfg, inputs);
  const auto models = reward::models_from_json(
      json::parse(read_artifact(L.rewards(cfg.k), "pretrain-rewards", cfg, &inputs)));

  online::OnlineConfig oc;
  oc.attempts = cfg.attempts;
  oc.eval_period = cfg.eval_period;
  oc.n_expert = cfg.n_expert;
  oc.n_gating = cfg.n_gating;
  oc.update.eta = cfg.eta;
  oc.update.weight_clip = cfg.weight_clip;
  oc.update.mc_samples = cfg.mc_samples;
  oc.lr_online = cfg.lr_online;
  oc.lr_reward = cfg.lr_reward;
  oc.batch_size = cfg.online_batch;

  StageResult res;
  const fs::path dir = L.sessions(cfg.k, cfg.wind);
  std::vector<double> finals;
  for (const auto& task : tasks) {
    const auto problem = online::marble_problem(task, taskgen::task_dynamics(task, cfg.wind));
    for (int s = 0; s < cfg.adapt_seeds; ++s) {
      const auto seed = derive_seed(stage_seed(cfg.seed, "adapt-online", task.task_id),
                                    static_cast<std::uint64_t>(s));
      const auto session = online::run_online_session(problem, policy, data, models, oc, seed);
      const std::string stem = task.task_id + "-s" + std::to_string(s);
      std::ostringstream hist;
      online::write_history(hist, session.history);
      res.artifacts.push_back(dir / (stem + ".jsonl"));
      write_artifact(res.artifacts.back(), hist.str(), "adapt-online", cfg, inputs);
      res.artifacts.push_back(dir / (stem + ".policy.json"));
      write_artifact(res.artifacts.back(), moe::to_json(session.policy).dump(), "adapt-online", cfg, inputs);
      res.artifacts.push_back(dir / (stem + ".rewards.json"));
      write_artifact(res.artifacts.back(), reward::models_to_json(session.models).dump(), "adapt-online",
                     cfg, inputs);
      if (!session.history.evals.empty()) finals.push_back(session.history.evals.back().success_rate);
    }
  }
  std::string summary = std::to_string(tasks.size() * static_cast<std::size_t>(cfg.adapt_seeds)) + " sessions";
  if (!finals.empty()) summary += ", final-eval IQM " + csv_double(eval::iqm(finals));
  res.summary = summary;
  return res;
}

StageResult stage_eval(const ExperimentConfig& cfg) {
  const Layout L(cfg);
  std::vector<InputRef> inputs;
  const auto tasks = test_tasks(load_tasks(cfg, inputs), cfg);
  const auto policy = load_policy(cfg, inputs);
  std::ostringstream os;
  os << "task,score\n";
  for (const auto& task : tasks) {
    const auto score = eval::offline_eval(policy, {task}, taskgen::task_dynamics(task, cfg.wind),
                                          cfg.offline_eval_samples, stage_seed(cfg.seed, "eval", task.task_id));
    os << task.task_id << ',' << csv_double(score.front()) << '\n';
  }
  const auto path = L.offline_eval(cfg.k, cfg.wind);
  write_artifact(path, os.str(), "eval", cfg, inputs);
  return {{path}, std::to_string(tasks.size()) + " tasks"};
}

StageResult stage_baseline(const ExperimentConfig& cfg) {
  const Layout L(cfg);
  std::vector<InputRef> inputs;
  const auto tasks = test_tasks(load_tasks(cfg, inputs), cfg);
  std::ostringstream os;
  os << "task,score\n";
  for (const auto& task : tasks) {
    const auto b = eval::sim_baseline(task, taskgen::task_dynamics(task, cfg.wind), cfg.baseline_actions,
                                      cfg.baseline_top_k, stage_seed(cfg.seed, "baseline", task.task_id),
                                      taskgen::kTrialsPerAction, cfg.threads);
    os << task.task_id << ',' << csv_double(b.score) << '\n';
  }
  const auto path = L.baseline(cfg.wind);
  write_artifact(path, os.str(), "baseline", cfg, inputs);
  return {{path}, std::to_string(tasks.size()) + " tasks"};
}

StageResult stage_profile(const ExperimentConfig& cfg) {
  const Layout L(cfg);
  std::vector<InputRef> inputs;
  const auto all = load_tasks(cfg, inputs);
  const auto tasks = cfg.profile_split == "all" ? all : test_tasks(all, cfg);
  std::ostringstream os;
  os << "task,split,solution_probability,hard\n";
  for (const auto& task : tasks) {
    const auto p = taskgen::profile_difficulty(task, cfg.profile_actions,
                                               stage_seed(cfg.seed, "profile-difficulty", task.task_id),
                                               taskgen::task_dynamics(task, cfg.wind));
    os << task.task_id << ',' << taskgen::to_string(task.split) << ','
       << csv_double(p.solution_probability) << ',' << (p.hard ? 1 : 0) << '\n';
  }
  const auto path = L.difficulty(cfg.wind);
  write_artifact(path, os.str(), "profile-difficulty", cfg, inputs);
  return {{path}, std::to_string(tasks.size()) + " tasks"};
}

struct Tag {
  int k = 0;
  bool wind = false;
};

std::optional<Tag> parse_tag(const std::string& s) {
  static const std::regex re("(?:single|moe-k([0-9]+))-(nominal|wind)");
  std::smatch m;
  if (!std::regex_match(s, m, re)) return std::nullopt;
  return Tag{m[1].matched ? std::stoi(m[1].str()) : 1, m[2].str() == "wind"};
}

std::vector<std::pair<std::string, double>> read_score_csv(const std::string& text) {
  std::vector<std::pair<std::string, double>> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    rows.emplace_back(line.substr(0, comma), std::stod(line.substr(comma + 1)));
  }
  return rows;
}

StageResult stage_report(const ExperimentConfig& cfg) {
  const Layout L(cfg);
  std::vector<InputRef> inputs;
  const auto tasks = load_tasks(cfg, inputs);
  std::vector<eval::BarRow> bars;
  std::ostringstream curves;
  eval::write_curve_csv_header(curves);
  int sources = 0;

  std::vector<fs::path> session_dirs;
  if (fs::is_directory(L.root / "sessions"))
    for (const auto& e : fs::directory_iterator(L.root / "sessions"))
      if (e.is_directory()) session_dirs.push_back(e.path());
  std::sort(session_dirs.begin(), session_dirs.end());
  for (const auto& dir : session_dirs) {
    const std::string method = dir.filename().string();
    const auto tag = parse_tag(method);
    if (!tag) continue;
    ExperimentConfig sub = cfg;
    sub.k = tag->k;
    sub.wind = tag->wind;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto name = e.path().filename().string();
      if (name.size() > 6 && name.ends_with(".jsonl")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::map<std::string, std::vector<online::SessionHistory>> by_task;
    for (const auto& f : files) {
      std::istringstream in(read_artifact(f, "adapt-online", sub, &inputs));
      auto h = online::read_history(in);
      by_task[h.task_id].push_back(std::move(h));
    }
    if (by_task.empty()) continue;
    ++sources;
    std::vector<std::vector<online::SessionHistory>> grid;
    for (auto& [task_id, hs] : by_task) {
      double mean = 0.0;
      for (const auto& h : hs) mean += h.evals.empty() ? 0.0 : h.evals.back().success_rate;
      bars.push_back({task_id, method, mean / static_cast<double>(hs.size())});
      grid.push_back(hs);
    }
    if (!grid.front().front().evals.empty())
      eval::write_curve_csv(curves, method,
                            eval::learning_curve(grid, cfg.n_boot, cfg.alpha, stage_seed(cfg.seed, "report", method)));
  }

  for (bool wind : {false, true}) {
    ExperimentConfig sub = cfg;
    sub.wind = wind;
    if (fs::exists(L.baseline(wind))) {
      ++sources;
      for (const auto& [task, score] : read_score_csv(read_artifact(L.baseline(wind), "baseline", sub, &inputs)))
        bars.push_back({task, "sim-baseline-" + dyn_name(wind), score});
    }
  }
  std::vector<fs::path> evals;
  for (const auto& e : fs::directory_iterator(L.root)) {
    const auto name = e.path().filename().string();
    if (name.starts_with("offline-eval-") && name.ends_with(".csv")) evals.push_back(e.path());
  }
  std::sort(evals.begin(), evals.end());
  for (const auto& f : evals) {
    const std::string name = f.filename().string();
    const std::string method = name.substr(13, name.size() - 13 - 4);
    const auto tag = parse_tag(method);
    if (!tag) continue;
    ExperimentConfig sub = cfg;
    sub.k = tag->k;
    sub.wind = tag->wind;
    ++sources;
    for (const auto& [task, score] : read_score_csv(read_artifact(f, "eval", sub, &inputs)))
      bars.push_back({task, "offline-" + method, score});
  }
  if (sources == 0)
    throw MissingPrerequisite("report needs outputs of adapt-online, eval or baseline in " + L.root.string());

  std::sort(bars.begin(), bars.end(), [](const auto& a, const auto& b) {
    return std::tie(a.task, a.method) < std::tie(b.task, b.method);
  });
  std::ostringstream bar_csv;
  bar_csv << std::setprecision(10);
  eval::write_bar_csv(bar_csv, bars);
  const auto dir = L.report_dir();
  write_artifact(dir / "curves.csv", curves.str(), "report", cfg, inputs);
  write_artifact(dir / "bars.csv", bar_csv.str(), "report", cfg, inputs);
  return {{dir / "curves.csv", dir / "bars.csv"}, std::to_string(sources) + " sources"};
}

}  // namespace

std::vector<int> ExperimentConfig::hidden_layers() const {
  std::vector<int> out;
  std::stringstream ss(hidden);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int v = 0;
    const auto* b = item.data();
    const auto [p, ec] = std::from_chars(b, b + item.size(), v);
    if (ec != std::errc() || p != b + item.size() || v < 1)
      throw ConfigError("hidden: expected comma-separated positive widths, got '" + hidden + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("hidden: no layers");
  return out;
}

void ExperimentConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  hidden_layers();
  need(num_tasks >= 1, "num_tasks must be >= 1");
  need(train_tasks >= 1, "train_tasks must be >= 1");
  need(test_tasks >= 1, "test_tasks must be >= 1");
  need(quota >= 1, "quota must be >= 1");
  need(k >= 1, "k must be >= 1");
  need(offline_steps >= 0, "offline_steps must be >= 0");
  need(offline_batch >= 1 && reward_batch >= 1 && online_batch >= 1, "batch sizes must be >= 1");
  need(eta > 0.0, "eta must be > 0");
  need(weight_clip >= 1.0, "weight_clip must be >= 1");
  need(lr_offline > 0.0 && lr_reward > 0.0 && lr_online > 0.0, "learning rates must be > 0");
  need(e_step_period >= 1, "e_step_period must be >= 1");
  need(reward_steps >= 0, "reward_steps must be >= 0");
  need(attempts >= 1, "attempts must be >= 1");
  need(eval_period >= 1, "eval_period must be >= 1");
  need(n_expert >= 1 && n_gating >= 1, "ratio schedule lengths must be >= 1");
  need(mc_samples >= 1, "mc_samples must be >= 1");
  need(adapt_seeds >= 1, "adapt_seeds must be >= 1");
  need(offline_eval_samples >= 1, "offline_eval_samples must be >= 1");
  need(baseline_top_k >= 1 && baseline_actions >= baseline_top_k,
       "baseline_actions must be >= baseline_top_k >= 1");
  need(profile_actions >= 1, "profile_actions must be >= 1");
  need(profile_split == "test" || profile_split == "all", "profile_split must be 'test' or 'all'");
  need(n_boot >= 1, "n_boot must be >= 1");
  need(alpha > 0.0 && alpha < 1.0, "alpha must be in (0, 1)");
  need(threads >= 1, "threads must be >= 1");
  need(!out.empty(), "out must not be empty");
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> e;
  visit_fields(*this, [&](const char* name, const auto& v) { e.emplace_back(name, format_value(v)); });
  return e;
}

void bind_options(CLI::App& app, ExperimentConfig& cfg) {
  visit_fields(cfg, [&](const char* name, auto& v) {
    using T = std::decay_t<decltype(v)>;
    const std::string flag = std::string("--") + name;
    if constexpr (std::is_same_v<T, bool>)
      app.add_flag(flag, v);
    else
      app.add_option(flag, v);
  });
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  ExperimentConfig cfg;
  CLI::App app;
  bind_options(app, cfg);
  app.set_config("--config", "", "config file", true);
  app.allow_config_extras(false);
  try {
    app.parse(std::vector<std::string>{path.string(), "--config"});
  } catch (const CLI::Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string to_config_text(const ExperimentConfig& cfg) {
  std::string s;
  for (const auto& [k, v] : cfg.entries()) s += k + " = " + v + "\n";
  return s;
}

std::string config_hash(const ExperimentConfig& cfg, const std::string& stage) {
  const auto keys = stage_keys(stage);
  std::string canon;
  for (const auto& [k, v] : cfg.entries())
    if (keys.count(k)) canon += k + "=" + v + "\n";
  return content_hash(canon);
}

std::uint64_t stage_seed(std::uint64_t root, const std::string& stage, const std::string& task_id) {
  return derive_seed(derive_seed(root, stage), task_id);
}

std::string content_hash(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("content_hash: out of memory");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) &&
                  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("content_hash: digest failed");
  return hex(md, len);
}

std::string file_hash(const fs::path& path) { return content_hash(read_file(path)); }

fs::path manifest_path(const fs::path& artifact) {
  return artifact.parent_path() / (artifact.filename().string() + ".manifest.json");
}

Manifest write_artifact(const fs::path& path, const std::string& bytes, const std::string& stage,
                        const ExperimentConfig& cfg, const std::vector<InputRef>& inputs) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes;
    if (!out) throw std::runtime_error("cannot write " + path.string());
  }
  Manifest m{path.filename().string(), stage, config_hash(cfg, stage), cfg.seed, content_hash(bytes), inputs};
  json j{{"format", "marble-manifest/1"}, {"artifact", m.artifact}, {"stage", m.stage},
         {"config_hash", m.config_hash}, {"seed", m.seed},   {"hash", m.hash}};
  j["inputs"] = json::array();
  std::set<std::string> seen;
  for (const auto& in : inputs)
    if (seen.insert(in.path.string()).second) j["inputs"].push_back({{"path", in.path.string()}, {"hash", in.hash}});
  std::ofstream mo(manifest_path(path));
  mo << j.dump(2) << '\n';
  if (!mo) throw std::runtime_error("cannot write manifest for " + path.string());
  return m;
}

std::string read_artifact(const fs::path& path, const std::string& stage, const ExperimentConfig& cfg,
                          std::vector<InputRef>* inputs) {
  if (!fs::exists(path))
    throw MissingPrerequisite(path.string() + " not found; run stage '" + stage + "' first");
  const fs::path mpath = manifest_path(path);
  if (!fs::exists(mpath))
    throw MissingPrerequisite(mpath.string() + " not found; rerun stage '" + stage + "'");
  const std::string bytes = read_file(path);
  json m;
  try {
    m = json::parse(read_file(mpath));
  } catch (const json::exception&) {
    throw ChecksumError("corrupt manifest " + mpath.string());
  }
  const std::string hash = content_hash(bytes);
  if (m.value("hash", "") != hash)
    throw ChecksumError("checksum mismatch for " + path.string() + " (expected " + m.value("hash", "") +
                        ", got " + hash + "); rerun stage '" + stage + "'");
  if (!cfg.force && m.value("config_hash", "") != config_hash(cfg, stage))
    throw ConfigError(path.string() + " was produced with a different configuration; rerun stage '" +
                      stage + "' or pass --force");
  if (inputs) inputs->push_back({path, hash});
  return bytes;
}

Layout::Layout(const ExperimentConfig& cfg) : root(cfg.out) {}
fs::path Layout::tasks() const { return root / "tasks.json"; }
fs::path Layout::dataset() const { return root / "dataset.jsonl"; }
fs::path Layout::policy(int k) const { return root / ("policy-k" + std::to_string(k) + ".json"); }
fs::path Layout::train_log(int k) const { return root / ("train-log-k" + std::to_string(k) + ".csv"); }
fs::path Layout::rewards(int k) const { return root / ("rewards-k" + std::to_string(k) + ".json"); }
fs::path Layout::sessions(int k, bool wind) const { return root / "sessions" / method_tag(k, wind); }
fs::path Layout::offline_eval(int k, bool wind) const {
  return root / ("offline-eval-" + method_tag(k, wind) + ".csv");
}
fs::path Layout::baseline(bool wind) const { return root / ("baseline-" + dyn_name(wind) + ".csv"); }
fs::path Layout::difficulty(bool wind) const { return root / ("difficulty-" + dyn_name(wind) + ".csv"); }
fs::path Layout::report_dir() const { return root / "report"; }

std::string method_tag(int k, bool wind) {
  return (k == 1 ? std::string("single") : "moe-k" + std::to_string(k)) + "-" + dyn_name(wind);
}

StageResult run_stage(const std::string& stage, const ExperimentConfig& cfg) {
  cfg.validate();
  if (stage == "gen-tasks") return stage_gen_tasks(cfg);
  if (stage == "gen-data") return stage_gen_data(cfg);
  if (stage == "train-offline") return stage_train_offline(cfg);
  if (stage == "pretrain-rewards") return stage_pretrain_rewards(cfg);
  if (stage == "adapt-online") return stage_adapt_online(cfg);
  if (stage == "eval") return stage_eval(cfg);
  if (stage == "baseline") return stage_baseline(cfg);
  if (stage == "profile-difficulty") return stage_profile(cfg);
  if (stage == "report") return stage_report(cfg);
  throw ConfigError("unknown stage '" + stage + "'");
}

int run_stage_guarded(const std::string& stage, const ExperimentConfig& cfg) {
  try {
    const auto res = run_stage(stage, cfg);
    std::cout << stage << ": " << res.summary << '\n';
    for (const auto& a : res.artifacts) std::cout << "  wrote " << a.string() << '\n';
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << '\n';
    return kMissingPrerequisite;
  } catch (const std::exception& e) {
    std::cerr << "runtime fault: " << e.what() << '\n';
    return kRuntimeFault;
  }
}

}  // namespace marble::lab
