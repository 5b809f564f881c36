#include "reorient/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "json.hpp"

namespace reorient::pipeline {

using nlohmann::json;

std::string to_string(StageId s) { return "S" + std::to_string(static_cast<int>(s)); }

std::string to_string(StateSource s) { return s == StateSource::kTrueNoisy ? "true+noise" : "estimator"; }

StageId stage_from_string(const std::string& s) {
  std::string t = s;
  if (!t.empty() && (t[0] == 'S' || t[0] == 's')) {
    t = t.substr(1);
  }
  if (t.size() == 1 && t[0] >= '1' && t[0] <= '5') {
    return static_cast<StageId>(t[0] - '0');
  }
  throw ConfigurationError("unknown stage '" + s + "' (expected S1..S5)");
}

std::vector<StageId> all_stages() { return {StageId::kS1, StageId::kS2, StageId::kS3, StageId::kS4, StageId::kS5}; }

GravitySchedule::GravitySchedule(Params p) : params_(p), scale_(p.start) {
  if (p.step <= 0.0 || p.end < p.start || p.window < 1 || p.deadline <= 0.0 || p.deadline > 1.0) {
    throw ConfigurationError("gravity schedule: invalid parameters");
  }
  trace_.emplace_back(0, scale_);
}

void GravitySchedule::set(double g, std::int64_t step) {
  scale_ = std::min(params_.end, g);
  window_.clear();
  trace_.emplace_back(step, scale_);
}

bool GravitySchedule::observe(bool success, std::int64_t step) {
  if (scale_ >= params_.end) {
    return false;
  }
  window_.push_back(success);
  if (static_cast<int>(window_.size()) > params_.window) {
    window_.pop_front();
  }
  if (static_cast<int>(window_.size()) < params_.window) {
    return false;
  }
  const double rate = static_cast<double>(std::count(window_.begin(), window_.end(), true)) / params_.window;
  if (rate <= params_.threshold) {
    return false;
  }
  set(scale_ + params_.step, step);
  return true;
}

void GravitySchedule::restore(const std::vector<std::pair<std::int64_t, double>>& trace, bool forced) {
  if (trace.empty()) {
    throw ConfigurationError("gravity schedule: empty trace");
  }
  trace_ = trace;
  scale_ = trace.back().second;
  forced_ = forced;
  window_.clear();
}

bool GravitySchedule::advance(double progress, std::int64_t step) {
  if (scale_ >= params_.end) {
    return false;
  }
  // Floor on the step grid, reaching `end` at the deadline.
  const double frac = std::clamp(progress / params_.deadline, 0.0, 1.0);
  const double steps = std::floor(frac * (params_.end - params_.start) / params_.step + 1e-9);
  const double floor = frac >= 1.0 ? params_.end : params_.start + steps * params_.step;
  if (floor <= scale_ + 1e-12) {
    return false;
  }
  forced_ = true;
  set(floor, step);
  return true;
}

bool inloop_termination(double x_err, double phi) { return x_err > 0.015 || phi > 0.8; }

void StagePlan::validate() const {
  auto fail = [&](const std::string& what) {
    throw ConfigurationError("stage " + to_string(id) + ": " + what);
  };
  using rewards::RewardKind;
  switch (id) {
    case StageId::kS1:
      if (kind != StageKind::kPolicy || reward != RewardKind::kGoal || source != StateSource::kTrueNoisy) {
        fail("must train the policy on r_g with true states");
      }
      if (!gravity || policy_in) {
        fail("needs a gravity schedule and no input checkpoint");
      }
      break;
    case StageId::kS2:
      if (kind != StageKind::kPolicy || reward != RewardKind::kSimple || source != StateSource::kTrueNoisy) {
        fail("must train the policy on r_s with true states");
      }
      if (policy_in != StageId::kS1) {
        fail("initializes from S1");
      }
      break;
    case StageId::kS3:
    case StageId::kS4:
      if (kind != StageKind::kFilter || reward || policy_in != StageId::kS2) {
        fail("is a filter stage driven by the S2 policy");
      }
      if (id == StageId::kS4 && filter_in != StageId::kS3) {
        fail("refines the S3 filter");
      }
      break;
    case StageId::kS5:
      if (kind != StageKind::kPolicy || reward != RewardKind::kEstimator || source != StateSource::kEstimator) {
        fail("must train the policy on r_e with the estimator");
      }
      if (policy_in != StageId::kS2 || filter_in != StageId::kS4) {
        fail("initializes from S2 and uses the S4 filter");
      }
      break;
  }
  if (id != StageId::kS1 && gravity) {
    fail("only S1 has a gravity schedule");
  }
  if (budget < 0) {
    fail("negative budget");
  }
}

StagePlan standard_plan(StageId id, const PipelineConfig& cfg) {
  StagePlan p;
  p.id = id;
  switch (id) {
    case StageId::kS1:
      p.reward = rewards::RewardKind::kGoal;
      p.lowpass_alpha = cfg.s1_alpha;
      p.gravity = cfg.gravity;
      p.budget = cfg.s1_steps;
      break;
    case StageId::kS2:
      p.reward = rewards::RewardKind::kSimple;
      p.lowpass_alpha = cfg.s2_alpha;
      p.policy_in = StageId::kS1;
      p.budget = cfg.s2_steps;
      break;
    case StageId::kS3:
      p.kind = StageKind::kFilter;
      p.lowpass_alpha = cfg.s2_alpha;
      p.policy_in = StageId::kS2;
      p.budget = cfg.offline_samples;
      break;
    case StageId::kS4:
      p.kind = StageKind::kFilter;
      p.source = StateSource::kEstimator;
      p.lowpass_alpha = cfg.s2_alpha;
      p.policy_in = StageId::kS2;
      p.filter_in = StageId::kS3;
      p.budget = static_cast<std::int64_t>(std::floor(cfg.inloop.ratio * static_cast<double>(cfg.offline_samples)));
      break;
    case StageId::kS5:
      p.reward = rewards::RewardKind::kEstimator;
      p.source = StateSource::kEstimator;
      p.lowpass_alpha = cfg.s2_alpha;
      p.policy_in = StageId::kS2;
      p.filter_in = StageId::kS4;
      p.budget = cfg.s5_steps;
      break;
  }
  p.validate();
  return p;
}

double reference_rate(StageId id) {
  switch (id) {
    case StageId::kS1: return 0.68;
    case StageId::kS2: return 0.99;
    case StageId::kS3: return 0.74;
    case StageId::kS4: return 0.76;
    case StageId::kS5: return 0.92;
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Config file

namespace {

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    out.push_back(std::stoi(item));
  }
  return out;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    out.push_back(std::stod(item));
  }
  return out;
}

/// Reads typed values and rejects keys nobody asked for.
class Reader {
 public:
  explicit Reader(const boost::property_tree::ptree& tree) : tree_(tree) {}

  template <class T>
  void get(const std::string& section, const std::string& key, T& out) {
    used_.insert(section + "." + key);
    const auto sec = tree_.get_child_optional(section);
    if (!sec) {
      return;
    }
    const auto v = sec->get_optional<std::string>(key);
    if (!v) {
      return;
    }
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        out = *v;
      } else if constexpr (std::is_same_v<T, bool>) {
        out = (*v == "true" || *v == "1" || *v == "yes" || *v == "on");
      } else if constexpr (std::is_same_v<T, std::vector<int>>) {
        out = parse_ints(*v);
      } else if constexpr (std::is_same_v<T, std::vector<double>>) {
        out = parse_doubles(*v);
      } else if constexpr (std::is_floating_point_v<T>) {
        out = static_cast<T>(std::stod(*v));
      } else {
        out = static_cast<T>(std::stoll(*v));
      }
    } catch (const std::exception&) {
      throw ConfigurationError("config: bad value '" + *v + "' for " + section + "." + key);
    }
  }

  void check_unused() const {
    for (const auto& [section, keys] : tree_) {
      if (keys.empty() && !keys.data().empty()) {
        throw ConfigurationError("config: key '" + section + "' outside any section");
      }
      for (const auto& kv : keys) {
        if (!used_.contains(section + "." + kv.first)) {
          throw ConfigurationError("config: unknown key " + section + "." + kv.first);
        }
      }
    }
  }

 private:
  const boost::property_tree::ptree& tree_;
  std::set<std::string> used_;
};

}  // namespace

PipelineConfig PipelineConfig::parse(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigurationError(std::string("config: ") + e.what());
  }
  PipelineConfig c;
  Reader r(tree);
  std::string root = c.root.string();
  r.get("run", "name", c.name);
  r.get("run", "root", root);
  r.get("run", "seed", c.seed);
  c.root = root;

  auto& p = c.policy;
  r.get("policy", "workers", p.workers);
  r.get("policy", "hidden", p.sac.hidden);
  r.get("policy", "batch", p.sac.batch_size);
  double lr = p.sac.actor_lr;
  r.get("policy", "lr", lr);
  p.sac.actor_lr = p.sac.critic_lr = p.sac.alpha_lr = lr;
  r.get("policy", "gamma", p.sac.gamma);
  r.get("policy", "tau", p.sac.tau);
  r.get("policy", "init_alpha", p.sac.init_alpha);
  r.get("policy", "max_grad_norm", p.sac.max_grad_norm);
  r.get("policy", "replay", p.replay_capacity);
  r.get("policy", "random_steps", p.random_steps);
  r.get("policy", "learning_starts", p.learning_starts);
  r.get("policy", "steps_per_round", p.steps_per_round);
  r.get("policy", "updates_per_step", p.updates_per_step);
  r.get("policy", "log_every", p.log_every);
  r.get("policy", "parallel", p.parallel);

  r.get("S1", "steps", c.s1_steps);
  r.get("S1", "alpha", c.s1_alpha);
  r.get("S1", "chunk_steps", c.chunk_steps);
  r.get("S1", "gravity_start", c.gravity.start);
  r.get("S1", "gravity_step", c.gravity.step);
  r.get("S1", "gravity_threshold", c.gravity.threshold);
  r.get("S1", "gravity_window", c.gravity.window);
  r.get("S1", "gravity_deadline", c.gravity.deadline);
  r.get("S2", "steps", c.s2_steps);
  r.get("S2", "alpha", c.s2_alpha);

  r.get("S3", "samples", c.offline_samples);
  r.get("S3", "eval_samples", c.eval_samples);
  r.get("S3", "sequence_length", c.collect.sequence_length);
  r.get("S3", "workers", c.collect.workers);
  r.get("S3", "stochastic_policy", c.stochastic_data_policy);
  r.get("S3", "hidden", c.filter_model.hidden);
  r.get("S3", "stage1_epochs", c.stage1.max_epochs);
  r.get("S3", "stage1_batch", c.stage1.batch_size);
  r.get("S3", "stage1_lr", c.stage1.learning_rate);
  r.get("S3", "stage1_patience", c.stage1.patience);
  r.get("S3", "stage2_epochs", c.stage2.epochs);
  r.get("S3", "stage2_particles", c.stage2.particles);
  r.get("S3", "stage2_batch", c.stage2.batch_sequences);
  r.get("S3", "stage2_lr", c.stage2.learning_rate);
  r.get("S3", "stage2_max_batches", c.stage2.max_batches);
  r.get("S3", "stage2_validation", c.stage2.validation_fraction);

  r.get("S4", "per_iteration", c.inloop.per_iteration);
  r.get("S4", "ratio", c.inloop.ratio);
  r.get("S4", "epochs_per_iteration", c.inloop.epochs_per_iteration);
  r.get("S4", "min_success", c.inloop.min_success);
  r.get("S4", "max_batches", c.inloop.stage2.max_batches);
  c.inloop.stage2 = [&] {
    filter::Stage2Config s = c.stage2;
    s.max_batches = c.inloop.stage2.max_batches;
    return s;
  }();

  r.get("S5", "steps", c.s5_steps);

  r.get("bench", "runs_per_cell", c.bench.runs_per_cell);
  r.get("bench", "eta_spin", c.bench.eta_spin);
  r.get("bench", "threads", c.bench.threads);
  r.get("bench", "particles", c.bench.estimator.particles);
  r.get("bench", "goal_timeout", c.bench.goal_timeout);
  c.inloop.inference_particles = c.bench.estimator.particles;
  r.check_unused();

  if (c.name.empty() || c.chunk_steps <= 0 || c.offline_samples <= 0 || c.eval_samples <= 0) {
    throw ConfigurationError("config: name, chunk_steps, samples and eval_samples must be set and positive");
  }
  try {
    c.bench.validate();
  } catch (const bench::ConfigurationError& e) {
    throw ConfigurationError(std::string("config: ") + e.what());
  }
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigurationError("config: cannot read " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

// ---------------------------------------------------------------------------
// Stages

std::filesystem::path policy_checkpoint_path(const PipelineConfig& cfg, StageId s) {
  return cfg.stage_dir(s) / "checkpoints" / "policy.ckpt";
}

std::filesystem::path filter_checkpoint_path(const PipelineConfig& cfg, StageId s) {
  return cfg.stage_dir(s) / "checkpoints" / "filter.ckpt";
}

std::filesystem::path filter_data_path(const PipelineConfig& cfg, StageId s) { return cfg.stage_dir(s) / "data"; }

std::filesystem::path latest_checkpoint_path(const PipelineConfig& cfg, StageId s) {
  return cfg.stage_dir(s) / "checkpoints" / "latest.ckpt";
}

double checkpoint_lowpass_alpha(const Checkpoint& c) { return std::stod(c.meta_or("lowpass_alpha", "0.5")); }

namespace {

std::uint64_t stage_seed(const PipelineConfig& cfg, StageId s) {
  return cfg.seed * 1000ULL + static_cast<std::uint64_t>(s);
}

Checkpoint require_checkpoint(const std::filesystem::path& p, StageId needed_by) {
  if (!std::filesystem::exists(p)) {
    throw ConfigurationError("stage " + to_string(needed_by) + ": missing prerequisite " + p.string());
  }
  return load_checkpoint(p);
}

std::unique_ptr<policy::SacAgent> load_agent(const Checkpoint& c) {
  Rng rng(0);
  return policy::agent_from_checkpoint(c, rng);
}

std::ofstream open_log(const std::filesystem::path& p, bool append = false) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, append ? std::ios::app : std::ios::out);
  if (!out) {
    throw std::runtime_error("cannot write " + p.string());
  }
  out.precision(10);
  return out;
}

double run_stage_bench(const StagePlan& plan, const PipelineConfig& cfg, const policy::SacAgent& agent,
                       std::shared_ptr<const filter::FilterModels> models, std::map<std::string, std::string>& meta) {
  bench::BenchmarkSpec spec = cfg.bench;
  spec.env.lowpass_alpha = plan.lowpass_alpha;
  const auto report = bench::run_benchmark(agent, std::move(models), spec, cfg.seed);
  bench::emit_report(report, cfg.stage_dir(plan.id));
  meta["bench_episodes"] = std::to_string(report.episodes.size());
  meta["bench_successes"] = std::to_string(report.overall.successes);
  std::cerr << to_string(plan.id) << ": benchmark rate " << report.b() << " (" << report.overall.successes << "/"
            << report.overall.attempts << ")\n";
  return report.b();
}

policy::PolicyFn policy_fn(const policy::SacAgent& agent, bool stochastic) {
  return [&agent, stochastic](const Eigen::VectorXd& obs, Rng& rng) { return agent.act(obs, !stochastic, rng); };
}

filter::CollectConfig collect_config(const StagePlan& plan, const PipelineConfig& cfg) {
  filter::CollectConfig c = cfg.collect;
  c.worker.env.lowpass_alpha = plan.lowpass_alpha;
  c.worker.reward = rewards::RewardKind::kSimple;
  c.worker.domain.gravity_scale = 1.0;
  return c;
}

Checkpoint policy_stage_checkpoint(const policy::PolicyTrainer& trainer, const StagePlan& plan,
                                   const std::optional<GravitySchedule>& gravity) {
  Checkpoint ck = trainer.checkpoint(to_string(plan.id));
  ck.metadata["lowpass_alpha"] = std::to_string(plan.lowpass_alpha);
  ck.metadata["state_source"] = to_string(plan.source);
  if (gravity) {
    auto& t = ck.arrays["gravity_trace"];
    for (const auto& [step, scale] : gravity->trace()) {
      t.push_back(static_cast<double>(step));
      t.push_back(scale);
    }
    ck.metadata["gravity_forced"] = gravity->forced() ? "true" : "false";
  }
  return ck;
}

StageOutcome run_policy_stage(const StagePlan& plan, const PipelineConfig& cfg, const RunOptions& opt) {
  const auto dir = cfg.stage_dir(plan.id);
  StageOutcome out;
  out.id = plan.id;
  auto& meta = out.metadata;

  policy::PolicyTrainConfig tc = cfg.policy;
  tc.worker.reward = *plan.reward;
  tc.worker.env.lowpass_alpha = plan.lowpass_alpha;
  std::optional<GravitySchedule> gravity;
  if (plan.gravity) {
    gravity.emplace(*plan.gravity);
    tc.worker.domain.gravity_scale = gravity->scale();
  } else {
    tc.worker.domain.gravity_scale = 1.0;
  }
  policy::EstimatorFactory factory;
  std::shared_ptr<const filter::FilterModels> models;
  if (plan.source == StateSource::kEstimator) {
    models = std::make_shared<const filter::FilterModels>(
        filter::models_from_checkpoint(require_checkpoint(filter_checkpoint_path(cfg, *plan.filter_in), plan.id)));
    factory = filter::estimator_factory(models, cfg.bench.estimator);
    tc.worker.estimator_termination = inloop_termination;
  }
  std::optional<Checkpoint> init;
  if (plan.policy_in) {
    init = require_checkpoint(policy_checkpoint_path(cfg, *plan.policy_in), plan.id);
  }
  policy::PolicyTrainer trainer(tc, stage_seed(cfg, plan.id), factory);
  if (init) {
    // Weights and optimizer states carry over; the replay buffer starts empty.
    trainer.load(*init, false);
    meta["initialized_from"] = to_string(*plan.policy_in);
  }
  meta["replay_at_start"] = std::to_string(trainer.replay().size());
  meta["updates_at_start"] = std::to_string(trainer.agent().updates());
  const auto latest = latest_checkpoint_path(cfg, plan.id);
  const bool resuming = opt.resume && std::filesystem::exists(latest);
  if (resuming) {
    const Checkpoint c = load_checkpoint(latest);
    trainer.load(c, true);
    if (gravity) {
      std::vector<std::pair<std::int64_t, double>> trace;
      const auto& t = c.array("gravity_trace");
      for (std::size_t i = 0; i + 1 < t.size(); i += 2) {
        trace.emplace_back(static_cast<std::int64_t>(t[i]), t[i + 1]);
      }
      gravity->restore(trace, c.meta_or("gravity_forced", "false") == "true");
    }
    meta["resumed_at"] = std::to_string(trainer.env_steps());
    std::cerr << to_string(plan.id) << ": resuming at env step " << trainer.env_steps() << "\n";
  } else if (opt.resume) {
    std::cerr << to_string(plan.id) << ": nothing to resume, starting fresh\n";
  }

  auto episodes = open_log(dir / "logs" / "episodes.jsonl", resuming);
  const auto on_episode = [&](const policy::EpisodeStats& e) {
    episodes << json{{"step", trainer.env_steps()},
                     {"return", e.episode_return},
                     {"steps", e.steps},
                     {"goals", e.goals_reached},
                     {"end", env::to_string(e.end)},
                     {"estimator_terminated", e.estimator_terminated},
                     {"gravity", e.gravity_scale},
                     {"x_err", e.mean_x_err},
                     {"phi", e.mean_phi}}
                    .dump()
             << '\n';
    if (gravity && gravity->observe(e.goals_reached > 0, trainer.env_steps())) {
      trainer.set_gravity_scale(gravity->scale());
    }
  };
  // Counters restart unless resuming, so env_steps() is progress within the stage.
  while (trainer.env_steps() < plan.budget) {
    const std::int64_t chunk = std::min(cfg.chunk_steps, plan.budget - (trainer.env_steps()));
    trainer.train(chunk, on_episode);
    if (gravity) {
      const double progress =
          static_cast<double>(trainer.env_steps()) / static_cast<double>(std::max<std::int64_t>(1, plan.budget));
      if (gravity->advance(progress, trainer.env_steps())) {
        trainer.set_gravity_scale(gravity->scale());
      }
    }
    std::filesystem::create_directories(latest.parent_path());
    save_checkpoint(policy_stage_checkpoint(trainer, plan, gravity), latest);
    episodes.flush();
  }
  if (gravity) {
    if (gravity->scale() < gravity->params().end) {
      throw ConfigurationError("S1 ended before gravity reached its final value; raise the step budget");
    }
    auto g = open_log(dir / "logs" / "gravity.csv");
    g << "step,scale\n";
    for (const auto& [step, scale] : gravity->trace()) {
      g << step << ',' << scale << '\n';
    }
    meta["gravity_final"] = std::to_string(gravity->scale());
    meta["gravity_forced"] = gravity->forced() ? "true" : "false";
  }
  trainer.write_curve_csv(dir / "logs" / "curve.csv");
  meta["env_steps"] = std::to_string(trainer.env_steps());
  meta["episodes"] = std::to_string(trainer.episodes());
  meta["diverged_episodes"] = std::to_string(trainer.diverged_episodes());

  const Checkpoint ck = policy_stage_checkpoint(trainer, plan, gravity);
  out.checkpoint = policy_checkpoint_path(cfg, plan.id);
  std::filesystem::create_directories(out.checkpoint.parent_path());
  save_checkpoint(ck, out.checkpoint);

  out.bench_rate = run_stage_bench(plan, cfg, trainer.agent(), models, meta);
  return out;
}

void write_filter_checkpoint(const filter::FilterModels& m, const StagePlan& plan, const std::filesystem::path& p) {
  Checkpoint c = filter::models_checkpoint(m);
  c.metadata["stage"] = to_string(plan.id);
  std::filesystem::create_directories(p.parent_path());
  save_checkpoint(c, p);
}

StageOutcome run_filter_stage(const StagePlan& plan, const PipelineConfig& cfg) {
  const auto dir = cfg.stage_dir(plan.id);
  StageOutcome out;
  out.id = plan.id;
  auto& meta = out.metadata;
  const auto agent = load_agent(require_checkpoint(policy_checkpoint_path(cfg, *plan.policy_in), plan.id));
  const policy::PolicyFn pol = policy_fn(*agent, cfg.stochastic_data_policy);
  const filter::CollectConfig collect = collect_config(plan, cfg);
  const std::uint64_t seed = stage_seed(cfg, plan.id);
  Rng rng(seed);
  std::shared_ptr<filter::FilterModels> models;

  if (plan.id == StageId::kS3) {
    filter::CollectStats stats;
    const filter::Dataset data = filter::collect_sequences(collect, pol, plan.budget, seed, {}, &stats);
    data.save(filter_data_path(cfg, plan.id));
    meta["offline_samples"] = std::to_string(data.samples());
    meta["offline_sequences"] = std::to_string(data.sequences.size());
    meta["data_success_rate"] = std::to_string(stats.success_rate());
    models = std::make_shared<filter::FilterModels>(cfg.filter_model, rng);
    const auto r1 = filter::train_stage1(data, *models, cfg.stage1, rng);
    {
      auto log = open_log(dir / "logs" / "stage1.csv");
      log << "epoch,train_loss,val_loss,identity_val_loss\n";
      for (std::size_t e = 0; e < r1.train_loss.size(); ++e) {
        log << e + 1 << ',' << r1.train_loss[e] << ',' << r1.val_loss.at(e) << ',' << r1.identity_val_loss << '\n';
      }
    }
    meta["stage1_epochs"] = std::to_string(r1.epochs);
    meta["stage1_converged"] = r1.converged ? "true" : "false";
    const auto r2 = filter::train_stage2(data, *models, cfg.stage2, rng);
    {
      auto log = open_log(dir / "logs" / "stage2.csv");
      log << "batch,loss\n";
      for (std::size_t b = 0; b < r2.batch_loss.size(); ++b) {
        log << b + 1 << ',' << r2.batch_loss[b] << '\n';
      }
      auto val = open_log(dir / "logs" / "stage2_validation.csv");
      val << "epoch,val_loss\n";
      for (std::size_t e = 0; e < r2.val_loss.size(); ++e) {
        val << e << ',' << r2.val_loss[e] << '\n';
      }
    }
    meta["stage2_best_epoch"] = std::to_string(r2.best_epoch);
    meta["stage2_truncated_batches"] = std::to_string(r2.truncated_batches);
  } else {
    filter::Dataset data = filter::Dataset::load(filter_data_path(cfg, *plan.filter_in));
    models = std::make_shared<filter::FilterModels>(
        filter::models_from_checkpoint(require_checkpoint(filter_checkpoint_path(cfg, *plan.filter_in), plan.id)));
    // Fixed evaluation suite: fresh offline rollouts under a separate seed.
    const filter::Dataset eval = filter::collect_sequences(collect, pol, cfg.eval_samples, seed ^ 0xe7a1ULL);
    std::vector<const filter::Sequence*> suite;
    for (const auto& s : eval.sequences) {
      suite.push_back(&s);
    }
    filter::InloopConfig in = cfg.inloop;
    in.collect = collect;
    auto log = open_log(dir / "logs" / "inloop.csv");
    log << "iteration,collected,total_inloop,success_rate,position_error,rotation_error,err_x,err_y,err_z\n";
    int iteration = 0;
    const auto r = filter::train_inloop(pol, *models, data, in, suite, seed, [&](const filter::InloopIteration& it) {
      ++iteration;
      log << iteration << ',' << it.collected << ',' << it.total_inloop << ',' << it.success_rate << ','
          << it.eval.position << ',' << it.eval.rotation << ',' << it.eval.per_axis.x() << ','
          << it.eval.per_axis.y() << ',' << it.eval.per_axis.z() << '\n';
      log.flush();
    });
    data.save(filter_data_path(cfg, plan.id));
    meta["iterations"] = std::to_string(r.iterations.size());
    meta["inloop_samples"] = std::to_string(data.samples(true));
    meta["offline_samples"] = std::to_string(data.samples(false));
    meta["initial_position_error"] = std::to_string(r.initial_eval.position);
    meta["initial_rotation_error"] = std::to_string(r.initial_eval.rotation);
  }
  out.checkpoint = filter_checkpoint_path(cfg, plan.id);
  write_filter_checkpoint(*models, plan, out.checkpoint);
  out.bench_rate = run_stage_bench(plan, cfg, *agent, models, meta);
  return out;
}

}  // namespace

StageOutcome run_stage(const StagePlan& plan, const PipelineConfig& cfg, const RunOptions& opt) {
  plan.validate();
  const auto dir = cfg.stage_dir(plan.id);
  std::filesystem::remove(dir / "logs" / "stage.json");
  std::cerr << to_string(plan.id) << ": starting (budget " << plan.budget << ")\n";
  StageOutcome out = plan.kind == StageKind::kPolicy ? run_policy_stage(plan, cfg, opt) : run_filter_stage(plan, cfg);

  auto& meta = out.metadata;
  meta["stage"] = to_string(plan.id);
  meta["kind"] = plan.kind == StageKind::kPolicy ? "policy" : "filter";
  meta["reward"] = plan.reward ? rewards::to_string(*plan.reward) : "none";
  meta["state_source"] = to_string(plan.source);
  meta["lowpass_alpha"] = std::to_string(plan.lowpass_alpha);
  meta["budget"] = std::to_string(plan.budget);
  meta["seed"] = std::to_string(stage_seed(cfg, plan.id));
  meta["bench_rate"] = std::to_string(out.bench_rate);
  meta["reference_rate"] = std::to_string(reference_rate(plan.id));
  meta["checkpoint"] = out.checkpoint.string();
  // Written last: its presence marks the stage as complete.
  auto marker = open_log(dir / "logs" / "stage.json");
  marker << json(meta).dump(2) << '\n';
  return out;
}

bool stage_complete(const PipelineConfig& cfg, StageId s) {
  return std::filesystem::exists(cfg.stage_dir(s) / "logs" / "stage.json");
}

StageOutcome load_outcome(const PipelineConfig& cfg, StageId s) {
  std::ifstream in(cfg.stage_dir(s) / "logs" / "stage.json");
  if (!in) {
    throw ConfigurationError("stage " + to_string(s) + " has not completed");
  }
  const json j = json::parse(in);
  StageOutcome out;
  out.id = s;
  out.metadata = j.get<std::map<std::string, std::string>>();
  out.bench_rate = std::stod(out.metadata.at("bench_rate"));
  out.checkpoint = out.metadata.at("checkpoint");
  return out;
}

std::vector<StageOutcome> run_pipeline(const PipelineConfig& cfg, std::optional<StageId> from) {
  std::vector<StageOutcome> out;
  for (StageId s : all_stages()) {
    const bool rerun = from && static_cast<int>(s) >= static_cast<int>(*from);
    if (!rerun && stage_complete(cfg, s)) {
      out.push_back(load_outcome(cfg, s));
      continue;
    }
    if (from && !rerun) {
      throw ConfigurationError("cannot start at " + to_string(*from) + ": " + to_string(s) + " has not completed");
    }
    out.push_back(run_stage(standard_plan(s, cfg), cfg));
  }
  return out;
}

}  // namespace reorient::pipeline
