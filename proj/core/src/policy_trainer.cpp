#include "reorient/policy_trainer.hpp"

#include <fstream>
#include <numeric>

namespace reorient::policy {

namespace {


std::vector<int> hidden_of(const std::vector<int>& sizes) { return {sizes.begin() + 1, sizes.end() - 1}; }

}  // namespace

PolicyTrainer::PolicyTrainer(PolicyTrainConfig config, std::uint64_t seed, EstimatorFactory estimator)
    : config_(std::move(config)), rng_(seed), random_steps_left_(config_.random_steps) {
  if (config_.workers < 1) {
    throw std::invalid_argument("PolicyTrainer: need at least one worker");
  }
  gravity_scale_ = config_.worker.domain.gravity_scale.value_or(1.0);
  for (int w = 0; w < config_.workers; ++w) {
    workers_.push_back(std::make_unique<Worker>(config_.worker, seed * 1000003ULL + static_cast<std::uint64_t>(w) + 1,
                                                estimator));
  }
  const int pdim = workers_.front()->policy_dim();
  const int qdim = workers_.front()->q_dim();
  agent_ = std::make_unique<SacAgent>(pdim, qdim, env::kJoints, config_.sac, rng_);
  replay_ = std::make_unique<ReplayBuffer>(config_.replay_capacity, pdim, qdim, env::kJoints);
}

void PolicyTrainer::set_gravity_scale(double g) {
  gravity_scale_ = g;
  config_.worker.domain.gravity_scale = g;
  for (auto& w : workers_) {
    w->set_gravity_scale(g);
  }
}

double PolicyTrainer::trailing_success_rate() const {
  if (recent_.empty()) {
    return 0.0;
  }
  const auto hits = std::count_if(recent_.begin(), recent_.end(), [](const auto& e) { return e.goals_reached > 0; });
  return static_cast<double>(hits) / static_cast<double>(recent_.size());
}

std::int64_t PolicyTrainer::diverged_episodes() const {
  std::int64_t n = 0;
  for (const auto& w : workers_) {
    n += w->diverged_episodes();
  }
  return n;
}

void PolicyTrainer::train(std::int64_t steps, const std::function<void(const EpisodeStats&)>& on_episode) {
  const std::int64_t target = env_steps_ + steps;
  const SacAgent& agent = *agent_;
  const PolicyFn learned = [&agent](const Eigen::VectorXd& obs, Rng& rng) { return agent.act(obs, false, rng); };
  const PolicyFn uniform = [](const Eigen::VectorXd&, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Eigen::VectorXd a(env::kJoints);
    for (int i = 0; i < env::kJoints; ++i) {
      a[i] = u(rng);
    }
    return a;
  };
  while (env_steps_ < target) {
    const int per_worker = static_cast<int>(std::min<std::int64_t>(
        config_.steps_per_round, (target - env_steps_ + config_.workers - 1) / config_.workers));
    const bool random = random_steps_left_ > 0;
    const std::int64_t added = collect(workers_, random ? uniform : learned, *replay_, per_worker, config_.parallel);
    const std::int64_t taken = static_cast<std::int64_t>(per_worker) * config_.workers;
    env_steps_ += taken;
    if (random) {
      random_steps_left_ -= taken;
    }
    for (auto& w : workers_) {
      for (const auto& e : w->take_finished()) {
        ++episodes_;
        recent_.push_back(e);
        if (recent_.size() > 100) {
          recent_.pop_front();
        }
        if (on_episode) {
          on_episode(e);
        }
      }
    }
    if (replay_->size() >= std::max<std::int64_t>(config_.learning_starts, config_.sac.batch_size)) {
      const auto updates = static_cast<std::int64_t>(std::llround(static_cast<double>(added) * config_.updates_per_step));
      for (std::int64_t u = 0; u < updates; ++u) {
        last_ = agent_->update(replay_->sample(config_.sac.batch_size, rng_), rng_);
      }
    }
    if (env_steps_ >= next_log_) {
      CurvePoint p;
      p.step = env_steps_;
      p.episodes = episodes_;
      if (!recent_.empty()) {
        p.mean_return = std::accumulate(recent_.begin(), recent_.end(), 0.0,
                                        [](double s, const auto& e) { return s + e.episode_return; }) /
                        static_cast<double>(recent_.size());
      }
      p.success_rate = trailing_success_rate();
      p.critic_loss = last_.critic_loss;
      p.actor_loss = last_.actor_loss;
      p.alpha = agent_->alpha();
      p.entropy = last_.entropy;
      p.gravity_scale = gravity_scale_;
      curve_.push_back(p);
      next_log_ = env_steps_ + config_.log_every;
    }
  }
}

void PolicyTrainer::write_curve_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  out << "step,episodes,return,success_rate,critic_loss,actor_loss,alpha,entropy,gravity_scale\n";
  out.precision(10);
  for (const auto& p : curve_) {
    out << p.step << ',' << p.episodes << ',' << p.mean_return << ',' << p.success_rate << ',' << p.critic_loss << ','
        << p.actor_loss << ',' << p.alpha << ',' << p.entropy << ',' << p.gravity_scale << '\n';
  }
}

Checkpoint agent_checkpoint(const SacAgent& agent) {
  const AgentState s = agent.state();
  Checkpoint c;
  c.kind = "policy";
  c.shapes["policy_sizes"] = s.policy_sizes;
  c.shapes["q_sizes"] = s.q_sizes;
  c.arrays["actor"] = s.actor;
  c.arrays["q1"] = s.q1;
  c.arrays["q2"] = s.q2;
  c.arrays["q1_target"] = s.q1_target;
  c.arrays["q2_target"] = s.q2_target;
  c.arrays["log_alpha"] = {s.log_alpha};
  c.arrays["actor_opt"] = s.actor_opt;
  c.arrays["critic_opt"] = s.critic_opt;
  c.arrays["alpha_opt"] = s.alpha_opt;
  c.arrays["updates"] = {static_cast<double>(s.updates)};
  const auto& cfg = agent.config();
  c.metadata["activation"] = cfg.activation == nn::Activation::kRelu ? "relu" : "tanh";
  c.arrays["sac_config"] = {cfg.gamma,     cfg.tau,         cfg.actor_lr,    cfg.critic_lr,    cfg.alpha_lr,
                            cfg.init_alpha, agent.target_entropy(), static_cast<double>(cfg.batch_size),
                            cfg.log_std_min, cfg.log_std_max, cfg.max_grad_norm};
  c.metadata["policy_dim"] = std::to_string(agent.policy_dim());
  c.metadata["q_dim"] = std::to_string(agent.q_dim());
  c.metadata["action_dim"] = std::to_string(agent.action_dim());
  return c;
}

std::unique_ptr<SacAgent> agent_from_checkpoint(const Checkpoint& c, Rng& rng) {
  if (c.kind != "policy") {
    throw CheckpointError("expected a policy checkpoint, got '" + c.kind + "'");
  }
  const auto& ps = c.shape("policy_sizes");
  const auto& sc = c.array("sac_config");
  if (sc.size() != 11) {
    throw CheckpointError("policy checkpoint has a malformed sac_config");
  }
  SacConfig cfg;
  cfg.hidden = hidden_of(ps);
  cfg.activation = c.meta("activation") == "relu" ? nn::Activation::kRelu : nn::Activation::kTanh;
  cfg.gamma = sc[0];
  cfg.tau = sc[1];
  cfg.actor_lr = sc[2];
  cfg.critic_lr = sc[3];
  cfg.alpha_lr = sc[4];
  cfg.init_alpha = sc[5];
  cfg.target_entropy = sc[6];
  cfg.batch_size = static_cast<int>(sc[7]);
  cfg.log_std_min = sc[8];
  cfg.log_std_max = sc[9];
  cfg.max_grad_norm = sc[10];
  auto agent = std::make_unique<SacAgent>(std::stoi(c.meta("policy_dim")), std::stoi(c.meta("q_dim")),
                                          std::stoi(c.meta("action_dim")), cfg, rng);
  AgentState s;
  s.policy_sizes = ps;
  s.q_sizes = c.shape("q_sizes");
  s.actor = c.array("actor");
  s.q1 = c.array("q1");
  s.q2 = c.array("q2");
  s.q1_target = c.array("q1_target");
  s.q2_target = c.array("q2_target");
  s.log_alpha = c.array("log_alpha").at(0);
  s.actor_opt = c.array("actor_opt");
  s.critic_opt = c.array("critic_opt");
  s.alpha_opt = c.array("alpha_opt");
  s.updates = static_cast<std::int64_t>(c.array("updates").at(0));
  agent->restore(s);
  return agent;
}

Checkpoint PolicyTrainer::checkpoint(const std::string& stage) const {
  Checkpoint c = agent_checkpoint(*agent_);
  c.metadata["stage"] = stage;
  c.metadata["env_steps"] = std::to_string(env_steps_);
  c.metadata["episodes"] = std::to_string(episodes_);
  c.metadata["random_steps_left"] = std::to_string(random_steps_left_);
  c.metadata["gravity_scale"] = std::to_string(gravity_scale_);
  c.metadata["rng"] = rng_to_string(rng_);
  c.metadata["reward"] = rewards::to_string(config_.worker.reward);
  c.arrays["curve"] = {};
  for (const auto& p : curve_) {
    c.arrays["curve"].insert(c.arrays["curve"].end(),
                             {static_cast<double>(p.step), static_cast<double>(p.episodes), p.mean_return,
                              p.success_rate, p.critic_loss, p.actor_loss, p.alpha, p.entropy, p.gravity_scale});
  }
  return c;
}

void PolicyTrainer::load(const Checkpoint& c, bool resume) {
  Rng scratch(0);
  auto restored = agent_from_checkpoint(c, scratch);
  if (restored->policy_dim() != agent_->policy_dim() || restored->q_dim() != agent_->q_dim()) {
    throw CheckpointError("policy checkpoint observation sizes do not match this configuration");
  }
  agent_->restore(restored->state());
  if (resume) {
    env_steps_ = std::stoll(c.meta("env_steps"));
    episodes_ = std::stoll(c.meta("episodes"));
    random_steps_left_ = std::stoll(c.meta_or("random_steps_left", "0"));
    set_gravity_scale(std::stod(c.meta("gravity_scale")));
    rng_from_string(rng_, c.meta("rng"));
    curve_.clear();
    const auto& flat = c.array("curve");
    for (std::size_t i = 0; i + 9 <= flat.size(); i += 9) {
      curve_.push_back(CurvePoint{static_cast<std::int64_t>(flat[i]), static_cast<std::int64_t>(flat[i + 1]),
                                  flat[i + 2], flat[i + 3], flat[i + 4], flat[i + 5], flat[i + 6], flat[i + 7],
                                  flat[i + 8]});
    }
    next_log_ = env_steps_;
  } else {
    random_steps_left_ = 0;
  }
}

}  // namespace reorient::policy
