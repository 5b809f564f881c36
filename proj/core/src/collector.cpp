#include "reorient/collector.hpp"

#include <iostream>
#include <thread>

namespace reorient::policy {

Worker::Worker(WorkerConfig config, std::uint64_t seed, EstimatorFactory estimator)
    : config_(std::move(config)),
      env_(config_.env, seed),
      rng_(seed ^ 0x9e3779b97f4a7c15ULL),
      noise_rng_(seed ^ 0xc2b2ae3d27d4eb4fULL),
      estimator_(estimator ? estimator() : nullptr),
      policy_stack_(ObservationFrame::kPolicyDim, config_.stack),
      q_stack_(ObservationFrame::kQDim, config_.stack) {}

void Worker::set_gravity_scale(double g) { config_.domain.gravity_scale = g; }

double Worker::gravity_scale() const { return config_.domain.gravity_scale.value_or(1.0); }

Rotation Worker::sample_goal(const std::optional<Rotation>& exclude) {
  const auto& goals = GoalSet::instance();
  std::uniform_int_distribution<std::size_t> pick(1, goals.size());
  while (true) {
    const Rotation g = goals.goal(pick(rng_));
    if (!exclude || distance(g, *exclude) > 1e-6) {
      return g;
    }
  }
}

void Worker::push_frames() {
  const EnvSnapshot s = snapshot(env_);
  const auto& noise = env_.domain().noise;
  policy_stack_.push(
      build_observation(s, Role::kPolicy, estimator_ ? &estimate_ : nullptr, noise, noise_rng_).to_vector());
  q_stack_.push(build_observation(s, Role::kQ, nullptr, noise, noise_rng_).to_vector());
}

void Worker::start_episode() {
  for (int attempt = 0;; ++attempt) {
    try {
      env_.reset(env::sample_domain(rng_, config_.domain), config_.start_element);
      break;
    } catch (const std::runtime_error& e) {
      // Diverged or unclosable grasp: draw a fresh domain.
      ++diverged_;
      if (attempt >= 20) {
        throw;
      }
    }
  }
  env_.set_goal(sample_goal(std::nullopt));
  start_state_ = env_.state().cube;
  ++episode_index_;
  if (estimator_) {
    estimator_->reset(env_.state().cube, noise_rng_);
    estimate_ = env_.state().cube;
  }
  policy_stack_.reset();
  q_stack_.reset();
  push_frames();
  theta_prev_ = distance(env_.goal(), env_.state().cube.R);
  x_prev_ = env_.state().cube.x;
  current_ = EpisodeStats{};
  current_.gravity_scale = env_.domain().gravity_scale;
  err_sum_x_ = err_sum_phi_ = 0.0;
  need_reset_ = false;
}

std::optional<Transition> Worker::step(const PolicyFn& policy) {
  if (need_reset_) {
    start_episode();
  }
  Transition t;
  t.policy_obs = policy_stack_.flat();
  t.q_obs = q_stack_.flat();
  t.action = policy(t.policy_obs, noise_rng_);

  env::StepResult r;
  try {
    r = env_.step(std::span<const double>(t.action.data(), static_cast<std::size_t>(t.action.size())));
  } catch (const env::SimulationDiverged& e) {
    ++diverged_;
    std::cerr << "worker: discarding diverged episode: " << e.what() << "\n";
    need_reset_ = true;
    return std::nullopt;
  }

  last_samples_ = r.samples;
  rewards::RewardInputs in;
  in.theta = distance(env_.goal(), r.cube_true.R);
  in.theta_prev = theta_prev_;
  in.x = r.cube_true.x;
  in.x_prev = x_prev_;
  in.event = r.event;
  bool estimator_stop = false;
  if (estimator_) {
    estimate_ = estimator_->update(r.samples, noise_rng_);
    in.x_err = (estimate_.x - r.cube_true.x).norm();
    in.phi = distance(estimate_.R, r.cube_true.R);
    err_sum_x_ += in.x_err;
    err_sum_phi_ += in.phi;
    if (config_.estimator_termination && r.event == env::Event::kNone) {
      estimator_stop = config_.estimator_termination(in.x_err, in.phi);
    }
  }
  t.reward = rewards::compute_reward(config_.reward, in, config_.reward_config);
  t.terminal = env::is_learning_termination(r.event) || estimator_stop;

  push_frames();
  t.next_policy_obs = policy_stack_.flat();
  t.next_q_obs = q_stack_.flat();

  current_.episode_return += t.reward;
  ++current_.steps;
  theta_prev_ = in.theta;
  x_prev_ = r.cube_true.x;

  if (r.event == env::Event::kSuccess) {
    ++current_.goals_reached;
    env_.set_goal(sample_goal(env_.goal()));
    theta_prev_ = distance(env_.goal(), r.cube_true.R);
  }
  if (env::ends_episode(r.event) || estimator_stop) {
    current_.end = r.event;
    current_.estimator_terminated = estimator_stop;
    if (current_.steps > 0) {
      current_.mean_x_err = err_sum_x_ / current_.steps;
      current_.mean_phi = err_sum_phi_ / current_.steps;
    }
    finished_.push_back(current_);
    need_reset_ = true;
  }
  return t;
}

std::vector<EpisodeStats> Worker::take_finished() {
  std::vector<EpisodeStats> out;
  out.swap(finished_);
  return out;
}

std::int64_t collect(std::vector<std::unique_ptr<Worker>>& workers, const PolicyFn& policy, ReplayBuffer& replay,
                     int steps, bool parallel) {
  std::vector<std::vector<Transition>> local(workers.size());
  std::vector<std::exception_ptr> errors(workers.size());
  auto run = [&](std::size_t w) {
    try {
      local[w].reserve(static_cast<std::size_t>(steps));
      for (int s = 0; s < steps; ++s) {
        if (auto t = workers[w]->step(policy)) {
          local[w].push_back(std::move(*t));
        }
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (parallel && workers.size() > 1) {
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < workers.size(); ++w) {
      threads.emplace_back(run, w);
    }
  } else {
    for (std::size_t w = 0; w < workers.size(); ++w) {
      run(w);
    }
  }
  for (auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
  std::int64_t added = 0;
  for (auto& l : local) {
    replay.add(l);
    added += static_cast<std::int64_t>(l.size());
  }
  return added;
}

}  // namespace reorient::policy
