#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "reorient/env.hpp"
#include "reorient/observation.hpp"
#include "reorient/replay.hpp"
#include "reorient/rewards.hpp"
#include "reorient/sac.hpp"

namespace reorient::policy {

/// Cube-state estimator driven by proprioception, e.g. the particle filter.
class StateEstimator {
 public:
  virtual ~StateEstimator() = default;
  /// Called right after an environment reset with the known start state.
  virtual void reset(const env::CubeState& start, Rng& rng) = 0;
  /// Consumes the sensor samples of one policy step and returns the estimate.
  virtual env::CubeState update(std::span<const env::SensorSample> samples, Rng& rng) = 0;
};

using EstimatorFactory = std::function<std::unique_ptr<StateEstimator>()>;
using PolicyFn = std::function<Eigen::VectorXd(const Eigen::VectorXd& policy_obs, Rng& rng)>;

struct WorkerConfig {
  env::EnvConfig env;
  env::DomainOverrides domain;
  rewards::RewardKind reward = rewards::RewardKind::kGoal;
  rewards::RewardConfig reward_config;
  int stack = 5;
  /// Fixed start element (index into the octahedral group); random when unset.
  std::optional<std::size_t> start_element;
  /// Extra learning termination on estimator error (x_err, phi), used in estimator-in-loop training.
  std::function<bool(double, double)> estimator_termination;
};

struct EpisodeStats {
  double episode_return = 0.0;
  int steps = 0;
  int goals_reached = 0;
  env::Event end = env::Event::kNone;
  bool estimator_terminated = false;
  double gravity_scale = 1.0;
  double mean_x_err = 0.0;
  double mean_phi = 0.0;
};

/// One environment plus the bookkeeping that turns its steps into transitions.
class Worker {
 public:
  Worker(WorkerConfig config, std::uint64_t seed, EstimatorFactory estimator = {});

  /// Advances one policy step; returns the transition, or nothing when the
  /// episode was discarded because the simulation diverged.
  std::optional<Transition> step(const PolicyFn& policy);

  std::vector<EpisodeStats> take_finished();
  std::int64_t diverged_episodes() const { return diverged_; }
  void set_gravity_scale(double g);
  double gravity_scale() const;
  const env::Environment& environment() const { return env_; }
  const WorkerConfig& config() const { return config_; }
  bool uses_estimator() const { return estimator_ != nullptr; }

  /// Sensor samples of the most recent step and the cube state right after the last reset.
  const std::vector<env::SensorSample>& last_samples() const { return last_samples_; }
  const env::CubeState& episode_start_state() const { return start_state_; }
  /// Incremented every time a new episode starts.
  std::uint64_t episode_index() const { return episode_index_; }
  const env::CubeState& last_estimate() const { return estimate_; }

  int policy_dim() const { return policy_stack_.dim(); }
  int q_dim() const { return q_stack_.dim(); }

 private:
  void start_episode();
  void push_frames();
  Rotation sample_goal(const std::optional<Rotation>& exclude);

  WorkerConfig config_;
  env::Environment env_;
  Rng rng_;
  Rng noise_rng_;
  std::unique_ptr<StateEstimator> estimator_;
  ObservationStack policy_stack_;
  ObservationStack q_stack_;
  env::CubeState estimate_;
  bool need_reset_ = true;
  double theta_prev_ = 0.0;
  Eigen::Vector3d x_prev_ = Eigen::Vector3d::Zero();
  EpisodeStats current_;
  double err_sum_x_ = 0.0;
  double err_sum_phi_ = 0.0;
  std::vector<EpisodeStats> finished_;
  std::int64_t diverged_ = 0;
  std::vector<env::SensorSample> last_samples_;
  env::CubeState start_state_;
  std::uint64_t episode_index_ = 0;
};

/// Runs every worker for `steps` policy steps (one thread per worker) and
/// appends the transitions in worker order, so the buffer contents do not
/// depend on thread scheduling. Returns the number of transitions added.
std::int64_t collect(std::vector<std::unique_ptr<Worker>>& workers, const PolicyFn& policy, ReplayBuffer& replay,
                     int steps, bool parallel = true);

}  // namespace reorient::policy
