#pragma once

#include <deque>
#include <filesystem>
#include <functional>
#include <memory>

#include "reorient/checkpoint.hpp"
#include "reorient/collector.hpp"
#include "reorient/sac.hpp"

namespace reorient::policy {

struct PolicyTrainConfig {
  SacConfig sac;
  WorkerConfig worker;
  int workers = 8;
  std::int64_t replay_capacity = 150000;
  std::int64_t random_steps = 5000;  // uniform random actions at the start of a fresh run
  std::int64_t learning_starts = 5000;
  int steps_per_round = 8;  // policy steps per worker between update phases
  double updates_per_step = 1.0;
  std::int64_t log_every = 5000;
  bool parallel = true;
};

struct CurvePoint {
  std::int64_t step = 0;
  std::int64_t episodes = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double alpha = 0.0;
  double entropy = 0.0;
  double gravity_scale = 0.0;
};

/// Collect/update loop around SacAgent and a pool of workers.
class PolicyTrainer {
 public:
  PolicyTrainer(PolicyTrainConfig config, std::uint64_t seed, EstimatorFactory estimator = {});

  /// Runs `steps` more environment steps (summed over workers).
  void train(std::int64_t steps, const std::function<void(const EpisodeStats&)>& on_episode = {});

  SacAgent& agent() { return *agent_; }
  const SacAgent& agent() const { return *agent_; }
  ReplayBuffer& replay() { return *replay_; }
  std::int64_t env_steps() const { return env_steps_; }
  std::int64_t episodes() const { return episodes_; }
  const std::vector<CurvePoint>& curve() const { return curve_; }
  void write_curve_csv(const std::filesystem::path& path) const;

  void set_gravity_scale(double g);
  double gravity_scale() const { return gravity_scale_; }
  /// Fraction of the last 100 episodes that reached at least one goal.
  double trailing_success_rate() const;
  const std::deque<EpisodeStats>& recent_episodes() const { return recent_; }
  std::int64_t diverged_episodes() const;

  Checkpoint checkpoint(const std::string& stage) const;
  /// Restores weights and optimizer states. With `resume`, also step counters,
  /// gravity scale and RNG state; otherwise the replay stays empty and counters restart.
  void load(const Checkpoint& c, bool resume);

 private:
  PolicyTrainConfig config_;
  Rng rng_;
  std::unique_ptr<SacAgent> agent_;
  std::unique_ptr<ReplayBuffer> replay_;
  std::vector<std::unique_ptr<Worker>> workers_;
  std::int64_t env_steps_ = 0;
  std::int64_t episodes_ = 0;
  std::int64_t random_steps_left_;
  double gravity_scale_ = 1.0;
  std::deque<EpisodeStats> recent_;
  std::vector<CurvePoint> curve_;
  SacDiagnostics last_;
  std::int64_t next_log_ = 0;
};

Checkpoint agent_checkpoint(const SacAgent& agent);
/// Rebuilds an agent with the network shapes stored in the checkpoint.
std::unique_ptr<SacAgent> agent_from_checkpoint(const Checkpoint& c, Rng& rng);

}  // namespace reorient::policy
