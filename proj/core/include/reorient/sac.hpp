#pragma once

#include <vector>

#include "reorient/nn.hpp"
#include "reorient/replay.hpp"

namespace reorient::policy {

using ad::Matrix;

struct SacConfig {
  std::vector<int> hidden{256, 256};
  nn::Activation activation = nn::Activation::kRelu;
  double gamma = 0.99;
  double tau = 0.005;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double alpha_lr = 3e-4;
  double init_alpha = 0.2;
  /// Defaults to -action_dim when left at zero.
  double target_entropy = 0.0;
  int batch_size = 256;
  double log_std_min = -5.0;
  double log_std_max = 2.0;
  double max_grad_norm = 0.0;
};

struct SacDiagnostics {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double alpha_loss = 0.0;
  double alpha = 0.0;
  double entropy = 0.0;  // -mean log pi
  double q_mean = 0.0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Squashed Gaussian sample from actor outputs given unit noise. Plain (no tape).
struct PlainSample {
  Matrix action;    // n x A
  Matrix log_prob;  // n x 1
};

/// Everything needed to restore an agent exactly.
struct AgentState {
  std::vector<int> policy_sizes;
  std::vector<int> q_sizes;
  std::vector<double> actor, q1, q2, q1_target, q2_target;
  double log_alpha = 0.0;
  std::vector<double> actor_opt, critic_opt, alpha_opt;
  std::int64_t updates = 0;
};

/// Twin-critic soft actor-critic with a learned temperature.
class SacAgent {
 public:
  SacAgent(int policy_dim, int q_dim, int action_dim, SacConfig config, Rng& rng);

  /// Deterministic: tanh of the mean. Stochastic: squashed Gaussian draw.
  Eigen::VectorXd act(const Eigen::VectorXd& policy_obs, bool deterministic, Rng& rng) const;
  PlainSample sample_plain(const Matrix& policy_obs, const Matrix& noise) const;

  SacDiagnostics update(const Batch& batch, Rng& rng);

  // Loss graphs with explicit unit noise, exposed for gradient checks.
  ad::Var critic_loss(ad::Tape& tape, const Batch& batch, const Matrix& next_noise);
  ad::Var actor_loss(ad::Tape& tape, const Batch& batch, const Matrix& noise, Matrix* log_prob_out = nullptr);
  ad::Var alpha_loss(ad::Tape& tape, const Matrix& log_prob);

  /// Tape version of the squashed sample; returns (action, log_prob).
  std::pair<ad::Var, ad::Var> sample(ad::Tape& tape, const ad::Var& policy_obs, const Matrix& noise);

  double alpha() const;
  double target_entropy() const { return target_entropy_; }
  const SacConfig& config() const { return config_; }
  int policy_dim() const { return policy_dim_; }
  int q_dim() const { return q_dim_; }
  int action_dim() const { return action_dim_; }
  std::int64_t updates() const { return updates_; }

  nn::Mlp& actor() { return actor_; }
  const nn::Mlp& actor() const { return actor_; }
  nn::Mlp& q1() { return q1_; }
  nn::Mlp& q2() { return q2_; }
  const nn::Mlp& q1_target() const { return q1_target_; }
  const nn::Mlp& q2_target() const { return q2_target_; }
  ad::Parameter& log_alpha() { return log_alpha_; }

  std::vector<ad::Parameter*> critic_parameters();
  void update_targets(double tau);

  AgentState state() const;
  void restore(const AgentState& s);

 private:
  Matrix log_std(const Matrix& raw) const;

  SacConfig config_;
  int policy_dim_;
  int q_dim_;
  int action_dim_;
  double target_entropy_;
  nn::Mlp actor_, q1_, q2_, q1_target_, q2_target_;
  ad::Parameter log_alpha_;
  nn::Adam actor_opt_, critic_opt_, alpha_opt_;
  std::int64_t updates_ = 0;
};

/// n x cols matrix of standard normal draws.
Matrix standard_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols);

}  // namespace reorient::policy
