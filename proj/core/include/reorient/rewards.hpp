#pragma once

#include "reorient/env.hpp"

namespace reorient::rewards {

struct RewardConfig {
  // goal reward
  double lambda_theta = 1.0;
  double eps_theta = 0.1;
  double lambda_pos = 1e4;
  double lambda_clip = 1.0;
  double lambda_drop = -10.0;
  double lambda_succ = 10.0;
  // simple (difference) reward
  double lambda_theta_s = 5.0;
  double lambda_pos_s = 20.0;
  double lambda_clip_s = 0.25;
  // estimator penalty
  double lambda_pos_e = 100.0;
  double lambda_phi = 1.0;
  double lambda_clip_e = 0.5;

  /// Throws std::invalid_argument when eps_theta <= 0 or a clip bound is negative.
  void validate() const;
};

enum class RewardKind { kGoal, kSimple, kEstimator };

std::string to_string(RewardKind k);
RewardKind reward_kind_from_string(const std::string& s);

/// lambda_theta / (theta + eps) - clip(lambda_pos |x|^4, 0, lambda_clip) plus the event bonus.
double reward_goal(double theta, const Eigen::Vector3d& x, env::Event event, const RewardConfig& cfg = {});

/// clip(-lambda'_theta dtheta, -inf, lambda'_clip) - lambda'_pos dx
double reward_simple(double dtheta, double dx, const RewardConfig& cfg = {});

/// r_s minus clip(lambda''_pos x_err^2 + lambda_phi phi^2, 0, lambda''_clip).
double reward_estimator(double r_s, double x_err, double phi, const RewardConfig& cfg = {});

/// Per-step quantities needed by every reward variant.
struct RewardInputs {
  double theta = 0.0;
  double theta_prev = 0.0;
  Eigen::Vector3d x = Eigen::Vector3d::Zero();
  Eigen::Vector3d x_prev = Eigen::Vector3d::Zero();
  env::Event event = env::Event::kNone;
  double x_err = 0.0;  // estimator position error, only for kEstimator
  double phi = 0.0;    // estimator orientation error, only for kEstimator
};

double compute_reward(RewardKind kind, const RewardInputs& in, const RewardConfig& cfg = {});

}  // namespace reorient::rewards
