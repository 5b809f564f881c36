#include "reorient/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace reorient::rewards {

void RewardConfig::validate() const {
  if (!(eps_theta > 0.0)) {
    throw std::invalid_argument("reward: eps_theta must be positive");
  }
  if (lambda_clip < 0.0 || lambda_clip_s < 0.0 || lambda_clip_e < 0.0) {
    throw std::invalid_argument("reward: clip bounds must be non-negative");
  }
}

std::string to_string(RewardKind k) {
  switch (k) {
    case RewardKind::kGoal: return "goal";
    case RewardKind::kSimple: return "simple";
    case RewardKind::kEstimator: return "estimator";
  }
  return "goal";
}

RewardKind reward_kind_from_string(const std::string& s) {
  if (s == "goal" || s == "r_g") return RewardKind::kGoal;
  if (s == "simple" || s == "r_s") return RewardKind::kSimple;
  if (s == "estimator" || s == "r_e") return RewardKind::kEstimator;
  throw std::invalid_argument("unknown reward '" + s + "'");
}

double reward_goal(double theta, const Eigen::Vector3d& x, env::Event event, const RewardConfig& cfg) {
  const double n2 = x.squaredNorm();
  double r = cfg.lambda_theta / (theta + cfg.eps_theta) - std::clamp(cfg.lambda_pos * n2 * n2, 0.0, cfg.lambda_clip);
  if (event == env::Event::kDropped) {
    r += cfg.lambda_drop;
  } else if (event == env::Event::kSuccess) {
    r += cfg.lambda_succ;
  }
  return r;
}

double reward_simple(double dtheta, double dx, const RewardConfig& cfg) {
  return std::min(-cfg.lambda_theta_s * dtheta, cfg.lambda_clip_s) - cfg.lambda_pos_s * dx;
}

double reward_estimator(double r_s, double x_err, double phi, const RewardConfig& cfg) {
  const double penalty = cfg.lambda_pos_e * x_err * x_err + cfg.lambda_phi * phi * phi;
  return r_s - std::clamp(penalty, 0.0, cfg.lambda_clip_e);
}

double compute_reward(RewardKind kind, const RewardInputs& in, const RewardConfig& cfg) {
  switch (kind) {
    case RewardKind::kGoal:
      return reward_goal(in.theta, in.x, in.event, cfg);
    case RewardKind::kSimple:
      return reward_simple(in.theta - in.theta_prev, in.x.norm() - in.x_prev.norm(), cfg);
    case RewardKind::kEstimator:
      return reward_estimator(reward_simple(in.theta - in.theta_prev, in.x.norm() - in.x_prev.norm(), cfg), in.x_err,
                              in.phi, cfg);
  }
  return 0.0;
}

}  // namespace reorient::rewards
