#pragma once

#include <cstdint>
#include <mutex>

#include <Eigen/Core>

#include "reorient/rotations.hpp"

namespace reorient::policy {

struct Transition {
  Eigen::VectorXd policy_obs;
  Eigen::VectorXd q_obs;
  Eigen::VectorXd action;
  double reward = 0.0;
  bool terminal = false;  // learning termination only; timeouts stay false
  Eigen::VectorXd next_policy_obs;
  Eigen::VectorXd next_q_obs;
};

/// Rows are samples.
struct Batch {
  Eigen::MatrixXd policy_obs;
  Eigen::MatrixXd q_obs;
  Eigen::MatrixXd action;
  Eigen::MatrixXd reward;    // n x 1
  Eigen::MatrixXd terminal;  // n x 1, 0 or 1
  Eigen::MatrixXd next_policy_obs;
  Eigen::MatrixXd next_q_obs;
  std::vector<std::int64_t> indices;

  Eigen::Index size() const { return reward.rows(); }
};

/// Fixed-capacity ring buffer stored in single precision. Appends and samples
/// are serialized by an internal mutex.
class ReplayBuffer {
 public:
  ReplayBuffer(std::int64_t capacity, int policy_dim, int q_dim, int action_dim);

  void add(const Transition& t);
  void add(const std::vector<Transition>& ts);
  Batch sample(int batch_size, Rng& rng) const;

  std::int64_t size() const;
  std::int64_t capacity() const { return capacity_; }
  std::int64_t total_added() const;
  void clear();

  int policy_dim() const { return policy_dim_; }
  int q_dim() const { return q_dim_; }
  int action_dim() const { return action_dim_; }

 private:
  void add_locked(const Transition& t);

  std::int64_t capacity_;
  int policy_dim_;
  int q_dim_;
  int action_dim_;
  mutable std::mutex mutex_;
  Eigen::MatrixXf policy_obs_, q_obs_, action_, next_policy_obs_, next_q_obs_;
  Eigen::VectorXf reward_, terminal_;
  std::int64_t next_ = 0;
  std::int64_t size_ = 0;
  std::int64_t total_ = 0;
};

}  // namespace reorient::policy
