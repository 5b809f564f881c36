#include "reorient/replay.hpp"

#include <stdexcept>

namespace reorient::policy {

ReplayBuffer::ReplayBuffer(std::int64_t capacity, int policy_dim, int q_dim, int action_dim)
    : capacity_(capacity), policy_dim_(policy_dim), q_dim_(q_dim), action_dim_(action_dim) {
  if (capacity <= 0) {
    throw std::invalid_argument("ReplayBuffer: capacity must be positive");
  }
  // Column-major storage with one column per transition keeps appends contiguous.
  policy_obs_.resize(policy_dim, capacity);
  next_policy_obs_.resize(policy_dim, capacity);
  q_obs_.resize(q_dim, capacity);
  next_q_obs_.resize(q_dim, capacity);
  action_.resize(action_dim, capacity);
  reward_.resize(capacity);
  terminal_.resize(capacity);
}

void ReplayBuffer::add_locked(const Transition& t) {
  if (t.policy_obs.size() != policy_dim_ || t.next_policy_obs.size() != policy_dim_ || t.q_obs.size() != q_dim_ ||
      t.next_q_obs.size() != q_dim_ || t.action.size() != action_dim_) {
    throw std::invalid_argument("ReplayBuffer: transition has wrong dimensions");
  }
  policy_obs_.col(next_) = t.policy_obs.cast<float>();
  next_policy_obs_.col(next_) = t.next_policy_obs.cast<float>();
  q_obs_.col(next_) = t.q_obs.cast<float>();
  next_q_obs_.col(next_) = t.next_q_obs.cast<float>();
  action_.col(next_) = t.action.cast<float>();
  reward_[next_] = static_cast<float>(t.reward);
  terminal_[next_] = t.terminal ? 1.0f : 0.0f;
  next_ = (next_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
  ++total_;
}

void ReplayBuffer::add(const Transition& t) {
  std::lock_guard lock(mutex_);
  add_locked(t);
}

void ReplayBuffer::add(const std::vector<Transition>& ts) {
  std::lock_guard lock(mutex_);
  for (const auto& t : ts) {
    add_locked(t);
  }
}

Batch ReplayBuffer::sample(int batch_size, Rng& rng) const {
  std::lock_guard lock(mutex_);
  if (size_ == 0) {
    throw std::logic_error("ReplayBuffer: sample from empty buffer");
  }
  Batch b;
  b.policy_obs.resize(batch_size, policy_dim_);
  b.next_policy_obs.resize(batch_size, policy_dim_);
  b.q_obs.resize(batch_size, q_dim_);
  b.next_q_obs.resize(batch_size, q_dim_);
  b.action.resize(batch_size, action_dim_);
  b.reward.resize(batch_size, 1);
  b.terminal.resize(batch_size, 1);
  std::uniform_int_distribution<std::int64_t> pick(0, size_ - 1);
  for (int i = 0; i < batch_size; ++i) {
    const std::int64_t j = pick(rng);
    b.indices.push_back(j);
    b.policy_obs.row(i) = policy_obs_.col(j).cast<double>().transpose();
    b.next_policy_obs.row(i) = next_policy_obs_.col(j).cast<double>().transpose();
    b.q_obs.row(i) = q_obs_.col(j).cast<double>().transpose();
    b.next_q_obs.row(i) = next_q_obs_.col(j).cast<double>().transpose();
    b.action.row(i) = action_.col(j).cast<double>().transpose();
    b.reward(i, 0) = reward_[j];
    b.terminal(i, 0) = terminal_[j];
  }
  return b;
}

std::int64_t ReplayBuffer::size() const {
  std::lock_guard lock(mutex_);
  return size_;
}

std::int64_t ReplayBuffer::total_added() const {
  std::lock_guard lock(mutex_);
  return total_;
}

void ReplayBuffer::clear() {
  std::lock_guard lock(mutex_);
  next_ = 0;
  size_ = 0;
}

}  // namespace reorient::policy
