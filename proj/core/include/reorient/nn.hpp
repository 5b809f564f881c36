#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "reorient/autodiff.hpp"
#include "reorient/rotations.hpp"

namespace reorient::nn {

using ad::Matrix;

enum class Activation { kRelu, kTanh };

/// Fully connected network; hidden layers use `activation`, the output layer is linear.
class Mlp {
 public:
  Mlp() = default;
  /// sizes = {in, hidden..., out}. Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in));
  /// the output layer is additionally scaled by `output_scale`.
  Mlp(const std::vector<int>& sizes, Activation activation, Rng& rng, double output_scale = 1.0);

  /// Inference path without a tape.
  Matrix forward(const Matrix& x) const;
  ad::Var forward(ad::Tape& tape, const ad::Var& x);

  int input_size() const { return sizes_.empty() ? 0 : sizes_.front(); }
  int output_size() const { return sizes_.empty() ? 0 : sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }
  Activation activation() const { return activation_; }

  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  void zero_grad();
  std::size_t parameter_count() const;

  /// target <- tau * source + (1 - tau) * target
  void polyak_update(const Mlp& source, double tau);

  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);

 private:
  std::vector<int> sizes_;
  Activation activation_ = Activation::kRelu;
  std::vector<ad::Parameter> weights_;
  std::vector<ad::Parameter> biases_;
};

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clip; <= 0 disables.
  double max_grad_norm = 0.0;
};

/// Adam over a fixed list of parameters. Moment buffers are matched to
/// parameters by position, so the list must be stable across calls.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  /// Applies one update from the accumulated gradients and zeroes them.
  void step(const std::vector<ad::Parameter*>& params);

  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  std::int64_t steps() const { return t_; }

  std::vector<double> state() const;
  void restore(const std::vector<double>& state, const std::vector<ad::Parameter*>& params);

 private:
  AdamConfig config_;
  std::int64_t t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

/// Flattened values of a parameter list.
std::vector<double> flatten(const std::vector<const ad::Parameter*>& params);

}  // namespace reorient::nn
