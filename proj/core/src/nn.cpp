#include "reorient/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace reorient::nn {

Mlp::Mlp(const std::vector<int>& sizes, Activation activation, Rng& rng, double output_scale)
    : sizes_(sizes), activation_(activation) {
  if (sizes.size() < 2) {
    throw std::invalid_argument("Mlp: need at least input and output sizes");
  }
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix w(sizes[l], sizes[l + 1]);
    Matrix b(1, sizes[l + 1]);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      w.data()[i] = dist(rng);
    }
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      b.data()[i] = dist(rng);
    }
    if (l + 2 == sizes.size()) {
      w *= output_scale;
      b *= output_scale;
    }
    weights_.emplace_back(std::move(w));
    biases_.emplace_back(std::move(b));
  }
}

Matrix Mlp::forward(const Matrix& x) const {
  if (x.cols() != input_size()) {
    throw std::invalid_argument("Mlp: input has " + std::to_string(x.cols()) + " columns, expected " +
                                std::to_string(input_size()));
  }
  Matrix h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Matrix z = h * weights_[l].value;
    z.rowwise() += biases_[l].value.row(0);
    if (l + 1 < weights_.size()) {
      if (activation_ == Activation::kRelu) {
        z = z.cwiseMax(0.0);
      } else {
        z = ad::tanh_values(z);
      }
    }
    h = std::move(z);
  }
  return h;
}

ad::Var Mlp::forward(ad::Tape& tape, const ad::Var& x) {
  if (x.cols() != input_size()) {
    throw std::invalid_argument("Mlp: input has " + std::to_string(x.cols()) + " columns, expected " +
                                std::to_string(input_size()));
  }
  ad::Var h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = ad::add(ad::matmul(h, tape.parameter(weights_[l])), tape.parameter(biases_[l]));
    if (l + 1 < weights_.size()) {
      h = activation_ == Activation::kRelu ? ad::relu(h) : ad::tanh(h);
    }
  }
  return h;
}

std::vector<ad::Parameter*> Mlp::parameters() {
  std::vector<ad::Parameter*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

std::vector<const ad::Parameter*> Mlp::parameters() const {
  std::vector<const ad::Parameter*> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(&weights_[l]);
    out.push_back(&biases_[l]);
  }
  return out;
}

void Mlp::zero_grad() {
  for (auto* p : parameters()) {
    p->zero_grad();
  }
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) {
    n += static_cast<std::size_t>(p->value.size());
  }
  return n;
}

void Mlp::polyak_update(const Mlp& source, double tau) {
  if (source.sizes_ != sizes_) {
    throw std::invalid_argument("Mlp: polyak_update between different architectures");
  }
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    weights_[l].value = tau * source.weights_[l].value + (1.0 - tau) * weights_[l].value;
    biases_[l].value = tau * source.biases_[l].value + (1.0 - tau) * biases_[l].value;
  }
}

std::vector<double> Mlp::flatten() const { return nn::flatten(parameters()); }

void Mlp::unflatten(const std::vector<double>& flat) {
  if (flat.size() != parameter_count()) {
    throw std::invalid_argument("Mlp: unflatten size mismatch");
  }
  std::size_t off = 0;
  for (auto* p : parameters()) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      p->value.data()[i] = flat[off++];
    }
  }
}

std::vector<double> flatten(const std::vector<const ad::Parameter*>& params) {
  std::vector<double> out;
  for (const auto* p : params) {
    out.insert(out.end(), p->value.data(), p->value.data() + p->value.size());
  }
  return out;
}

void Adam::step(const std::vector<ad::Parameter*>& params) {
  if (m_.empty()) {
    for (const auto* p : params) {
      m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (m_.size() != params.size()) {
    throw std::invalid_argument("Adam: parameter list changed between steps");
  }
  double clip = 1.0;
  if (config_.max_grad_norm > 0.0) {
    double sq = 0.0;
    for (const auto* p : params) {
      if (p->grad.size() != 0) {
        sq += p->grad.squaredNorm();
      }
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.max_grad_norm) {
      clip = config_.max_grad_norm / norm;
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    if (p->grad.size() == 0) {
      continue;
    }
    const Matrix g = p->grad * clip;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    p->value.array() -= config_.learning_rate * (m_[i].array() / bc1) /
                        ((v_[i].array() / bc2).sqrt() + config_.epsilon);
    p->zero_grad();
  }
}

std::vector<double> Adam::state() const {
  std::vector<double> out{static_cast<double>(t_)};
  for (std::size_t i = 0; i < m_.size(); ++i) {
    out.insert(out.end(), m_[i].data(), m_[i].data() + m_[i].size());
    out.insert(out.end(), v_[i].data(), v_[i].data() + v_[i].size());
  }
  return out;
}

void Adam::restore(const std::vector<double>& state, const std::vector<ad::Parameter*>& params) {
  if (state.empty()) {
    throw std::invalid_argument("Adam: empty optimizer state");
  }
  t_ = static_cast<std::int64_t>(state[0]);
  m_.clear();
  v_.clear();
  if (t_ == 0 && state.size() == 1) {
    return;
  }
  std::size_t off = 1;
  for (const auto* p : params) {
    const auto n = static_cast<std::size_t>(p->value.size());
    if (off + 2 * n > state.size()) {
      throw std::invalid_argument("Adam: optimizer state does not match parameters");
    }
    Matrix m(p->value.rows(), p->value.cols());
    Matrix v(p->value.rows(), p->value.cols());
    std::copy(state.begin() + static_cast<std::ptrdiff_t>(off), state.begin() + static_cast<std::ptrdiff_t>(off + n),
              m.data());
    off += n;
    std::copy(state.begin() + static_cast<std::ptrdiff_t>(off), state.begin() + static_cast<std::ptrdiff_t>(off + n),
              v.data());
    off += n;
    m_.push_back(std::move(m));
    v_.push_back(std::move(v));
  }
  if (off != state.size()) {
    throw std::invalid_argument("Adam: optimizer state has trailing data");
  }
}

}  // namespace reorient::nn
