#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

// Minimal tape-based reverse-mode differentiation over dense double matrices.
//
// Values are row-major batches: one sample per row. Binary elementwise ops
// broadcast any dimension of size 1. Quaternions are rows of (w, x, y, z).

namespace reorient::ad {

using Matrix = Eigen::MatrixXd;

/// Trainable tensor owned by a model; the tape writes gradients into `grad`.
struct Parameter {
  Matrix value;
  Matrix grad;

  Parameter() = default;
  explicit Parameter(Matrix v) : value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var scalar(double value);
  /// Leaf bound to a parameter; backward() accumulates into param.grad.
  Var parameter(Parameter& param);

  /// Seeds d(root)/d(root) = 1 (root must be 1x1) and propagates.
  void backward(const Var& root);

  std::size_t size() const { return nodes_.size(); }
  void clear();

  // Internal API used by the op implementations.
  using BackwardFn = std::function<void(Tape&, int)>;
  Var record(Matrix value, BackwardFn backward, std::span<const Var> inputs);
  Var record(Matrix value, BackwardFn backward, std::initializer_list<Var> inputs) {
    return record(std::move(value), std::move(backward), std::span<const Var>(inputs.begin(), inputs.size()));
  }
  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  void accumulate(int id, const Matrix& g);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

// Arithmetic with broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var minimum(const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

Var matmul(const Var& a, const Var& b);

// Elementwise nonlinearities.
Var tanh(const Var& a);
/// Elementwise tanh through the vectorized exp; std::tanh is scalar-only for doubles.
Matrix tanh_values(const Matrix& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var softplus(const Var& a);
Var square(const Var& a);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
Var row_sum(const Var& a);

// Shape manipulation.
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
/// out.row(i) = a.row(index[i]); indices are treated as constants.
Var gather_rows(const Var& a, std::span<const Eigen::Index> index);
/// Each row repeated `times` times consecutively.
Var repeat_rows(const Var& a, Eigen::Index times);

// Grouped reductions over consecutive blocks of `group` rows.
Var group_sum_rows(const Var& a, Eigen::Index group);
/// a is (n x 1); returns (n/group x 1) log-sum-exp per block.
Var group_logsumexp(const Var& a, Eigen::Index group);

// Quaternion batches (rows of w, x, y, z).
Var quat_mul(const Var& a, const Var& b);
Var quat_conj(const Var& q);
/// Exponential map from rotation vectors (rows of 3) to unit quaternions.
Var quat_exp(const Var& rotvec);
Var quat_normalize(const Var& q);
/// Rotates each vector row of v by the matching quaternion row of q.
Var quat_rotate(const Var& q, const Var& v);
/// Squared geodesic angle between matching rows of unit quaternions a and b.
Var quat_angle_sq(const Var& a, const Var& b);

}  // namespace reorient::ad
