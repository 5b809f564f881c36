#include "reorient/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace reorient::ad {

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, nullptr, false});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::parameter(Parameter& param) {
  nodes_.push_back(Node{param.value, Matrix(), nullptr, &param, true});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Matrix value, BackwardFn backward, std::span<const Var> inputs) {
  bool needs = false;
  for (const auto& v : inputs) {
    if (v.tape() != this) {
      throw std::invalid_argument("ad: mixing variables from different tapes");
    }
    needs = needs || needs_grad(v.id());
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, nullptr, needs});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::accumulate(int id, const Matrix& g) {
  auto& node = nodes_[static_cast<std::size_t>(id)];
  if (!node.needs_grad) {
    return;
  }
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

void Tape::backward(const Var& root) {
  if (root.tape() != this || root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("ad: backward() needs a 1x1 root on this tape");
  }
  accumulate(root.id(), Matrix::Ones(1, 1));
  for (int id = root.id(); id >= 0; --id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (node.grad.size() == 0) {
      continue;
    }
    if (node.backward) {
      node.backward(*this, id);
    }
    if (node.param != nullptr) {
      if (node.param->grad.size() == 0) {
        node.param->grad = Matrix::Zero(node.value.rows(), node.value.cols());
      }
      node.param->grad += node.grad;
    }
  }
}

void Tape::clear() { nodes_.clear(); }

namespace {

void check_broadcast(const Matrix& a, const Matrix& b, const char* op) {
  const bool rows_ok = a.rows() == b.rows() || a.rows() == 1 || b.rows() == 1;
  const bool cols_ok = a.cols() == b.cols() || a.cols() == 1 || b.cols() == 1;
  if (!rows_ok || !cols_ok) {
    throw std::invalid_argument(std::string("ad: incompatible shapes in ") + op + ": " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

Matrix expand(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) {
    return m;
  }
  return m.replicate(rows / m.rows(), cols / m.cols());
}

Matrix reduce_to(const Matrix& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) {
    return g;
  }
  if (rows == 1 && cols == 1) {
    return Matrix::Constant(1, 1, g.sum());
  }
  if (rows == 1) {
    return g.colwise().sum();
  }
  return g.rowwise().sum();
}

template <typename F>
Var unary(const Var& a, Matrix value, F grad_fn) {
  Tape* t = a.tape();
  const int ia = a.id();
  return t->record(std::move(value),
                   [ia, grad_fn](Tape& tape, int self) { tape.accumulate(ia, grad_fn(tape, self)); }, {a});
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_broadcast(a.value(), b.value(), "add");
  const auto r = std::max(a.rows(), b.rows());
  const auto c = std::max(a.cols(), b.cols());
  Matrix v = expand(a.value(), r, c) + expand(b.value(), r, c);
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->record(std::move(v),
                          [ia, ib](Tape& t, int self) {
                            const Matrix& g = t.grad(self);
                            t.accumulate(ia, reduce_to(g, t.value(ia).rows(), t.value(ia).cols()));
                            t.accumulate(ib, reduce_to(g, t.value(ib).rows(), t.value(ib).cols()));
                          },
                          {a, b});
}

Var sub(const Var& a, const Var& b) {
  check_broadcast(a.value(), b.value(), "sub");
  const auto r = std::max(a.rows(), b.rows());
  const auto c = std::max(a.cols(), b.cols());
  Matrix v = expand(a.value(), r, c) - expand(b.value(), r, c);
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->record(std::move(v),
                          [ia, ib](Tape& t, int self) {
                            const Matrix& g = t.grad(self);
                            t.accumulate(ia, reduce_to(g, t.value(ia).rows(), t.value(ia).cols()));
                            t.accumulate(ib, reduce_to(-g, t.value(ib).rows(), t.value(ib).cols()));
                          },
                          {a, b});
}

Var mul(const Var& a, const Var& b) {
  check_broadcast(a.value(), b.value(), "mul");
  const auto r = std::max(a.rows(), b.rows());
  const auto c = std::max(a.cols(), b.cols());
  Matrix v = expand(a.value(), r, c).cwiseProduct(expand(b.value(), r, c));
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->record(std::move(v),
                          [ia, ib, r, c](Tape& t, int self) {
                            const Matrix& g = t.grad(self);
                            const Matrix& va = t.value(ia);
                            const Matrix& vb = t.value(ib);
                            if (t.needs_grad(ia)) {
                              t.accumulate(ia, reduce_to(g.cwiseProduct(expand(vb, r, c)), va.rows(), va.cols()));
                            }
                            if (t.needs_grad(ib)) {
                              t.accumulate(ib, reduce_to(g.cwiseProduct(expand(va, r, c)), vb.rows(), vb.cols()));
                            }
                          },
                          {a, b});
}

Var div(const Var& a, const Var& b) {
  check_broadcast(a.value(), b.value(), "div");
  const auto r = std::max(a.rows(), b.rows());
  const auto c = std::max(a.cols(), b.cols());
  Matrix v = expand(a.value(), r, c).cwiseQuotient(expand(b.value(), r, c));
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->record(std::move(v),
                          [ia, ib, r, c](Tape& t, int self) {
                            const Matrix& g = t.grad(self);
                            const Matrix& va = t.value(ia);
                            const Matrix& vb = t.value(ib);
                            const Matrix eb = expand(vb, r, c);
                            if (t.needs_grad(ia)) {
                              t.accumulate(ia, reduce_to(g.cwiseQuotient(eb), va.rows(), va.cols()));
                            }
                            if (t.needs_grad(ib)) {
                              const Matrix out = expand(va, r, c).cwiseQuotient(eb);
                              t.accumulate(ib, reduce_to(-g.cwiseProduct(out).cwiseQuotient(eb), vb.rows(), vb.cols()));
                            }
                          },
                          {a, b});
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  return unary(a, a.value() * c, [c](Tape& t, int self) -> Matrix { return t.grad(self) * c; });
}

Var add_scalar(const Var& a, double c) {
  return unary(a, (a.value().array() + c).matrix(), [](Tape& t, int self) -> Matrix { return t.grad(self); });
}

Var minimum(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("ad: minimum needs equal shapes");
  }
  Matrix v = a.value().cwiseMin(b.value());
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->record(std::move(v),
                          [ia, ib](Tape& t, int self) {
                            const Matrix& g = t.grad(self);
                            const auto pick_a = (t.value(ia).array() <= t.value(ib).array()).cast<double>();
                            t.accumulate(ia, (g.array() * pick_a).matrix());
                            t.accumulate(ib, (g.array() * (1.0 - pick_a)).matrix());
                          },
                          {a, b});
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("ad: matmul inner dimensions differ");
  }
  Matrix v = a.value() * b.value();
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->record(std::move(v),
                          [ia, ib](Tape& t, int self) {
                            const Matrix& g = t.grad(self);
                            if (t.needs_grad(ia)) {
                              t.accumulate(ia, g * t.value(ib).transpose());
                            }
                            if (t.needs_grad(ib)) {
                              t.accumulate(ib, t.value(ia).transpose() * g);
                            }
                          },
                          {a, b});
}

Matrix tanh_values(const Matrix& a) {
  const Eigen::ArrayXXd e = (-2.0 * a.array().abs()).exp();
  const Eigen::ArrayXXd t = (1.0 - e) / (1.0 + e);
  return (a.array() < 0.0).select(-t, t).matrix();
}

Var tanh(const Var& a) {
  Matrix v = tanh_values(a.value());
  return unary(a, std::move(v), [](Tape& t, int self) -> Matrix {
    const auto y = t.value(self).array();
    return (t.grad(self).array() * (1.0 - y * y)).matrix();
  });
}

Var relu(const Var& a) {
  Matrix v = a.value().cwiseMax(0.0);
  return unary(a, std::move(v), [](Tape& t, int self) -> Matrix {
    return (t.grad(self).array() * (t.value(self).array() > 0.0).cast<double>()).matrix();
  });
}

Var exp(const Var& a) {
  Matrix v = a.value().array().exp().matrix();
  return unary(a, std::move(v),
               [](Tape& t, int self) -> Matrix { return t.grad(self).cwiseProduct(t.value(self)); });
}

Var log(const Var& a) {
  Matrix v = a.value().array().log().matrix();
  const int ia = a.id();
  return unary(a, std::move(v),
               [ia](Tape& t, int self) -> Matrix { return t.grad(self).cwiseQuotient(t.value(ia)); });
}

Var softplus(const Var& a) {
  // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
  Matrix v = a.value().unaryExpr([](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  const int ia = a.id();
  return unary(a, std::move(v), [ia](Tape& t, int self) -> Matrix {
    const Matrix sig = t.value(ia).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    return t.grad(self).cwiseProduct(sig);
  });
}

Var square(const Var& a) {
  Matrix v = a.value().array().square().matrix();
  const int ia = a.id();
  return unary(a, std::move(v),
               [ia](Tape& t, int self) -> Matrix { return 2.0 * t.grad(self).cwiseProduct(t.value(ia)); });
}

Var sum(const Var& a) {
  const auto r = a.rows();
  const auto c = a.cols();
  return unary(a, Matrix::Constant(1, 1, a.value().sum()),
               [r, c](Tape& t, int self) -> Matrix { return Matrix::Constant(r, c, t.grad(self)(0, 0)); });
}

Var mean(const Var& a) {
  const auto n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  const auto c = a.cols();
  return unary(a, a.value().rowwise().sum(),
               [c](Tape& t, int self) -> Matrix { return t.grad(self).replicate(1, c); });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("ad: slice_cols out of range");
  }
  const auto r = a.rows();
  const auto c = a.cols();
  return unary(a, a.value().middleCols(start, count), [r, c, start, count](Tape& t, int self) -> Matrix {
    Matrix g = Matrix::Zero(r, c);
    g.middleCols(start, count) = t.grad(self);
    return g;
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("ad: slice_rows out of range");
  }
  const auto r = a.rows();
  const auto c = a.cols();
  return unary(a, a.value().middleRows(start, count), [r, c, start, count](Tape& t, int self) -> Matrix {
    Matrix g = Matrix::Zero(r, c);
    g.middleRows(start, count) = t.grad(self);
    return g;
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) {
    throw std::invalid_argument("ad: concat_cols of nothing");
  }
  Tape* t = parts.front().tape();
  const auto r = parts.front().rows();
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r || p.tape() != t) {
      throw std::invalid_argument("ad: concat_cols row mismatch");
    }
    total += p.cols();
  }
  Matrix v(r, total);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.cols();
  }
  return t->record(
      std::move(v),
      [ids, offsets](Tape& tape, int self) {
        const Matrix& g = tape.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          tape.accumulate(ids[i], g.middleCols(offsets[i], tape.value(ids[i]).cols()));
        }
      },
      parts);
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) {
    throw std::invalid_argument("ad: concat_rows of nothing");
  }
  Tape* t = parts.front().tape();
  const auto c = parts.front().cols();
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c || p.tape() != t) {
      throw std::invalid_argument("ad: concat_rows column mismatch");
    }
    total += p.rows();
  }
  Matrix v(total, c);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.rows();
  }
  return t->record(
      std::move(v),
      [ids, offsets](Tape& tape, int self) {
        const Matrix& g = tape.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          tape.accumulate(ids[i], g.middleRows(offsets[i], tape.value(ids[i]).rows()));
        }
      },
      parts);
}

Var gather_rows(const Var& a, std::span<const Eigen::Index> index) {
  const auto r = a.rows();
  const auto c = a.cols();
  Matrix v(static_cast<Eigen::Index>(index.size()), c);
  std::vector<Eigen::Index> idx(index.begin(), index.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= r) {
      throw std::out_of_range("ad: gather_rows index out of range");
    }
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  return unary(a, std::move(v), [idx, r, c](Tape& t, int self) -> Matrix {
    Matrix g = Matrix::Zero(r, c);
    const Matrix& go = t.grad(self);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      g.row(idx[i]) += go.row(static_cast<Eigen::Index>(i));
    }
    return g;
  });
}

Var repeat_rows(const Var& a, Eigen::Index times) {
  const auto r = a.rows();
  const auto c = a.cols();
  Matrix v(r * times, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    v.middleRows(i * times, times) = a.value().row(i).replicate(times, 1);
  }
  return unary(a, std::move(v), [r, c, times](Tape& t, int self) -> Matrix {
    Matrix g(r, c);
    const Matrix& go = t.grad(self);
    for (Eigen::Index i = 0; i < r; ++i) {
      g.row(i) = go.middleRows(i * times, times).colwise().sum();
    }
    return g;
  });
}

Var group_sum_rows(const Var& a, Eigen::Index group) {
  if (group <= 0 || a.rows() % group != 0) {
    throw std::invalid_argument("ad: group_sum_rows group size must divide rows");
  }
  const auto n = a.rows() / group;
  const auto c = a.cols();
  Matrix v(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    v.row(i) = a.value().middleRows(i * group, group).colwise().sum();
  }
  return unary(a, std::move(v), [n, c, group](Tape& t, int self) -> Matrix {
    Matrix g(n * group, c);
    const Matrix& go = t.grad(self);
    for (Eigen::Index i = 0; i < n; ++i) {
      g.middleRows(i * group, group) = go.row(i).replicate(group, 1);
    }
    return g;
  });
}

Var group_logsumexp(const Var& a, Eigen::Index group) {
  if (a.cols() != 1 || group <= 0 || a.rows() % group != 0) {
    throw std::invalid_argument("ad: group_logsumexp expects an (n x 1) input divisible by group");
  }
  const auto n = a.rows() / group;
  Matrix v(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto block = a.value().middleRows(i * group, group);
    const double m = block.maxCoeff();
    if (!std::isfinite(m)) {
      v(i, 0) = m;
      continue;
    }
    v(i, 0) = m + std::log((block.array() - m).exp().sum());
  }
  const int ia = a.id();
  return unary(a, std::move(v), [ia, n, group](Tape& t, int self) -> Matrix {
    const Matrix& x = t.value(ia);
    const Matrix& lse = t.value(self);
    const Matrix& go = t.grad(self);
    Matrix g(n * group, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      g.middleRows(i * group, group) =
          ((x.middleRows(i * group, group).array() - lse(i, 0)).exp() * go(i, 0)).matrix();
    }
    return g;
  });
}

namespace {

Eigen::Vector4d qmul(const Eigen::Vector4d& a, const Eigen::Vector4d& b) {
  return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
          a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
          a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
          a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

Eigen::Vector4d qconj(const Eigen::Vector4d& a) { return {a[0], -a[1], -a[2], -a[3]}; }

void require_cols(const Var& a, Eigen::Index c, const char* op) {
  if (a.cols() != c) {
    throw std::invalid_argument(std::string("ad: ") + op + " expects " + std::to_string(c) + " columns");
  }
}

}  // namespace

Var quat_mul(const Var& a, const Var& b) {
  require_cols(a, 4, "quat_mul");
  require_cols(b, 4, "quat_mul");
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("ad: quat_mul row mismatch");
  }
  const auto n = a.rows();
  Matrix v(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    v.row(i) = qmul(a.value().row(i).transpose(), b.value().row(i).transpose()).transpose();
  }
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->record(std::move(v),
                          [ia, ib, n](Tape& t, int self) {
                            const Matrix& g = t.grad(self);
                            Matrix ga(n, 4);
                            Matrix gb(n, 4);
                            for (Eigen::Index i = 0; i < n; ++i) {
                              const Eigen::Vector4d gi = g.row(i).transpose();
                              const Eigen::Vector4d ai = t.value(ia).row(i).transpose();
                              const Eigen::Vector4d bi = t.value(ib).row(i).transpose();
                              ga.row(i) = qmul(gi, qconj(bi)).transpose();
                              gb.row(i) = qmul(qconj(ai), gi).transpose();
                            }
                            t.accumulate(ia, ga);
                            t.accumulate(ib, gb);
                          },
                          {a, b});
}

Var quat_conj(const Var& q) {
  require_cols(q, 4, "quat_conj");
  Matrix v = q.value();
  v.rightCols(3) *= -1.0;
  return unary(q, std::move(v), [](Tape& t, int self) -> Matrix {
    Matrix g = t.grad(self);
    g.rightCols(3) *= -1.0;
    return g;
  });
}

Var quat_exp(const Var& rotvec) {
  require_cols(rotvec, 3, "quat_exp");
  const auto n = rotvec.rows();
  Matrix v(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d r = rotvec.value().row(i).transpose();
    const double th = r.norm();
    const double s = th < 1e-6 ? 0.5 - th * th / 48.0 : std::sin(0.5 * th) / th;
    v(i, 0) = std::cos(0.5 * th);
    v.block(i, 1, 1, 3) = (s * r).transpose();
  }
  const int ir = rotvec.id();
  return unary(rotvec, std::move(v), [ir, n](Tape& t, int self) -> Matrix {
    const Matrix& g = t.grad(self);
    Matrix out(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Vector3d r = t.value(ir).row(i).transpose();
      const double th = r.norm();
      double s = 0.0;
      double k = 0.0;  // (ds/dtheta) / theta
      if (th < 1e-4) {
        s = 0.5 - th * th / 48.0;
        k = -1.0 / 24.0 + th * th / 960.0;
      } else {
        s = std::sin(0.5 * th) / th;
        k = (0.5 * std::cos(0.5 * th) * th - std::sin(0.5 * th)) / (th * th * th);
      }
      const double gw = g(i, 0);
      const Eigen::Vector3d gv = g.block(i, 1, 1, 3).transpose();
      const Eigen::Vector3d gr = gw * (-0.5 * s) * r + s * gv + r * (k * r.dot(gv));
      out.row(i) = gr.transpose();
    }
    return out;
  });
}

Var quat_normalize(const Var& q) {
  require_cols(q, 4, "quat_normalize");
  const auto n = q.rows();
  Matrix v = q.value().rowwise().normalized();
  const int iq = q.id();
  return unary(q, std::move(v), [iq, n](Tape& t, int self) -> Matrix {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    Matrix out(n, 4);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double norm = t.value(iq).row(i).norm();
      out.row(i) = (g.row(i) - y.row(i) * y.row(i).dot(g.row(i))) / norm;
    }
    return out;
  });
}

Var quat_rotate(const Var& q, const Var& v) {
  require_cols(q, 4, "quat_rotate");
  require_cols(v, 3, "quat_rotate");
  if (q.rows() != v.rows()) {
    throw std::invalid_argument("ad: quat_rotate row mismatch");
  }
  const auto n = q.rows();
  Matrix out(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = q.value()(i, 0);
    const Eigen::Vector3d u = q.value().block(i, 1, 1, 3).transpose();
    const Eigen::Vector3d x = v.value().row(i).transpose();
    const Eigen::Vector3d y = x + 2.0 * w * u.cross(x) + 2.0 * u * u.dot(x) - 2.0 * x * u.squaredNorm();
    out.row(i) = y.transpose();
  }
  const int iq = q.id();
  const int iv = v.id();
  return q.tape()->record(std::move(out),
                          [iq, iv, n](Tape& t, int self) {
                            const Matrix& g = t.grad(self);
                            Matrix gq(n, 4);
                            Matrix gv(n, 3);
                            for (Eigen::Index i = 0; i < n; ++i) {
                              const double w = t.value(iq)(i, 0);
                              const Eigen::Vector3d u = t.value(iq).block(i, 1, 1, 3).transpose();
                              const Eigen::Vector3d x = t.value(iv).row(i).transpose();
                              const Eigen::Vector3d gi = g.row(i).transpose();
                              gq(i, 0) = 2.0 * gi.dot(u.cross(x));
                              const Eigen::Vector3d gu =
                                  2.0 * w * x.cross(gi) + 2.0 * (u.dot(x) * gi + gi.dot(u) * x) - 4.0 * gi.dot(x) * u;
                              gq.block(i, 1, 1, 3) = gu.transpose();
                              const Eigen::Vector3d gx =
                                  gi + 2.0 * w * gi.cross(u) + 2.0 * gi.dot(u) * u - 2.0 * u.squaredNorm() * gi;
                              gv.row(i) = gx.transpose();
                            }
                            t.accumulate(iq, gq);
                            t.accumulate(iv, gv);
                          },
                          {q, v});
}

Var quat_angle_sq(const Var& a, const Var& b) {
  require_cols(a, 4, "quat_angle_sq");
  require_cols(b, 4, "quat_angle_sq");
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("ad: quat_angle_sq row mismatch");
  }
  const auto n = a.rows();
  auto relative = [](const Eigen::Vector4d& qa, const Eigen::Vector4d& qb) {
    const double rw = qa.dot(qb);
    const Eigen::Vector3d av = qa.tail<3>();
    const Eigen::Vector3d bv = qb.tail<3>();
    const Eigen::Vector3d rv = qa[0] * bv - qb[0] * av - av.cross(bv);
    return std::pair{rw, rv};
  };
  Matrix v(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto [rw, rv] = relative(a.value().row(i).transpose(), b.value().row(i).transpose());
    const double th = 2.0 * std::atan2(rv.norm(), std::abs(rw));
    v(i, 0) = th * th;
  }
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->record(std::move(v),
                          [ia, ib, n, relative](Tape& t, int self) {
                            const Matrix& g = t.grad(self);
                            Matrix ga(n, 4);
                            Matrix gb(n, 4);
                            for (Eigen::Index i = 0; i < n; ++i) {
                              const Eigen::Vector4d qa = t.value(ia).row(i).transpose();
                              const Eigen::Vector4d qb = t.value(ib).row(i).transpose();
                              const auto [rw, rv] = relative(qa, qb);
                              const double nv = rv.norm();
                              const double aw = std::abs(rw);
                              const double den = nv * nv + rw * rw;
                              const double th = 2.0 * std::atan2(nv, aw);
                              const double th_over_n = nv < 1e-12 ? 2.0 / aw : th / nv;
                              const double sgn = rw >= 0.0 ? 1.0 : -1.0;
                              const double gi = g(i, 0);
                              const Eigen::Vector3d grv = gi * 2.0 * th_over_n * (2.0 * aw / den) * rv;
                              const double grw = gi * 2.0 * th * (-2.0 * nv * sgn / den);
                              const Eigen::Vector3d av = qa.tail<3>();
                              const Eigen::Vector3d bv = qb.tail<3>();
                              Eigen::Vector4d da = grw * qb;
                              Eigen::Vector4d db = grw * qa;
                              da[0] += grv.dot(bv);
                              da.tail<3>() += -qb[0] * grv - bv.cross(grv);
                              db[0] += -grv.dot(av);
                              db.tail<3>() += qa[0] * grv - grv.cross(av);
                              ga.row(i) = da.transpose();
                              gb.row(i) = db.transpose();
                            }
                            t.accumulate(ia, ga);
                            t.accumulate(ib, gb);
                          },
                          {a, b});
}

}  // namespace reorient::ad
