#include "reorient/filter.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace reorient::filter {

using ad::Tape;
using ad::Var;

Eigen::VectorXd FilterIO::to_vector() const {
  Eigen::VectorXd v(36);
  v << q, qdot, q_bar;
  return v;
}

Matrix state_row(const CubeState& s) {
  Matrix r(1, kStateDim);
  r << s.x.transpose(), s.R.w(), s.R.x(), s.R.y(), s.R.z(), s.v.transpose(), s.w.transpose();
  return r;
}

CubeState state_from_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  CubeState s;
  s.x = row.segment<3>(0).transpose();
  s.R = Rotation(row[3], row[4], row[5], row[6]);
  s.v = row.segment<3>(7).transpose();
  s.w = row.segment<3>(10).transpose();
  return s;
}

Particle ParticleSet::particle(Eigen::Index i) const {
  Particle p;
  p.state.x = x.row(i).transpose();
  p.state.R = Rotation(q(i, 0), q(i, 1), q(i, 2), q(i, 3));
  p.state.v = v.row(i).transpose();
  p.state.w = w.row(i).transpose();
  p.log_weight = log_w[i];
  return p;
}

void ParticleSet::set_particle(Eigen::Index i, const Particle& p) {
  x.row(i) = p.state.x.transpose();
  q.row(i) = p.state.R.coeffs_wxyz().transpose();
  v.row(i) = p.state.v.transpose();
  w.row(i) = p.state.w.transpose();
  log_w[i] = p.log_weight;
}

ParticleSet ParticleSet::uniform(std::span<const CubeState> states) {
  const auto n = static_cast<Eigen::Index>(states.size());
  if (n == 0) {
    throw std::invalid_argument("filter: empty particle set");
  }
  ParticleSet ps;
  ps.x.resize(n, 3);
  ps.q.resize(n, 4);
  ps.v.resize(n, 3);
  ps.w.resize(n, 3);
  ps.log_w = Eigen::VectorXd::Constant(n, -std::log(static_cast<double>(n)));
  for (Eigen::Index i = 0; i < n; ++i) {
    ps.set_particle(i, {states[static_cast<std::size_t>(i)], ps.log_w[i]});
  }
  return ps;
}

ParticleSet ParticleSet::replicate(const CubeState& s, Eigen::Index n) {
  std::vector<CubeState> states(static_cast<std::size_t>(n), s);
  return uniform(states);
}

void FilterLossConfig::validate() const {
  if (!(c_x >= 0.0 && c_R >= 0.0 && c_v >= 0.0 && c_w >= 0.0)) {
    throw std::invalid_argument("filter: loss coefficients must be non-negative");
  }
}

double filter_loss(std::span<const CubeState> pred, std::span<const CubeState> truth, const FilterLossConfig& cfg) {
  cfg.validate();
  if (pred.size() != truth.size()) {
    throw std::invalid_argument("filter_loss: sequence length mismatch");
  }
  if (pred.empty()) {
    throw std::invalid_argument("filter_loss: empty sequence");
  }
  double total = 0.0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    const double th = distance(pred[t].R, truth[t].R);
    total += cfg.c_x * (pred[t].x - truth[t].x).squaredNorm() + cfg.c_R * th * th +
             cfg.c_v * (pred[t].v - truth[t].v).squaredNorm() + cfg.c_w * (pred[t].w - truth[t].w).squaredNorm();
  }
  return total / static_cast<double>(pred.size());
}

FilterModels::FilterModels(FilterModelConfig config, Rng& rng) : config_(std::move(config)) {
  std::vector<int> sizes{kFeatureDim};
  sizes.insert(sizes.end(), config_.hidden.begin(), config_.hidden.end());
  std::vector<int> f_sizes = sizes;
  f_sizes.push_back(kProposalOut);
  std::vector<int> g_sizes = sizes;
  g_sizes.push_back(1);
  proposal_ = nn::Mlp(f_sizes, config_.activation, rng, 0.1);
  update_ = nn::Mlp(g_sizes, config_.activation, rng, 0.1);
}

std::vector<ad::Parameter*> FilterModels::parameters() {
  auto p = proposal_.parameters();
  auto u = update_.parameters();
  p.insert(p.end(), u.begin(), u.end());
  return p;
}

void FilterModels::zero_grad() {
  proposal_.zero_grad();
  update_.zero_grad();
}

Checkpoint models_checkpoint(const FilterModels& m) {
  Checkpoint c;
  c.kind = "filter";
  const auto& cfg = m.config();
  c.arrays["proposal"] = m.proposal().flatten();
  c.arrays["update"] = m.update().flatten();
  c.shapes["proposal_sizes"] = m.proposal().sizes();
  c.shapes["update_sizes"] = m.update().sizes();
  c.shapes["hidden"] = cfg.hidden;
  c.arrays["config"] = {cfg.dt,           cfg.scale_x,       cfg.scale_v,       cfg.scale_w,
                        cfg.scale_r,      cfg.log_scale_min, cfg.log_scale_max, cfg.max_log_increment};
  c.metadata["activation"] = cfg.activation == nn::Activation::kRelu ? "relu" : "tanh";
  return c;
}

FilterModels models_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "filter") {
    throw CheckpointError("expected a filter checkpoint, got '" + c.kind + "'");
  }
  FilterModelConfig cfg;
  cfg.hidden = c.shape("hidden");
  cfg.activation = c.meta("activation") == "relu" ? nn::Activation::kRelu : nn::Activation::kTanh;
  const auto& a = c.array("config");
  if (a.size() != 8) {
    throw CheckpointError("filter checkpoint: bad config array");
  }
  cfg.dt = a[0];
  cfg.scale_x = a[1];
  cfg.scale_v = a[2];
  cfg.scale_w = a[3];
  cfg.scale_r = a[4];
  cfg.log_scale_min = a[5];
  cfg.log_scale_max = a[6];
  cfg.max_log_increment = a[7];
  Rng rng(0);
  FilterModels m(cfg, rng);
  if (m.proposal().sizes() != c.shape("proposal_sizes") || m.update().sizes() != c.shape("update_sizes")) {
    throw CheckpointError("filter checkpoint: network shape mismatch");
  }
  m.proposal().unflatten(c.array("proposal"));
  m.update().unflatten(c.array("update"));
  return m;
}

ParticleVars to_vars(Tape& tape, const ParticleSet& ps) {
  ParticleVars pv;
  pv.x = tape.constant(ps.x);
  pv.q = tape.constant(ps.q);
  pv.v = tape.constant(ps.v);
  pv.w = tape.constant(ps.w);
  pv.log_w = tape.constant(ps.log_w);
  pv.n = ps.size();
  pv.groups = 1;
  return pv;
}

ParticleSet from_vars(const ParticleVars& pv) {
  ParticleSet ps;
  ps.x = pv.x.value();
  ps.q = pv.q.value();
  ps.v = pv.v.value();
  ps.w = pv.w.value();
  ps.log_w = pv.log_w.value().col(0);
  return ps;
}

Matrix io_rows(std::span<const FilterIO> io) {
  Matrix m(static_cast<Eigen::Index>(io.size()), 36);
  for (std::size_t i = 0; i < io.size(); ++i) {
    m.row(static_cast<Eigen::Index>(i)) = io[i].to_vector().transpose();
  }
  return m;
}

namespace {

// Feature scales: position ~2 cm, velocity ~0.1 m/s, fingertips ~5 cm.
constexpr double kTipScale = 1.0 / 0.05;
constexpr double kPosScale = 1.0 / 0.02;
constexpr double kVelScale = 1.0 / 0.1;
constexpr double kJointVelScale = 0.5;
constexpr double kCtrlErrScale = 5.0;

Matrix per_row(const Matrix& group_rows, Eigen::Index n) {
  Matrix out(group_rows.rows() * n, group_rows.cols());
  for (Eigen::Index g = 0; g < group_rows.rows(); ++g) {
    out.middleRows(g * n, n).rowwise() = group_rows.row(g);
  }
  return out;
}

Var bounded(const Var& raw, double lo, double hi) {
  return add_scalar(scale(add_scalar(ad::tanh(raw), 1.0), 0.5 * (hi - lo)), lo);
}

}  // namespace

Var features(Tape& tape, const ParticleVars& p, const Matrix& io) {
  if (io.rows() != p.groups || io.cols() != 36) {
    throw std::invalid_argument("filter: io rows must match the particle groups");
  }
  const env::PhysicsParams physics;
  Matrix tips(p.groups, 12);
  for (Eigen::Index g = 0; g < p.groups; ++g) {
    const env::Joints q = io.row(g).segment<12>(0).transpose();
    const auto t = env::fingertip_positions(physics, q);
    for (int f = 0; f < env::kFingers; ++f) {
      tips.block<1, 3>(g, 3 * f) = t[static_cast<std::size_t>(f)].transpose();
    }
  }
  const Matrix tips_rows = per_row(tips, p.n);
  Matrix proprio(p.groups, 36);
  proprio.leftCols(12) = io.leftCols(12);
  proprio.middleCols(12, 12) = kJointVelScale * io.middleCols(12, 12);
  proprio.rightCols(12) = kCtrlErrScale * (io.rightCols(12) - io.leftCols(12));

  const Var q_inv = ad::quat_conj(p.q);
  std::vector<Var> parts;
  for (int f = 0; f < env::kFingers; ++f) {
    const Var rel = sub(tape.constant(tips_rows.middleCols(3 * f, 3)), p.x);
    parts.push_back(scale(ad::quat_rotate(q_inv, rel), kTipScale));
  }
  const Eigen::Index rows = p.groups * p.n;
  for (int i = 0; i < 3; ++i) {
    Matrix e = Matrix::Zero(rows, 3);
    e.col(i).setOnes();
    parts.push_back(ad::quat_rotate(p.q, tape.constant(std::move(e))));
  }
  parts.push_back(scale(p.x, kPosScale));
  parts.push_back(scale(p.v, kVelScale));
  parts.push_back(p.w);
  parts.push_back(tape.constant(per_row(proprio, p.n)));
  return ad::concat_cols(parts);
}

ParticleVars propagate(Tape& tape, FilterModels& models, const ParticleVars& p, const Matrix& io,
                       const Matrix& noise) {
  const Eigen::Index rows = p.groups * p.n;
  if (noise.rows() != rows || noise.cols() != kNoiseDim) {
    throw std::invalid_argument("filter: noise must have one row of 12 draws per particle");
  }
  const auto& cfg = models.config();
  const Var out = models.proposal().forward(tape, features(tape, p, io));
  const Var eps = tape.constant(noise);
  auto increment = [&](int k, double unit) {
    const Var mean = ad::slice_cols(out, 3 * k, 3);
    const Var log_scale = bounded(ad::slice_cols(out, 12 + 3 * k, 3), cfg.log_scale_min, cfg.log_scale_max);
    return scale(add(mean, mul(ad::exp(log_scale), ad::slice_cols(eps, 3 * k, 3))), unit);
  };
  ParticleVars next = p;
  next.x = add(add(p.x, scale(p.v, cfg.dt)), increment(0, cfg.scale_x));
  next.v = add(p.v, increment(1, cfg.scale_v));
  next.w = add(p.w, increment(2, cfg.scale_w));
  const Var rotvec = add(scale(next.w, cfg.dt), increment(3, cfg.scale_r));
  next.q = ad::quat_normalize(ad::quat_mul(ad::quat_exp(rotvec), p.q));
  return next;
}

ParticleVars filter_step(Tape& tape, FilterModels& models, const ParticleVars& p, const Matrix& io,
                         const Matrix& noise, Rng& rng, const StepOptions& options, StepStats* stats) {
  ParticleVars next = propagate(tape, models, p, io, noise);
  if (options.weight_update) {
    const double m = models.config().max_log_increment;
    const Var g = models.update().forward(tape, features(tape, next, io));
    next.log_w = add(p.log_w, scale(ad::tanh(scale(g, 1.0 / m)), m));
  }
  const Var lse = ad::group_logsumexp(next.log_w, p.n);
  for (Eigen::Index g = 0; g < p.groups; ++g) {
    if (!std::isfinite(lse.value()(g, 0))) {
      throw FilterCollapsed("filter: all particle weights vanished");
    }
  }
  next.log_w = sub(next.log_w, ad::repeat_rows(lse, p.n));

  if (stats) {
    stats->resampled.assign(static_cast<std::size_t>(p.groups), false);
  }
  if (!options.resample) {
    return next;
  }
  const Eigen::Index rows = p.groups * p.n;
  std::vector<Eigen::Index> index(static_cast<std::size_t>(rows));
  std::iota(index.begin(), index.end(), Eigen::Index{0});
  Matrix keep = Matrix::Ones(rows, 1);
  Matrix reset = Matrix::Zero(rows, 1);
  bool any = false;
  const Matrix& lw = next.log_w.value();
  for (Eigen::Index g = 0; g < p.groups; ++g) {
    const Eigen::VectorXd weights = lw.middleRows(g * p.n, p.n).col(0).array().exp();
    if (effective_sample_size(weights) >= 0.5 * static_cast<double>(p.n)) {
      continue;
    }
    any = true;
    const auto anc = systematic_resample(weights, rng);
    for (Eigen::Index i = 0; i < p.n; ++i) {
      index[static_cast<std::size_t>(g * p.n + i)] = g * p.n + anc[static_cast<std::size_t>(i)];
    }
    keep.middleRows(g * p.n, p.n).setZero();
    reset.middleRows(g * p.n, p.n).setConstant(-std::log(static_cast<double>(p.n)));
    if (stats) {
      stats->resampled[static_cast<std::size_t>(g)] = true;
    }
  }
  if (!any) {
    return next;
  }
  ParticleVars out = next;
  out.x = ad::gather_rows(next.x, index);
  out.q = ad::gather_rows(next.q, index);
  out.v = ad::gather_rows(next.v, index);
  out.w = ad::gather_rows(next.w, index);
  out.log_w = add(mul(next.log_w, tape.constant(std::move(keep))), tape.constant(std::move(reset)));
  return out;
}

ParticleSet filter_step(const ParticleSet& ps, const FilterIO& io, FilterModels& models, Rng& rng) {
  std::normal_distribution<double> normal;
  Matrix noise(ps.size(), kNoiseDim);
  for (Eigen::Index i = 0; i < noise.size(); ++i) {
    noise.data()[i] = normal(rng);
  }
  Tape tape;
  const ParticleVars p = to_vars(tape, ps);
  const std::array<FilterIO, 1> ios{io};
  return from_vars(filter_step(tape, models, p, io_rows(ios), noise, rng));
}

EstimateVars estimate(const ParticleVars& p) {
  const Var wts = ad::exp(p.log_w);
  EstimateVars e;
  e.x = ad::group_sum_rows(mul(p.x, wts), p.n);
  e.v = ad::group_sum_rows(mul(p.v, wts), p.n);
  e.w = ad::group_sum_rows(mul(p.w, wts), p.n);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(p.groups));
  for (Eigen::Index g = 0; g < p.groups; ++g) {
    const Eigen::VectorXd w = wts.value().middleRows(g * p.n, p.n).col(0);
    idx[static_cast<std::size_t>(g)] = g * p.n + rotation_medoid(p.q.value().middleRows(g * p.n, p.n), w);
  }
  e.q = ad::gather_rows(p.q, idx);
  return e;
}

CubeState estimate(const ParticleSet& ps) {
  const Eigen::VectorXd w = ps.log_w.array().exp();
  CubeState s;
  s.x = (ps.x.transpose() * w);
  s.v = (ps.v.transpose() * w);
  s.w = (ps.w.transpose() * w);
  const Eigen::Index j = rotation_medoid(ps.q, w);
  s.R = Rotation(ps.q(j, 0), ps.q(j, 1), ps.q(j, 2), ps.q(j, 3));
  return s;
}

Var estimate_loss(Tape& tape, const EstimateVars& e, const Matrix& truth, const FilterLossConfig& cfg) {
  if (truth.cols() != kStateDim || truth.rows() != e.x.rows()) {
    throw std::invalid_argument("filter: truth rows must match the estimates");
  }
  const Var dx = sum(ad::square(sub(e.x, tape.constant(truth.leftCols(3)))));
  const Var dr = sum(ad::quat_angle_sq(e.q, tape.constant(truth.middleCols(3, 4))));
  const Var dv = sum(ad::square(sub(e.v, tape.constant(truth.middleCols(7, 3)))));
  const Var dw = sum(ad::square(sub(e.w, tape.constant(truth.middleCols(10, 3)))));
  return add(add(scale(dx, cfg.c_x), scale(dr, cfg.c_R)), add(scale(dv, cfg.c_v), scale(dw, cfg.c_w)));
}

void normalize_log_weights(Eigen::Ref<Eigen::VectorXd> log_w) {
  if (log_w.size() == 0 || log_w.hasNaN()) {
    throw FilterCollapsed("filter: invalid log-weights");
  }
  const double m = log_w.maxCoeff();
  if (!std::isfinite(m)) {
    throw FilterCollapsed("filter: all particle weights vanished");
  }
  const double lse = m + std::log((log_w.array() - m).exp().sum());
  log_w.array() -= lse;
}

double effective_sample_size(const Eigen::Ref<const Eigen::VectorXd>& weights) {
  const double s = weights.sum();
  return s * s / weights.squaredNorm();
}

std::vector<Eigen::Index> systematic_resample(const Eigen::Ref<const Eigen::VectorXd>& weights, Rng& rng) {
  const Eigen::Index n = weights.size();
  const double total = weights.sum();
  const double step = 1.0 / static_cast<double>(n);
  std::uniform_real_distribution<double> u(0.0, step);
  double point = u(rng);
  std::vector<Eigen::Index> out(static_cast<std::size_t>(n));
  double cum = weights[0] / total;
  Eigen::Index j = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    while (cum < point && j < n - 1) {
      ++j;
      cum += weights[j] / total;
    }
    out[static_cast<std::size_t>(i)] = j;
    point += step;
  }
  return out;
}

Eigen::Index rotation_medoid(const Eigen::Ref<const Matrix>& q, const Eigen::Ref<const Eigen::VectorXd>& weights) {
  const Eigen::Index n = q.rows();
  const Matrix dots = (q * q.transpose()).cwiseAbs().cwiseMin(1.0);
  const Matrix ang = dots.unaryExpr([](double d) { return 2.0 * std::acos(d); });
  const Eigen::VectorXd cost = ang.cwiseProduct(ang).transpose() * weights;
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < n; ++j) {
    if (cost[j] < cost[best]) {
      best = j;
    }
  }
  return best;
}

bool generic_filter_step(Matrix& states, Eigen::VectorXd& log_w,
                         const std::function<Matrix(const Matrix&, Rng&)>& propose,
                         const std::function<Eigen::VectorXd(const Matrix&)>& log_increment, Rng& rng) {
  states = propose(states, rng);
  log_w += log_increment(states);
  normalize_log_weights(log_w);
  const Eigen::VectorXd w = log_w.array().exp();
  if (effective_sample_size(w) >= 0.5 * static_cast<double>(w.size())) {
    return false;
  }
  const auto anc = systematic_resample(w, rng);
  Matrix next(states.rows(), states.cols());
  for (std::size_t i = 0; i < anc.size(); ++i) {
    next.row(static_cast<Eigen::Index>(i)) = states.row(anc[i]);
  }
  states = std::move(next);
  log_w.setConstant(-std::log(static_cast<double>(w.size())));
  return true;
}

ParticleSet sample_particles(const CubeState& s, const InitialSpread& spread, Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> normal;
  auto jitter = [&](const Eigen::Vector3d& c, double sigma) {
    return Eigen::Vector3d(c + sigma * Eigen::Vector3d(normal(rng), normal(rng), normal(rng)));
  };
  std::vector<CubeState> states(static_cast<std::size_t>(n));
  for (auto& p : states) {
    p.x = jitter(s.x, spread.x);
    p.R = spread.rot > 0.0 ? perturb_rotation(s.R, spread.rot, rng) : s.R;
    p.v = jitter(s.v, spread.v);
    p.w = jitter(s.w, spread.w);
  }
  return ParticleSet::uniform(states);
}

}  // namespace reorient::filter
