#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "reorient/filter.hpp"

namespace reorient::filter {

using ad::Tape;
using ad::Var;

namespace {

Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = normal(rng);
  }
  return m;
}

struct Pair {
  const Sequence* seq;
  Eigen::Index t;  // predicts states.row(t + 1) from states.row(t) and io.row(t)
};

std::vector<Pair> pairs_of(const std::vector<const Sequence*>& seqs) {
  std::vector<Pair> out;
  for (const auto* s : seqs) {
    for (Eigen::Index t = 0; t < s->length(); ++t) {
      out.push_back({s, t});
    }
  }
  return out;
}

ParticleSet particles_from_rows(const Matrix& rows) {
  ParticleSet ps;
  ps.x = rows.leftCols(3);
  ps.q = rows.middleCols(3, 4);
  ps.v = rows.middleCols(7, 3);
  ps.w = rows.middleCols(10, 3);
  ps.log_w = Eigen::VectorXd::Zero(rows.rows());
  return ps;
}

/// Summed one-step loss over a batch of pairs on the tape (N = 1).
Var one_step_batch(Tape& tape, FilterModels& models, std::span<const Pair> batch, const FilterLossConfig& loss,
                   Rng* noise_rng) {
  const auto b = static_cast<Eigen::Index>(batch.size());
  Matrix from(b, kStateDim);
  Matrix to(b, kStateDim);
  Matrix io(b, 36);
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto& p = batch[static_cast<std::size_t>(i)];
    from.row(i) = p.seq->states.row(p.t);
    to.row(i) = p.seq->states.row(p.t + 1);
    io.row(i) = p.seq->io.row(p.t);
  }
  ParticleVars pv = to_vars(tape, particles_from_rows(from));
  pv.n = 1;
  pv.groups = b;
  const Matrix noise = noise_rng ? gaussian(*noise_rng, b, kNoiseDim) : Matrix::Zero(b, kNoiseDim);
  const ParticleVars next = propagate(tape, models, pv, io, noise);
  return estimate_loss(tape, estimate(next), to, loss);
}

void split(const Dataset& data, double fraction, Rng& rng, std::vector<const Sequence*>& train,
           std::vector<const Sequence*>& val) {
  std::vector<const Sequence*> all;
  for (const auto& s : data.sequences) {
    all.push_back(&s);
  }
  std::shuffle(all.begin(), all.end(), rng);
  auto n_val = static_cast<std::size_t>(std::round(fraction * static_cast<double>(all.size())));
  if (fraction > 0.0 && all.size() >= 2) {
    n_val = std::clamp<std::size_t>(n_val, 1, all.size() - 1);
  } else {
    n_val = 0;
  }
  val.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_val));
  train.assign(all.begin() + static_cast<std::ptrdiff_t>(n_val), all.end());
}

bool grads_finite(const std::vector<ad::Parameter*>& params) {
  return std::all_of(params.begin(), params.end(), [](const ad::Parameter* p) { return p->grad.allFinite(); });
}

}  // namespace

double one_step_loss(const std::vector<const Sequence*>& seqs, FilterModels& models, const FilterLossConfig& loss,
                     Rng* noise_rng) {
  const auto pairs = pairs_of(seqs);
  if (pairs.empty()) {
    throw std::invalid_argument("one_step_loss: no data");
  }
  double total = 0.0;
  constexpr std::size_t kChunk = 1024;
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, pairs.size() - start);
    Tape tape;
    total += one_step_batch(tape, models, std::span<const Pair>(pairs).subspan(start, len), loss, noise_rng).scalar();
  }
  return total / static_cast<double>(pairs.size());
}

double identity_one_step_loss(const std::vector<const Sequence*>& seqs, const FilterLossConfig& loss) {
  double total = 0.0;
  std::int64_t n = 0;
  for (const auto* s : seqs) {
    for (Eigen::Index t = 0; t < s->length(); ++t) {
      const std::array<CubeState, 1> pred{state_from_row(s->states.row(t))};
      const std::array<CubeState, 1> truth{state_from_row(s->states.row(t + 1))};
      total += filter_loss(pred, truth, loss);
      ++n;
    }
  }
  if (n == 0) {
    throw std::invalid_argument("identity_one_step_loss: no data");
  }
  return total / static_cast<double>(n);
}

Stage1Result train_stage1(const Dataset& data, FilterModels& models, const Stage1Config& cfg, Rng& rng) {
  cfg.loss.validate();
  std::vector<const Sequence*> train;
  std::vector<const Sequence*> val;
  split(data, cfg.validation_fraction, rng, train, val);
  if (train.empty()) {
    throw FilterTrainingError("stage 1: not enough sequences");
  }
  if (val.empty()) {
    val = train;
  }
  auto pairs = pairs_of(train);
  nn::Adam opt(nn::AdamConfig{.learning_rate = cfg.learning_rate});
  const auto params = models.proposal_parameters();
  const std::uint64_t val_seed = rng();

  Stage1Result result;
  result.identity_val_loss = identity_one_step_loss(val, cfg.loss);
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(pairs.begin(), pairs.end(), rng);
    double sum = 0.0;
    for (std::size_t start = 0; start < pairs.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), pairs.size() - start);
      models.zero_grad();
      Tape tape;
      const Var l = one_step_batch(tape, models, std::span<const Pair>(pairs).subspan(start, len), cfg.loss,
                                   cfg.sample_noise ? &rng : nullptr);
      const Var mean_loss = scale(l, 1.0 / static_cast<double>(len));
      if (!std::isfinite(mean_loss.scalar())) {
        throw FilterTrainingError("stage 1: loss diverged at epoch " + std::to_string(epoch));
      }
      tape.backward(mean_loss);
      opt.step(params);
      sum += l.scalar();
    }
    result.train_loss.push_back(sum / static_cast<double>(pairs.size()));
    Rng val_rng(val_seed);
    result.val_loss.push_back(one_step_loss(val, models, cfg.loss, cfg.sample_noise ? &val_rng : nullptr));
    if (!std::isfinite(result.val_loss.back())) {
      throw FilterTrainingError("stage 1: validation loss diverged");
    }
    result.epochs = epoch + 1;
    const auto e = result.val_loss.size() - 1;
    if (e >= static_cast<std::size_t>(cfg.patience)) {
      const double before = result.val_loss[e - static_cast<std::size_t>(cfg.patience)];
      if (before - result.val_loss[e] < cfg.min_improvement * before) {
        result.converged = true;
        break;
      }
    }
  }
  return result;
}

InitialSpread data_spread(const Dataset& data) {
  double sx = 0.0;
  double sr = 0.0;
  double sv = 0.0;
  double sw = 0.0;
  std::int64_t n = 0;
  for (const auto& s : data.sequences) {
    const CubeState s0 = state_from_row(s.states.row(0));
    for (Eigen::Index t = 1; t < s.states.rows(); ++t) {
      const CubeState st = state_from_row(s.states.row(t));
      sx += (st.x - s0.x).squaredNorm() / 3.0;
      const double th = distance(st.R, s0.R);
      sr += th * th;
      sv += (st.v - s0.v).squaredNorm() / 3.0;
      sw += (st.w - s0.w).squaredNorm() / 3.0;
      ++n;
    }
  }
  if (n == 0) {
    return {};
  }
  const auto d = static_cast<double>(n);
  return {std::sqrt(sx / d), std::sqrt(sr / d), std::sqrt(sv / d), std::sqrt(sw / d)};
}

Var unroll_loss(Tape& tape, FilterModels& models, std::span<const Sequence* const> seqs, int steps,
                const UnrollOptions& opt, Rng& rng) {
  if (seqs.empty() || steps <= 0 || opt.particles <= 0) {
    throw std::invalid_argument("unroll_loss: empty unroll");
  }
  opt.loss.validate();
  const auto groups = static_cast<Eigen::Index>(seqs.size());
  const Eigen::Index n = opt.particles;
  for (const auto* s : seqs) {
    steps = std::min<int>(steps, static_cast<int>(s->length()));
  }
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 1.0);
  ParticleSet all;
  all.x.resize(groups * n, 3);
  all.q.resize(groups * n, 4);
  all.v.resize(groups * n, 3);
  all.w.resize(groups * n, 3);
  all.log_w = Eigen::VectorXd::Constant(groups * n, -std::log(static_cast<double>(n)));
  for (Eigen::Index g = 0; g < groups; ++g) {
    CubeState s0 = state_from_row(seqs[static_cast<std::size_t>(g)]->states.row(0));
    if (opt.initial_bias) {
      s0.x += opt.bias_x * Eigen::Vector3d(unit(rng), unit(rng), unit(rng));
      Eigen::Vector3d axis(unit(rng), unit(rng), unit(rng));
      axis = axis.norm() > 1e-9 ? axis.normalized() : Eigen::Vector3d::UnitX();
      s0.R = compose(s0.R, Rotation::from_axis_angle(axis, opt.bias_rot * angle(rng)));
    }
    const ParticleSet ps = sample_particles(s0, opt.spread, n, rng);
    all.x.middleRows(g * n, n) = ps.x;
    all.q.middleRows(g * n, n) = ps.q;
    all.v.middleRows(g * n, n) = ps.v;
    all.w.middleRows(g * n, n) = ps.w;
  }
  ParticleVars p = to_vars(tape, all);
  p.n = n;
  p.groups = groups;
  Var total;
  StepOptions step_opt;
  step_opt.resample = opt.resample;
  for (int t = 0; t < steps; ++t) {
    Matrix io(groups, 36);
    Matrix truth(groups, kStateDim);
    for (Eigen::Index g = 0; g < groups; ++g) {
      io.row(g) = seqs[static_cast<std::size_t>(g)]->io.row(t);
      truth.row(g) = seqs[static_cast<std::size_t>(g)]->states.row(t + 1);
    }
    p = filter_step(tape, models, p, io, gaussian(rng, groups * n, kNoiseDim), rng, step_opt);
    const Var l = estimate_loss(tape, estimate(p), truth, opt.loss);
    total = total.valid() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(steps * groups));
}

Stage2Result train_stage2(const Dataset& data, FilterModels& models, const Stage2Config& cfg, Rng& rng) {
  if (data.sequences.empty()) {
    throw FilterTrainingError("stage 2: empty dataset");
  }
  UnrollOptions opt;
  opt.particles = cfg.particles;
  opt.spread = cfg.spread ? *cfg.spread : data_spread(data);
  opt.bias_x = cfg.bias_x;
  opt.bias_rot = cfg.bias_rot;
  opt.loss = cfg.loss;
  nn::Adam adam(nn::AdamConfig{.learning_rate = cfg.learning_rate, .max_grad_norm = cfg.max_grad_norm});
  const auto params = models.parameters();

  std::vector<const Sequence*> order;
  std::vector<const Sequence*> val;
  if (cfg.validation_fraction > 0.0) {
    split(data, cfg.validation_fraction, rng, order, val);
  } else {
    for (const auto& s : data.sequences) {
      order.push_back(&s);
    }
  }
  Stage2Result result;
  std::vector<double> best_f;
  std::vector<double> best_g;
  auto validate = [&](int epoch) {
    if (val.empty()) {
      return;
    }
    const double l = sequence_loss(val, models, opt, cfg.validation_seed);
    result.val_loss.push_back(l);
    if (best_f.empty() || l < *std::min_element(result.val_loss.begin(), result.val_loss.end() - 1)) {
      best_f = models.proposal().flatten();
      best_g = models.update().flatten();
      result.best_epoch = epoch;
    }
  };
  validate(-1);

  std::int64_t batches = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_sequences)) {
      if (cfg.max_batches > 0 && batches >= cfg.max_batches) {
        break;
      }
      const std::size_t len =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_sequences), order.size() - start);
      const std::span<const Sequence* const> batch(order.data() + start, len);
      int steps = cfg.truncate > 0 ? cfg.truncate : std::numeric_limits<int>::max();
      while (true) {
        models.zero_grad();
        Tape tape;
        const Var loss = unroll_loss(tape, models, batch, steps, opt, rng);
        bool ok = std::isfinite(loss.scalar());
        if (ok) {
          tape.backward(loss);
          ok = grads_finite(params);
        }
        if (ok) {
          adam.step(params);
          result.batch_loss.push_back(loss.scalar());
          break;
        }
        const int used = std::min<int>(steps, static_cast<int>(batch.front()->length()));
        std::cerr << "filter stage 2: non-finite gradient over " << used << " steps, truncating\n";
        ++result.truncated_batches;
        if (used <= 1) {
          models.zero_grad();
          break;
        }
        steps = used / 2;
      }
      ++batches;
    }
    validate(epoch);
    if (cfg.max_batches > 0 && batches >= cfg.max_batches) {
      break;
    }
  }
  if (!best_f.empty()) {
    models.proposal().unflatten(best_f);
    models.update().unflatten(best_g);
  }
  return result;
}

double sequence_loss(const std::vector<const Sequence*>& seqs, FilterModels& models, const UnrollOptions& opt,
                     std::uint64_t seed) {
  if (seqs.empty()) {
    throw std::invalid_argument("sequence_loss: no data");
  }
  Rng rng(seed);
  double total = 0.0;
  constexpr std::size_t kBatch = 8;
  for (std::size_t start = 0; start < seqs.size(); start += kBatch) {
    const std::size_t len = std::min(kBatch, seqs.size() - start);
    Tape tape;
    const Var l = unroll_loss(tape, models, std::span<const Sequence* const>(seqs.data() + start, len),
                              std::numeric_limits<int>::max(), opt, rng);
    total += l.scalar() * static_cast<double>(len);
  }
  return total / static_cast<double>(seqs.size());
}

EstimationError evaluate_filter(const std::vector<const Sequence*>& seqs, const FilterModels& models, int particles,
                                std::uint64_t seed) {
  auto shared = std::make_shared<const FilterModels>(models);
  ParticleFilterEstimator est(shared, EstimatorConfig{.particles = particles});
  Rng rng(seed);
  EstimationError e;
  std::int64_t n = 0;
  for (const auto* s : seqs) {
    est.reset(state_from_row(s->states.row(0)), rng);
    for (Eigen::Index t = 0; t < s->length(); ++t) {
      env::SensorSample sample;
      sample.q = s->io.row(t).segment<12>(0).transpose();
      sample.qdot = s->io.row(t).segment<12>(12).transpose();
      sample.q_bar = s->io.row(t).segment<12>(24).transpose();
      const CubeState hat = est.update(std::span<const env::SensorSample>(&sample, 1), rng);
      const CubeState truth = state_from_row(s->states.row(t + 1));
      const Eigen::Vector3d d = (hat.x - truth.x).cwiseAbs();
      e.per_axis += d;
      e.position += d.norm();
      e.rotation += distance(hat.R, truth.R);
      ++n;
    }
  }
  if (n > 0) {
    e.per_axis /= static_cast<double>(n);
    e.position /= static_cast<double>(n);
    e.rotation /= static_cast<double>(n);
  }
  return e;
}

std::int64_t InloopSchedule::target() const {
  return static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(offline) + 1e-9));
}

std::int64_t InloopSchedule::next_batch() const {
  return std::max<std::int64_t>(0, std::min(per_iteration, target() - collected));
}

int InloopSchedule::iterations() const {
  if (per_iteration <= 0) {
    throw std::invalid_argument("InloopSchedule: per_iteration must be positive");
  }
  const std::int64_t left = std::max<std::int64_t>(0, target() - collected);
  return static_cast<int>((left + per_iteration - 1) / per_iteration);
}

InloopResult train_inloop(const policy::PolicyFn& policy, FilterModels& models, Dataset& data,
                          const InloopConfig& cfg, const std::vector<const Sequence*>& eval_suite, std::uint64_t seed,
                          const std::function<void(const InloopIteration&)>& on_iteration) {
  InloopSchedule schedule{data.samples(false), cfg.per_iteration, cfg.ratio, data.samples(true)};
  if (schedule.offline == 0) {
    throw FilterTrainingError("in-loop training needs offline data");
  }
  InloopResult result;
  const std::uint64_t eval_seed = seed ^ 0x5bd1e995ULL;
  result.initial_eval = evaluate_filter(eval_suite, models, cfg.inference_particles, eval_seed);
  Rng rng(seed);
  CollectConfig collect = cfg.collect;
  collect.inloop = true;
  EstimatorConfig est_cfg;
  est_cfg.particles = cfg.inference_particles;
  for (int iter = 0; !schedule.done(); ++iter) {
    const std::int64_t want = schedule.next_batch();
    auto snapshot = std::make_shared<const FilterModels>(models);
    CollectStats stats;
    const Dataset fresh =
        collect_sequences(collect, policy, want, seed + 7919ULL * static_cast<std::uint64_t>(iter + 1),
                          estimator_factory(snapshot, est_cfg), &stats);
    if (stats.episodes > 0 && stats.success_rate() < cfg.min_success) {
      throw FilterTrainingError("in-loop collection: success rate " + std::to_string(stats.success_rate()) +
                                " over " + std::to_string(stats.episodes) + " episodes fell below " +
                                std::to_string(cfg.min_success) + " at iteration " + std::to_string(iter));
    }
    data.append(fresh);
    schedule.collected += fresh.samples();

    Stage2Config s2 = cfg.stage2;
    s2.epochs = cfg.epochs_per_iteration;
    train_stage2(data, models, s2, rng);

    InloopIteration it;
    it.collected = fresh.samples();
    it.total_inloop = schedule.collected;
    it.success_rate = stats.success_rate();
    it.eval = evaluate_filter(eval_suite, models, cfg.inference_particles, eval_seed);
    result.iterations.push_back(it);
    if (on_iteration) {
      on_iteration(it);
    }
  }
  return result;
}

ParticleFilterEstimator::ParticleFilterEstimator(std::shared_ptr<const FilterModels> models, EstimatorConfig config)
    : shared_(std::move(models)), models_(*shared_), config_(config) {
  if (config_.particles <= 0) {
    throw std::invalid_argument("ParticleFilterEstimator: particle count must be positive");
  }
}

void ParticleFilterEstimator::reset(const CubeState& start, Rng& rng) {
  particles_ = sample_particles(start, config_.init, config_.particles, rng);
}

CubeState ParticleFilterEstimator::update(std::span<const env::SensorSample> samples, Rng& rng) {
  if (particles_.size() == 0) {
    throw std::logic_error("ParticleFilterEstimator: update before reset");
  }
  for (const auto& s : samples) {
    particles_ = filter_step(particles_, FilterIO::from_sample(s), models_, rng);
  }
  return estimate(particles_);
}

policy::EstimatorFactory estimator_factory(std::shared_ptr<const FilterModels> models, EstimatorConfig config) {
  return [models = std::move(models), config]() -> std::unique_ptr<policy::StateEstimator> {
    return std::make_unique<ParticleFilterEstimator>(models, config);
  };
}

}  // namespace reorient::filter
