#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "reorient/autodiff.hpp"
#include "reorient/checkpoint.hpp"
#include "reorient/collector.hpp"
#include "reorient/env.hpp"
#include "reorient/nn.hpp"

namespace reorient::filter {

using ad::Matrix;
using env::CubeState;

/// Rows of a state matrix: x (3), quaternion wxyz (4), v (3), w (3).
constexpr int kStateDim = 13;
/// Gaussian draws per particle and step: x, v, w and the rotation increment.
constexpr int kNoiseDim = 12;
constexpr int kFeatureDim = 66;
constexpr int kProposalOut = 24;

class FilterCollapsed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FilterTrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One 100 Hz filter input: z = (q, qdot) and the control u = q_bar.
struct FilterIO {
  env::Joints q = env::Joints::Zero();
  env::Joints qdot = env::Joints::Zero();
  env::Joints q_bar = env::Joints::Zero();

  static FilterIO from_sample(const env::SensorSample& s) { return {s.q, s.qdot, s.q_bar}; }
  /// q, qdot, q_bar concatenated (36 values).
  Eigen::VectorXd to_vector() const;
};

struct Particle {
  CubeState state;
  double log_weight = 0.0;
};

/// Particles stored as matrices, one particle per row.
struct ParticleSet {
  Matrix x;      // N x 3
  Matrix q;      // N x 4 (w, x, y, z)
  Matrix v;      // N x 3
  Matrix w;      // N x 3
  Eigen::VectorXd log_w;

  Eigen::Index size() const { return log_w.size(); }
  Particle particle(Eigen::Index i) const;
  void set_particle(Eigen::Index i, const Particle& p);
  static ParticleSet uniform(std::span<const CubeState> states);
  static ParticleSet replicate(const CubeState& s, Eigen::Index n);
};

Matrix state_row(const CubeState& s);
CubeState state_from_row(const Eigen::Ref<const Eigen::RowVectorXd>& row);

struct FilterLossConfig {
  double c_x = 1.0;
  double c_R = 100.0;
  double c_v = 0.1;
  double c_w = 0.1;

  void validate() const;
};

/// (1/T) sum_t sum_j c_j d_j(pred_t, truth_t)^2 with Euclidean distances for
/// x, v, w and the geodesic angle for R.
double filter_loss(std::span<const CubeState> pred, std::span<const CubeState> truth,
                   const FilterLossConfig& cfg = {});

struct FilterModelConfig {
  std::vector<int> hidden{64, 64};
  nn::Activation activation = nn::Activation::kTanh;
  double dt = 0.01;
  /// Physical scale of one unit of proposal output for x, v, w and the rotation increment.
  double scale_x = 1e-3;
  double scale_v = 0.02;
  double scale_w = 0.3;
  double scale_r = 5e-3;
  /// Bounds of the learned log noise scale relative to the unit scale.
  double log_scale_min = -7.0;
  double log_scale_max = 1.0;
  /// The log-weight increment is squashed to +-this.
  double max_log_increment = 10.0;
};

/// Proposal F and update model G.
class FilterModels {
 public:
  FilterModels() = default;
  FilterModels(FilterModelConfig config, Rng& rng);

  nn::Mlp& proposal() { return proposal_; }
  nn::Mlp& update() { return update_; }
  const nn::Mlp& proposal() const { return proposal_; }
  const nn::Mlp& update() const { return update_; }
  const FilterModelConfig& config() const { return config_; }

  std::vector<ad::Parameter*> parameters();
  std::vector<ad::Parameter*> proposal_parameters() { return proposal_.parameters(); }
  void zero_grad();

 private:
  FilterModelConfig config_;
  nn::Mlp proposal_;
  nn::Mlp update_;
};

Checkpoint models_checkpoint(const FilterModels& m);
FilterModels models_from_checkpoint(const Checkpoint& c);

/// A batch of particle sets on a tape: `groups` sets of `n` consecutive rows.
struct ParticleVars {
  ad::Var x, q, v, w, log_w;
  Eigen::Index n = 1;
  Eigen::Index groups = 1;
};

ParticleVars to_vars(ad::Tape& tape, const ParticleSet& ps);
ParticleSet from_vars(const ParticleVars& pv);

/// Inputs for every group, one row per group (36 values, see FilterIO::to_vector).
Matrix io_rows(std::span<const FilterIO> io);

/// Network input features for each particle row: fingertips in the cube frame,
/// the particle state and the proprioception, roughly unit-scaled.
ad::Var features(ad::Tape& tape, const ParticleVars& p, const Matrix& io);

struct StepOptions {
  bool resample = true;
  /// Update model disabled (used for the one-step proposal training).
  bool weight_update = true;
};

struct StepStats {
  std::vector<bool> resampled;  // per group
};

/// Samples each particle from F with the given draws (rows x kNoiseDim).
ParticleVars propagate(ad::Tape& tape, FilterModels& models, const ParticleVars& p, const Matrix& io,
                       const Matrix& noise);

/// Propagation, G-weighting, log-sum-exp normalization and, per group,
/// systematic resampling when ESS < n/2 (ancestors are constants).
ParticleVars filter_step(ad::Tape& tape, FilterModels& models, const ParticleVars& p, const Matrix& io,
                         const Matrix& noise, Rng& rng, const StepOptions& options = {}, StepStats* stats = nullptr);

/// Non-differentiable convenience wrapper; draws its own noise.
ParticleSet filter_step(const ParticleSet& ps, const FilterIO& io, FilterModels& models, Rng& rng);

/// Point estimate per group: weighted means of x, v, w and the weighted
/// rotation medoid (selected by value; gradients flow through the chosen rotation).
struct EstimateVars {
  ad::Var x, q, v, w;
};
EstimateVars estimate(const ParticleVars& p);
CubeState estimate(const ParticleSet& ps);

/// Sum over groups of sum_j c_j d_j^2 between the estimates and the true rows
/// (groups x kStateDim).
ad::Var estimate_loss(ad::Tape& tape, const EstimateVars& e, const Matrix& truth, const FilterLossConfig& cfg);

// Weight utilities shared by every filter variant.

/// Subtracts the log-sum-exp; throws FilterCollapsed when every weight is -inf or any is NaN.
void normalize_log_weights(Eigen::Ref<Eigen::VectorXd> log_w);
double effective_sample_size(const Eigen::Ref<const Eigen::VectorXd>& weights);
/// Ancestor indices from one uniform offset u0 in [0, 1/N).
std::vector<Eigen::Index> systematic_resample(const Eigen::Ref<const Eigen::VectorXd>& weights, Rng& rng);
/// Index minimizing sum_i w_i angle(q_i, q_j)^2 over rows j; ties to the lowest index.
Eigen::Index rotation_medoid(const Eigen::Ref<const Matrix>& q, const Eigen::Ref<const Eigen::VectorXd>& weights);

/// Generic bootstrap step on arbitrary state rows: propose, add log-likelihood,
/// normalize, resample when ESS < N/2. Returns whether it resampled.
bool generic_filter_step(Matrix& states, Eigen::VectorXd& log_w,
                         const std::function<Matrix(const Matrix&, Rng&)>& propose,
                         const std::function<Eigen::VectorXd(const Matrix&)>& log_increment, Rng& rng);

// Data.

/// One training sequence: states has T+1 rows (the initial state first),
/// io has T rows of FilterIO::to_vector().
struct Sequence {
  Matrix states;
  Matrix io;
  bool inloop = false;
  std::uint64_t episode = 0;

  Eigen::Index length() const { return io.rows(); }
};

struct Dataset {
  std::vector<Sequence> sequences;

  /// Number of 100 Hz samples.
  std::int64_t samples() const;
  std::int64_t samples(bool inloop) const;
  void append(const Dataset& other);
  /// Writes shard files of at most `per_shard` sequences into dir.
  void save(const std::filesystem::path& dir, std::size_t per_shard = 500) const;
  static Dataset load(const std::filesystem::path& dir);
};

struct CollectConfig {
  policy::WorkerConfig worker;
  int workers = 4;
  int sequence_length = 100;
  bool inloop = false;
};

struct CollectStats {
  std::int64_t episodes = 0;
  std::int64_t successful_episodes = 0;  // reached at least one goal
  std::int64_t policy_steps = 0;
  double success_rate() const { return episodes == 0 ? 0.0 : static_cast<double>(successful_episodes) / episodes; }
};

/// Rolls out `policy` and cuts episodes into sequences until exactly
/// `samples` samples are gathered (the last sequence is truncated).
Dataset collect_sequences(const CollectConfig& cfg, const policy::PolicyFn& policy, std::int64_t samples,
                          std::uint64_t seed, const policy::EstimatorFactory& estimator = {},
                          CollectStats* stats = nullptr);

// Training.

struct Stage1Config {
  int batch_size = 256;
  int max_epochs = 100;
  int patience = 5;            // epochs over which improvement is measured
  double min_improvement = 0.01;
  double learning_rate = 1e-3;
  double validation_fraction = 0.1;
  bool sample_noise = true;
  FilterLossConfig loss;
};

struct Stage1Result {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  double identity_val_loss = 0.0;
  int epochs = 0;
  bool converged = false;
};

/// One-step-ahead training of F with a single particle from the true state.
Stage1Result train_stage1(const Dataset& data, FilterModels& models, const Stage1Config& cfg, Rng& rng);

/// Mean one-step loss of F (noise-free if `sample_noise` is false) and of the identity propagation.
double one_step_loss(const std::vector<const Sequence*>& seqs, FilterModels& models, const FilterLossConfig& loss,
                     Rng* noise_rng);
double identity_one_step_loss(const std::vector<const Sequence*>& seqs, const FilterLossConfig& loss);

struct InitialSpread {
  double x = 0.005;
  double rot = 0.05;
  double v = 0.01;
  double w = 0.1;
};

/// Per-component spread of the states around each sequence's initial state.
InitialSpread data_spread(const Dataset& data);

struct Stage2Config {
  int particles = 32;
  int batch_sequences = 4;
  int epochs = 2;
  std::int64_t max_batches = 0;  // 0: no cap
  double learning_rate = 3e-4;
  double max_grad_norm = 10.0;
  double bias_x = 0.005;
  double bias_rot = 0.05;
  /// Initial particle spread; data_spread() when unset.
  std::optional<InitialSpread> spread;
  int truncate = 0;  // >0: use only the first `truncate` steps of every sequence
  /// Held out of training; the parameters with the lowest validation loss
  /// (including the starting ones) are kept. 0 disables the selection.
  double validation_fraction = 0.0;
  std::uint64_t validation_seed = 1;
  FilterLossConfig loss;
};

struct Stage2Result {
  std::vector<double> batch_loss;
  std::vector<double> val_loss;  // before training, then after every epoch
  int best_epoch = -1;           // -1: starting parameters kept
  std::int64_t truncated_batches = 0;
};

struct UnrollOptions {
  int particles = 32;
  InitialSpread spread;
  bool initial_bias = true;
  double bias_x = 0.005;
  double bias_rot = 0.05;
  bool resample = true;
  FilterLossConfig loss;
};

/// Builds the unrolled filter over sequences on the tape and returns the mean
/// loss (averaged over time and sequences).
ad::Var unroll_loss(ad::Tape& tape, FilterModels& models, std::span<const Sequence* const> seqs, int steps,
                    const UnrollOptions& opt, Rng& rng);

Stage2Result train_stage2(const Dataset& data, FilterModels& models, const Stage2Config& cfg, Rng& rng);

/// Full-filter loss on held-out sequences with a fixed seed.
double sequence_loss(const std::vector<const Sequence*>& seqs, FilterModels& models, const UnrollOptions& opt,
                     std::uint64_t seed);

struct EstimationError {
  double position = 0.0;  // mean |x_hat - x|, m
  double rotation = 0.0;  // mean angle, rad
  Eigen::Vector3d per_axis = Eigen::Vector3d::Zero();
};

/// Runs the inference filter (N particles, no gradient) over sequences.
EstimationError evaluate_filter(const std::vector<const Sequence*>& seqs, const FilterModels& models, int particles,
                                std::uint64_t seed);

/// Bookkeeping for the in-loop data rule: collection stops when in-loop
/// samples reach `ratio` times the offline samples.
struct InloopSchedule {
  std::int64_t offline = 0;
  std::int64_t per_iteration = 0;
  double ratio = 0.5;
  std::int64_t collected = 0;

  std::int64_t target() const;
  bool done() const { return collected >= target(); }
  /// Samples to gather in the next iteration.
  std::int64_t next_batch() const;
  int iterations() const;
};

struct InloopConfig {
  CollectConfig collect;
  std::int64_t per_iteration = 10000;
  double ratio = 0.5;
  double min_success = 0.05;
  int epochs_per_iteration = 2;
  int inference_particles = 100;
  Stage2Config stage2;
};

struct InloopIteration {
  std::int64_t collected = 0;
  std::int64_t total_inloop = 0;
  double success_rate = 0.0;
  EstimationError eval;
};

struct InloopResult {
  std::vector<InloopIteration> iterations;
  EstimationError initial_eval;
};

/// Iterates: collect with the current filter in the loop, append, train 2 epochs.
InloopResult train_inloop(const policy::PolicyFn& policy, FilterModels& models, Dataset& data,
                          const InloopConfig& cfg, const std::vector<const Sequence*>& eval_suite,
                          std::uint64_t seed, const std::function<void(const InloopIteration&)>& on_iteration = {});

// Inference.

struct EstimatorConfig {
  int particles = 100;
  InitialSpread init{0.002, 0.03, 0.005, 0.05};
};

/// Particle filter behind the policy's StateEstimator interface.
class ParticleFilterEstimator : public policy::StateEstimator {
 public:
  ParticleFilterEstimator(std::shared_ptr<const FilterModels> models, EstimatorConfig config = {});

  void reset(const CubeState& start, Rng& rng) override;
  CubeState update(std::span<const env::SensorSample> samples, Rng& rng) override;
  const ParticleSet& particles() const { return particles_; }

 private:
  std::shared_ptr<const FilterModels> shared_;
  FilterModels models_;  // private copy; the tape writes gradients into parameters
  EstimatorConfig config_;
  ParticleSet particles_;
};

policy::EstimatorFactory estimator_factory(std::shared_ptr<const FilterModels> models, EstimatorConfig config = {});

/// Gaussian cloud around s: x, v, w with per-component sigma, R perturbed.
ParticleSet sample_particles(const CubeState& s, const InitialSpread& spread, Eigen::Index n, Rng& rng);

}  // namespace reorient::filter
