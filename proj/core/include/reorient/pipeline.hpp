#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "reorient/bench.hpp"
#include "reorient/filter.hpp"
#include "reorient/policy_trainer.hpp"

namespace reorient::pipeline {

class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class StageId { kS1 = 1, kS2, kS3, kS4, kS5 };
enum class StageKind { kPolicy, kFilter };
enum class StateSource { kTrueNoisy, kEstimator };

std::string to_string(StageId s);
std::string to_string(StateSource s);
/// Accepts "S3", "s3" or "3".
StageId stage_from_string(const std::string& s);
std::vector<StageId> all_stages();

/// Success-gated gravity ramp with a progress floor so the scale is at its
/// end value by `deadline` (fraction of the stage budget).
class GravitySchedule {
 public:
  struct Params {
    double start = 0.0;
    double end = 1.0;
    double step = 0.1;
    double threshold = 0.4;  // trailing success rate that triggers a step
    int window = 100;
    double deadline = 0.8;
  };

  GravitySchedule() : GravitySchedule(Params{}) {}
  explicit GravitySchedule(Params p);

  double scale() const { return scale_; }
  const Params& params() const { return params_; }
  /// Records one finished episode at env step `step`; true when the scale moved.
  bool observe(bool success, std::int64_t step);
  /// Applies the progress floor; true when the scale moved.
  bool advance(double progress, std::int64_t step);
  /// (env step, scale) after every change, starting with (0, start).
  const std::vector<std::pair<std::int64_t, double>>& trace() const { return trace_; }
  bool forced() const { return forced_; }
  /// Reinstates a saved scale and trace; the success window starts empty.
  void restore(const std::vector<std::pair<std::int64_t, double>>& trace, bool forced);

 private:
  void set(double g, std::int64_t step);

  Params params_;
  double scale_;
  std::deque<bool> window_;
  std::vector<std::pair<std::int64_t, double>> trace_;
  bool forced_ = false;
};

/// Extra learning termination used with the estimator in the loop.
bool inloop_termination(double x_err, double phi);

struct StagePlan {
  StageId id = StageId::kS1;
  StageKind kind = StageKind::kPolicy;
  std::optional<rewards::RewardKind> reward;  // policy stages only
  StateSource source = StateSource::kTrueNoisy;
  double lowpass_alpha = 0.5;
  std::optional<GravitySchedule::Params> gravity;  // S1 only
  std::optional<StageId> policy_in;
  std::optional<StageId> filter_in;
  std::int64_t budget = 0;  // env steps for policy stages, samples for filter stages

  /// Throws ConfigurationError when the wiring differs from the fixed S1..S5 table.
  void validate() const;
};

struct PipelineConfig {
  std::string name = "desk";
  std::filesystem::path root = "runs";
  std::uint64_t seed = 1;

  policy::PolicyTrainConfig policy;
  std::int64_t s1_steps = 300000;
  std::int64_t s2_steps = 150000;
  std::int64_t s5_steps = 150000;
  double s1_alpha = 0.5;
  double s2_alpha = 0.7;
  GravitySchedule::Params gravity;
  std::int64_t chunk_steps = 2000;  // env steps between gravity/progress checks

  filter::FilterModelConfig filter_model;
  filter::CollectConfig collect;
  std::int64_t offline_samples = 5000000;
  std::int64_t eval_samples = 20000;
  bool stochastic_data_policy = true;
  filter::Stage1Config stage1;
  filter::Stage2Config stage2;
  filter::InloopConfig inloop;

  bench::BenchmarkSpec bench;

  std::filesystem::path run_dir() const { return root / name; }
  std::filesystem::path stage_dir(StageId s) const { return run_dir() / to_string(s); }

  /// INI text with sections [run], [policy], [S1]..[S5], [filter], [bench].
  static PipelineConfig parse(const std::string& text);
  static PipelineConfig load(const std::filesystem::path& path);
};

StagePlan standard_plan(StageId id, const PipelineConfig& cfg);

/// Reference success rates per stage at full training scale, kept as metadata only.
double reference_rate(StageId id);

struct StageOutcome {
  StageId id = StageId::kS1;
  std::filesystem::path checkpoint;
  double bench_rate = 0.0;
  std::map<std::string, std::string> metadata;
};

std::filesystem::path policy_checkpoint_path(const PipelineConfig& cfg, StageId s);
std::filesystem::path filter_checkpoint_path(const PipelineConfig& cfg, StageId s);
std::filesystem::path filter_data_path(const PipelineConfig& cfg, StageId s);

std::filesystem::path latest_checkpoint_path(const PipelineConfig& cfg, StageId s);

struct RunOptions {
  /// Policy stages: continue from checkpoints/latest.ckpt when present.
  bool resume = false;
};

/// Runs one stage and its benchmark. Throws ConfigurationError when a
/// prerequisite checkpoint is missing.
StageOutcome run_stage(const StagePlan& plan, const PipelineConfig& cfg, const RunOptions& opt = {});

/// Completed stages are detected by their logs/stage.json marker.
bool stage_complete(const PipelineConfig& cfg, StageId s);
StageOutcome load_outcome(const PipelineConfig& cfg, StageId s);

/// S1..S5 in order. Stages already complete are skipped unless `from` is set,
/// in which case every stage from `from` on is rerun.
std::vector<StageOutcome> run_pipeline(const PipelineConfig& cfg, std::optional<StageId> from = std::nullopt);

/// Policy stages also write `lowpass_alpha` into the checkpoint metadata so the
/// benchmark can run the controller it was trained with.
double checkpoint_lowpass_alpha(const Checkpoint& c);

}  // namespace reorient::pipeline
