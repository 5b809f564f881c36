#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "reorient/filter.hpp"
#include "reorient/sac.hpp"

namespace reorient::bench {

class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BenchmarkSpec {
  std::vector<double> eta_spin{2e-4, 1e-3, 1e-2};
  int runs_per_cell = 8;
  double cube_size = 0.08;
  std::size_t start_element = 0;  // the cube starts in the identity orientation
  double goal_timeout = 10.0;
  int threads = 1;
  filter::EstimatorConfig estimator;
  env::EnvConfig env;

  /// Throws ConfigurationError on an empty friction list or a non-positive run count.
  void validate() const;
  std::int64_t episodes() const;
};

/// The realized randomization of one benchmark episode.
struct DomainLog {
  double eta_spin = 0.0;
  double eta_lat = 0.0;
  double cube_size = 0.0;
  double cube_mass = 0.0;
  double kp = 0.0;
  double kd = 0.0;
  double sticky_prob = 0.0;
  double gravity_scale = 0.0;
  double q_sigma = 0.0;
  double x_sigma = 0.0;
  double R_sigma = 0.0;

  static DomainLog from(const env::DomainConfig& d);
};

struct EpisodeRecord {
  int goal = 0;       // 1..24
  int eta_index = 0;  // into BenchmarkSpec::eta_spin
  double eta_spin = 0.0;
  int run = 0;
  std::uint64_t seed = 0;
  bool success = false;
  env::Event end = env::Event::kNone;
  bool diverged = false;
  bool estimator = false;
  int steps = 0;
  double time = 0.0;
  double final_angle = 0.0;  // to the goal, rad
  double final_distance = 0.0;
  double mean_x_err = 0.0;
  double mean_phi = 0.0;
  DomainLog domain;
};

struct Rate {
  std::int64_t successes = 0;
  std::int64_t attempts = 0;
  double rate() const { return attempts == 0 ? 0.0 : static_cast<double>(successes) / static_cast<double>(attempts); }
  bool operator==(const Rate&) const = default;
};

struct BenchmarkReport {
  std::uint64_t seed = 0;
  std::vector<double> eta_spin;
  int runs_per_cell = 0;
  std::vector<EpisodeRecord> episodes;  // sorted by (goal, eta, run)
  std::vector<Rate> per_goal;           // index 0 is goal 1
  std::vector<Rate> per_friction;
  Rate overall;

  double b() const { return overall.rate(); }
  /// Sorts the records and recomputes every rate from them.
  static BenchmarkReport aggregate(std::vector<EpisodeRecord> episodes, std::vector<double> eta_spin,
                                   int runs_per_cell, std::uint64_t seed);
};

/// Deterministic policy, optional filter in the loop. Without a filter the
/// policy receives the true cube pose (cube-state noise is off either way).
BenchmarkReport run_benchmark(const policy::SacAgent& policy, std::shared_ptr<const filter::FilterModels> filter,
                              const BenchmarkSpec& spec, std::uint64_t seed);

EpisodeRecord run_episode(const policy::SacAgent& policy, const filter::FilterModels* filter,
                          const BenchmarkSpec& spec, int goal, int eta_index, int run, std::uint64_t seed);

/// Seed of one (goal, eta, run) cell.
std::uint64_t episode_seed(std::uint64_t seed, int goal, int eta_index, int run);

/// Wilson score interval for a binomial proportion.
std::pair<double, double> wilson_interval(std::int64_t successes, std::int64_t n, double z = 1.959963984540054);

struct FrictionRow {
  double eta_spin = 0.0;
  Rate rate;
  double lower = 0.0;
  double upper = 0.0;
};

std::vector<FrictionRow> friction_table(const BenchmarkReport& report);

/// All 24 goals at every eta value, `runs` repetitions each.
std::vector<FrictionRow> friction_sweep(const policy::SacAgent& policy,
                                        std::shared_ptr<const filter::FilterModels> filter,
                                        const std::vector<double>& eta_values, int runs, std::uint64_t seed,
                                        BenchmarkSpec base = {});

/// Writes bench.csv (per goal), bench_friction.csv, bench.json, episodes.jsonl
/// and gnuplot data files (bench_goals.dat, bench_friction.dat) into `dir`.
void emit_report(const BenchmarkReport& report, const std::filesystem::path& dir);

/// Reads a per-goal or per-friction CSV written by emit_report.
std::vector<Rate> read_rates_csv(const std::filesystem::path& path);
std::vector<EpisodeRecord> read_episodes_jsonl(const std::filesystem::path& path);

}  // namespace reorient::bench
