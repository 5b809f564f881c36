#include <benchmark/benchmark.h>

#include <array>

#include "reorient/filter.hpp"
#include "reorient/sac.hpp"

namespace {

using namespace reorient;

// Squeeze on the flexion joints so the cube is held while timing.
std::array<double, env::kJoints> squeeze() {
  std::array<double, env::kJoints> a{};
  for (int f = 0; f < env::kFingers; ++f) {
    a[static_cast<std::size_t>(env::kJointsPerFinger * f + 1)] = 0.3;
    a[static_cast<std::size_t>(env::kJointsPerFinger * f + 2)] = 0.3;
  }
  return a;
}

void BM_EnvStep(benchmark::State& state) {
  env::Environment e(env::EnvConfig{}, 1);
  Rng rng(1);
  e.reset(env::sample_domain(rng));
  const auto a = squeeze();
  for (auto _ : state) {
    auto r = e.step(a);
    if (r.event != env::Event::kNone) {
      state.PauseTiming();
      e.reset(env::sample_domain(rng));
      state.ResumeTiming();
    }
    benchmark::DoNotOptimize(r.cube_true.x);
  }
}
BENCHMARK(BM_EnvStep)->Unit(benchmark::kMicrosecond);

void BM_FilterUpdate(benchmark::State& state) {
  Rng rng(2);
  auto models = std::make_shared<const filter::FilterModels>(filter::FilterModelConfig{}, rng);
  filter::EstimatorConfig cfg;
  cfg.particles = static_cast<int>(state.range(0));
  filter::ParticleFilterEstimator est(models, cfg);
  env::Environment e(env::EnvConfig{}, 2);
  auto r = e.reset(env::sample_domain(rng));
  est.reset(r.cube_true, rng);
  const auto a = squeeze();
  r = e.step(a);
  for (auto _ : state) {
    benchmark::DoNotOptimize(est.update(r.samples, rng).x);
  }
}
BENCHMARK(BM_FilterUpdate)->Arg(10)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_SacUpdate(benchmark::State& state) {
  Rng rng(3);
  policy::SacConfig cfg;
  const int h = static_cast<int>(state.range(0));
  cfg.hidden = {h, h};
  cfg.batch_size = 256;
  const int pd = 5 * 51;
  const int qd = 5 * 54;
  policy::SacAgent agent(pd, qd, env::kJoints, cfg, rng);
  policy::Batch b;
  const int n = cfg.batch_size;
  b.policy_obs = Eigen::MatrixXd::Random(n, pd);
  b.q_obs = Eigen::MatrixXd::Random(n, qd);
  b.action = Eigen::MatrixXd::Random(n, env::kJoints);
  b.reward = Eigen::MatrixXd::Random(n, 1);
  b.terminal = Eigen::MatrixXd::Zero(n, 1);
  b.next_policy_obs = Eigen::MatrixXd::Random(n, pd);
  b.next_q_obs = Eigen::MatrixXd::Random(n, qd);
  for (auto _ : state) {
    benchmark::DoNotOptimize(agent.update(b, rng));
  }
}
BENCHMARK(BM_SacUpdate)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
