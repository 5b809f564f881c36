#include "reorient/bench.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace reorient::bench {

using nlohmann::json;

void BenchmarkSpec::validate() const {
  if (eta_spin.empty()) {
    throw ConfigurationError("benchmark: no spinning friction values");
  }
  if (runs_per_cell < 1) {
    throw ConfigurationError("benchmark: runs per cell must be positive");
  }
  if (threads < 1) {
    throw ConfigurationError("benchmark: need at least one thread");
  }
  if (start_element >= OctahedralGroup::kOrder) {
    throw ConfigurationError("benchmark: start element out of range");
  }
}

std::int64_t BenchmarkSpec::episodes() const {
  return static_cast<std::int64_t>(GoalSet::instance().size()) * static_cast<std::int64_t>(eta_spin.size()) *
         runs_per_cell;
}

DomainLog DomainLog::from(const env::DomainConfig& d) {
  return DomainLog{d.eta_spin, d.eta_lat,     d.cube_size,     d.cube_mass,   d.kp,        d.kd,
                   d.sticky_prob, d.gravity_scale, d.noise.q_sigma, d.noise.x_sigma, d.noise.R_sigma};
}

std::uint64_t episode_seed(std::uint64_t seed, int goal, int eta_index, int run) {
  // splitmix64 over the packed cell coordinates
  std::uint64_t z = seed ^ ((static_cast<std::uint64_t>(goal) << 40) | (static_cast<std::uint64_t>(eta_index) << 24) |
                            static_cast<std::uint64_t>(run));
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

EpisodeRecord run_episode(const policy::SacAgent& agent, const filter::FilterModels* filter,
                          const BenchmarkSpec& spec, int goal, int eta_index, int run, std::uint64_t seed) {
  const int frame = policy::ObservationFrame::kPolicyDim;
  if (agent.policy_dim() % frame != 0 || agent.action_dim() != env::kJoints) {
    throw ConfigurationError("benchmark: policy observation size " + std::to_string(agent.policy_dim()) +
                             " does not match the observation layout");
  }
  EpisodeRecord rec;
  rec.goal = goal;
  rec.eta_index = eta_index;
  rec.eta_spin = spec.eta_spin.at(static_cast<std::size_t>(eta_index));
  rec.run = run;
  rec.seed = episode_seed(seed, goal, eta_index, run);
  rec.estimator = filter != nullptr;

  env::EnvConfig ecfg = spec.env;
  ecfg.thresholds.goal_timeout = spec.goal_timeout;
  env::Environment e(ecfg, rec.seed);
  Rng rng(rec.seed ^ 0x5851f42d4c957f2dULL);
  Rng noise_rng(rec.seed ^ 0x14057b7ef767814fULL);

  env::DomainOverrides pin;
  pin.eta_spin = rec.eta_spin;
  pin.cube_size = spec.cube_size;
  pin.gravity_scale = 1.0;
  env::NoiseConfig noise;
  noise.x_sigma = 0.0;
  noise.R_sigma = 0.0;
  pin.noise = noise;
  for (int attempt = 0;; ++attempt) {
    try {
      e.reset(env::sample_domain(rng, pin), spec.start_element);
      break;
    } catch (const std::runtime_error&) {
      if (attempt >= 20) {
        throw;
      }
    }
  }
  rec.domain = DomainLog::from(e.domain());
  const Rotation target = GoalSet::instance().goal(static_cast<std::size_t>(goal));
  e.set_goal(target);

  std::unique_ptr<filter::ParticleFilterEstimator> est;
  env::CubeState estimate = e.state().cube;
  if (filter) {
    est = std::make_unique<filter::ParticleFilterEstimator>(std::make_shared<const filter::FilterModels>(*filter),
                                                            spec.estimator);
    est->reset(e.state().cube, noise_rng);
  }
  policy::ObservationStack stack(frame, agent.policy_dim() / frame);
  auto push = [&] {
    if (!est) {
      estimate = e.state().cube;
    }
    stack.push(policy::build_observation(policy::snapshot(e), policy::Role::kPolicy, &estimate, e.domain().noise,
                                         noise_rng)
                   .to_vector());
  };
  push();
  double err_x = 0.0;
  double err_phi = 0.0;
  while (true) {
    const Eigen::VectorXd a = agent.act(stack.flat(), true, noise_rng);
    env::StepResult r;
    try {
      r = e.step(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())));
    } catch (const env::SimulationDiverged&) {
      rec.diverged = true;
      break;
    }
    ++rec.steps;
    if (est) {
      estimate = est->update(r.samples, noise_rng);
      err_x += (estimate.x - r.cube_true.x).norm();
      err_phi += distance(estimate.R, r.cube_true.R);
    }
    push();
    rec.final_angle = distance(target, r.cube_true.R);
    rec.final_distance = r.cube_true.x.norm();
    if (r.event != env::Event::kNone) {
      rec.end = r.event;
      rec.success = r.event == env::Event::kSuccess;
      break;
    }
  }
  rec.time = e.time();
  if (rec.steps > 0) {
    rec.mean_x_err = err_x / rec.steps;
    rec.mean_phi = err_phi / rec.steps;
  }
  return rec;
}

BenchmarkReport BenchmarkReport::aggregate(std::vector<EpisodeRecord> episodes, std::vector<double> eta_spin,
                                           int runs_per_cell, std::uint64_t seed) {
  std::sort(episodes.begin(), episodes.end(), [](const EpisodeRecord& a, const EpisodeRecord& b) {
    return std::tie(a.goal, a.eta_index, a.run) < std::tie(b.goal, b.eta_index, b.run);
  });
  BenchmarkReport r;
  r.seed = seed;
  r.eta_spin = std::move(eta_spin);
  r.runs_per_cell = runs_per_cell;
  r.per_goal.assign(GoalSet::instance().size(), Rate{});
  r.per_friction.assign(r.eta_spin.size(), Rate{});
  for (const auto& e : episodes) {
    if (e.goal < 1 || static_cast<std::size_t>(e.goal) > r.per_goal.size() || e.eta_index < 0 ||
        static_cast<std::size_t>(e.eta_index) >= r.per_friction.size()) {
      throw std::invalid_argument("benchmark: episode record outside the protocol grid");
    }
    const std::int64_t s = e.success ? 1 : 0;
    auto& g = r.per_goal[static_cast<std::size_t>(e.goal - 1)];
    auto& f = r.per_friction[static_cast<std::size_t>(e.eta_index)];
    g.successes += s;
    ++g.attempts;
    f.successes += s;
    ++f.attempts;
    r.overall.successes += s;
    ++r.overall.attempts;
  }
  r.episodes = std::move(episodes);
  return r;
}

BenchmarkReport run_benchmark(const policy::SacAgent& agent, std::shared_ptr<const filter::FilterModels> filter,
                              const BenchmarkSpec& spec, std::uint64_t seed) {
  spec.validate();
  struct Cell {
    int goal, eta, run;
  };
  std::vector<Cell> cells;
  const int goals = static_cast<int>(GoalSet::instance().size());
  for (int g = 1; g <= goals; ++g) {
    for (int k = 0; k < static_cast<int>(spec.eta_spin.size()); ++k) {
      for (int r = 0; r < spec.runs_per_cell; ++r) {
        cells.push_back({g, k, r});
      }
    }
  }
  std::vector<EpisodeRecord> out(cells.size());
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(spec.threads));
  std::atomic<std::size_t> next{0};
  auto work = [&](std::size_t t) {
    try {
      for (std::size_t i = next++; i < cells.size(); i = next++) {
        out[i] = run_episode(agent, filter.get(), spec, cells[i].goal, cells[i].eta, cells[i].run, seed);
      }
    } catch (...) {
      errors[t] = std::current_exception();
      next = cells.size();
    }
  };
  if (spec.threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < spec.threads; ++t) {
      pool.emplace_back(work, static_cast<std::size_t>(t));
    }
  }
  for (auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
  return BenchmarkReport::aggregate(std::move(out), spec.eta_spin, spec.runs_per_cell, seed);
}

std::pair<double, double> wilson_interval(std::int64_t successes, std::int64_t n, double z) {
  if (n <= 0 || successes < 0 || successes > n) {
    throw std::invalid_argument("wilson_interval: need 0 <= successes <= n, n > 0");
  }
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double center = (p + z2 / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  // The bounds are exactly 0 and 1 at the ends; the formula only reaches them up to rounding.
  const double lo = successes == 0 ? 0.0 : center - half;
  const double hi = successes == n ? 1.0 : center + half;
  return {lo, hi};
}

std::vector<FrictionRow> friction_table(const BenchmarkReport& report) {
  std::vector<FrictionRow> rows;
  for (std::size_t k = 0; k < report.eta_spin.size(); ++k) {
    FrictionRow row;
    row.eta_spin = report.eta_spin[k];
    row.rate = report.per_friction[k];
    if (row.rate.attempts > 0) {
      std::tie(row.lower, row.upper) = wilson_interval(row.rate.successes, row.rate.attempts);
    }
    rows.push_back(row);
  }
  return rows;
}

std::vector<FrictionRow> friction_sweep(const policy::SacAgent& agent,
                                        std::shared_ptr<const filter::FilterModels> filter,
                                        const std::vector<double>& eta_values, int runs, std::uint64_t seed,
                                        BenchmarkSpec base) {
  if (eta_values.size() < 2) {
    throw std::invalid_argument("friction_sweep: need at least two friction values");
  }
  base.eta_spin = eta_values;
  base.runs_per_cell = runs;
  return friction_table(run_benchmark(agent, std::move(filter), base, seed));
}

namespace {

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) {
    throw std::runtime_error("cannot write " + p.string());
  }
  out.precision(17);
  return out;
}

json domain_json(const DomainLog& d) {
  return json{{"eta_spin", d.eta_spin},       {"eta_lat", d.eta_lat}, {"cube_size", d.cube_size},
              {"cube_mass", d.cube_mass},     {"kp", d.kp},           {"kd", d.kd},
              {"sticky_prob", d.sticky_prob}, {"gravity_scale", d.gravity_scale},
              {"q_sigma", d.q_sigma},         {"x_sigma", d.x_sigma}, {"R_sigma", d.R_sigma}};
}

json episode_json(const EpisodeRecord& e) {
  return json{{"goal", e.goal},
              {"eta_index", e.eta_index},
              {"eta_spin", e.eta_spin},
              {"run", e.run},
              {"seed", e.seed},
              {"success", e.success},
              {"end", env::to_string(e.end)},
              {"diverged", e.diverged},
              {"estimator", e.estimator},
              {"steps", e.steps},
              {"time", e.time},
              {"final_angle", e.final_angle},
              {"final_distance", e.final_distance},
              {"mean_x_err", e.mean_x_err},
              {"mean_phi", e.mean_phi},
              {"domain", domain_json(e.domain)}};
}

json rate_json(const Rate& r) {
  return json{{"successes", r.successes}, {"attempts", r.attempts}, {"rate", r.rate()}};
}

}  // namespace

void emit_report(const BenchmarkReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    auto out = open_out(dir / "bench.csv");
    out << "goal,successes,attempts,rate\n";
    for (std::size_t g = 0; g < report.per_goal.size(); ++g) {
      const auto& r = report.per_goal[g];
      out << g + 1 << ',' << r.successes << ',' << r.attempts << ',' << r.rate() << '\n';
    }
  }
  const auto friction = friction_table(report);
  {
    auto out = open_out(dir / "bench_friction.csv");
    out << "eta_spin,successes,attempts,rate,wilson_lower,wilson_upper\n";
    for (const auto& f : friction) {
      out << f.eta_spin << ',' << f.rate.successes << ',' << f.rate.attempts << ',' << f.rate.rate() << ','
          << f.lower << ',' << f.upper << '\n';
    }
  }
  {
    json j;
    j["seed"] = report.seed;
    j["episodes"] = report.episodes.size();
    j["runs_per_cell"] = report.runs_per_cell;
    j["eta_spin"] = report.eta_spin;
    j["overall"] = rate_json(report.overall);
    j["per_goal"] = json::array();
    for (std::size_t g = 0; g < report.per_goal.size(); ++g) {
      json r = rate_json(report.per_goal[g]);
      r["goal"] = g + 1;
      j["per_goal"].push_back(r);
    }
    j["per_friction"] = json::array();
    for (const auto& f : friction) {
      json r = rate_json(f.rate);
      r["eta_spin"] = f.eta_spin;
      r["wilson"] = {f.lower, f.upper};
      j["per_friction"].push_back(r);
    }
    auto out = open_out(dir / "bench.json");
    out << j.dump(2) << '\n';
  }
  {
    auto out = open_out(dir / "episodes.jsonl");
    for (const auto& e : report.episodes) {
      out << episode_json(e).dump() << '\n';
    }
  }
  {
    auto out = open_out(dir / "bench_goals.dat");
    out << "# goal rate successes attempts\n";
    for (std::size_t g = 0; g < report.per_goal.size(); ++g) {
      const auto& r = report.per_goal[g];
      out << g + 1 << ' ' << r.rate() << ' ' << r.successes << ' ' << r.attempts << '\n';
    }
  }
  {
    auto out = open_out(dir / "bench_friction.dat");
    out << "# eta_spin rate wilson_lower wilson_upper\n";
    for (const auto& f : friction) {
      out << f.eta_spin << ' ' << f.rate.rate() << ' ' << f.lower << ' ' << f.upper << '\n';
    }
  }
}

std::vector<Rate> read_rates_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot read " + path.string());
  }
  std::string line;
  std::getline(in, line);
  std::vector<Rate> out;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    std::stringstream ss(line);
    std::vector<std::string> cols;
    for (std::string c; std::getline(ss, c, ',');) {
      cols.push_back(c);
    }
    if (cols.size() < 4) {
      throw std::runtime_error("malformed rate row in " + path.string() + ": " + line);
    }
    Rate r;
    r.successes = std::stoll(cols[1]);
    r.attempts = std::stoll(cols[2]);
    if (std::stod(cols[3]) != r.rate()) {
      throw std::runtime_error("rate column disagrees with counts in " + path.string());
    }
    out.push_back(r);
  }
  return out;
}

std::vector<EpisodeRecord> read_episodes_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot read " + path.string());
  }
  std::vector<EpisodeRecord> out;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) {
      continue;
    }
    const json j = json::parse(line);
    EpisodeRecord e;
    e.goal = j.at("goal").get<int>();
    e.eta_index = j.at("eta_index").get<int>();
    e.eta_spin = j.at("eta_spin").get<double>();
    e.run = j.at("run").get<int>();
    e.seed = j.at("seed").get<std::uint64_t>();
    e.success = j.at("success").get<bool>();
    e.end = env::event_from_string(j.at("end").get<std::string>());
    e.diverged = j.at("diverged").get<bool>();
    e.estimator = j.at("estimator").get<bool>();
    e.steps = j.at("steps").get<int>();
    e.time = j.at("time").get<double>();
    e.final_angle = j.at("final_angle").get<double>();
    e.final_distance = j.at("final_distance").get<double>();
    e.mean_x_err = j.at("mean_x_err").get<double>();
    e.mean_phi = j.at("mean_phi").get<double>();
    const auto& d = j.at("domain");
    e.domain = DomainLog{d.at("eta_spin").get<double>(),    d.at("eta_lat").get<double>(),
                         d.at("cube_size").get<double>(),   d.at("cube_mass").get<double>(),
                         d.at("kp").get<double>(),          d.at("kd").get<double>(),
                         d.at("sticky_prob").get<double>(), d.at("gravity_scale").get<double>(),
                         d.at("q_sigma").get<double>(),     d.at("x_sigma").get<double>(),
                         d.at("R_sigma").get<double>()};
    out.push_back(e);
  }
  return out;
}

}  // namespace reorient::bench
