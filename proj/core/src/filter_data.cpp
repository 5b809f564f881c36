#include <algorithm>
#include <cstdio>

#include "reorient/filter.hpp"

namespace reorient::filter {

std::int64_t Dataset::samples() const {
  std::int64_t n = 0;
  for (const auto& s : sequences) {
    n += s.length();
  }
  return n;
}

std::int64_t Dataset::samples(bool inloop) const {
  std::int64_t n = 0;
  for (const auto& s : sequences) {
    if (s.inloop == inloop) {
      n += s.length();
    }
  }
  return n;
}

void Dataset::append(const Dataset& other) {
  sequences.insert(sequences.end(), other.sequences.begin(), other.sequences.end());
}

namespace {

void push_rows(std::vector<double>& out, const Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      out.push_back(m(r, c));
    }
  }
}

Matrix take_rows(const std::vector<double>& in, std::size_t& offset, Eigen::Index rows, Eigen::Index cols) {
  if (offset + static_cast<std::size_t>(rows * cols) > in.size()) {
    throw CheckpointError("filter dataset: truncated shard");
  }
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = in[offset++];
    }
  }
  return m;
}

}  // namespace

void Dataset::save(const std::filesystem::path& dir, std::size_t per_shard) const {
  std::filesystem::create_directories(dir);
  for (const auto& old : std::filesystem::directory_iterator(dir)) {
    if (old.path().extension() == ".seq") {
      std::filesystem::remove(old.path());
    }
  }
  for (std::size_t start = 0, shard = 0; start < sequences.size(); start += per_shard, ++shard) {
    Checkpoint c;
    c.kind = "filter-data";
    c.metadata["rate_hz"] = "100";
    c.metadata["layout"] = "states: x v w with quaternion wxyz; io: q qdot q_bar";
    auto& states = c.arrays["states"];
    auto& io = c.arrays["io"];
    auto& lengths = c.arrays["lengths"];
    auto& inloop = c.arrays["inloop"];
    auto& episode = c.arrays["episode"];
    for (std::size_t i = start; i < std::min(sequences.size(), start + per_shard); ++i) {
      const auto& s = sequences[i];
      push_rows(states, s.states);
      push_rows(io, s.io);
      lengths.push_back(static_cast<double>(s.length()));
      inloop.push_back(s.inloop ? 1.0 : 0.0);
      episode.push_back(static_cast<double>(s.episode));
    }
    char name[32];
    std::snprintf(name, sizeof(name), "shard_%04zu.seq", shard);
    save_checkpoint(c, dir / name);
  }
}

Dataset Dataset::load(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw CheckpointError("filter dataset: no such directory " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() == ".seq") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  Dataset d;
  for (const auto& f : files) {
    const Checkpoint c = load_checkpoint(f);
    if (c.kind != "filter-data") {
      throw CheckpointError("filter dataset: unexpected kind in " + f.string());
    }
    const auto& lengths = c.array("lengths");
    std::size_t so = 0;
    std::size_t io = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      const auto t = static_cast<Eigen::Index>(lengths[i]);
      Sequence s;
      s.states = take_rows(c.array("states"), so, t + 1, kStateDim);
      s.io = take_rows(c.array("io"), io, t, 36);
      s.inloop = c.array("inloop").at(i) != 0.0;
      s.episode = static_cast<std::uint64_t>(c.array("episode").at(i));
      d.sequences.push_back(std::move(s));
    }
  }
  return d;
}

namespace {

struct SequenceBuilder {
  std::vector<Matrix> states;
  std::vector<Eigen::VectorXd> io;
  std::uint64_t episode = 0;

  void start(const CubeState& s, std::uint64_t ep) {
    states.assign(1, state_row(s));
    io.clear();
    episode = ep;
  }
  /// The first `len` steps.
  Sequence build(bool inloop, std::size_t len) const {
    Sequence s;
    s.states.resize(static_cast<Eigen::Index>(len + 1), kStateDim);
    for (std::size_t i = 0; i <= len; ++i) {
      s.states.row(static_cast<Eigen::Index>(i)) = states[i];
    }
    s.io.resize(static_cast<Eigen::Index>(len), 36);
    for (std::size_t i = 0; i < len; ++i) {
      s.io.row(static_cast<Eigen::Index>(i)) = io[i].transpose();
    }
    s.inloop = inloop;
    s.episode = episode;
    return s;
  }
};

}  // namespace

Dataset collect_sequences(const CollectConfig& cfg, const policy::PolicyFn& policy, std::int64_t samples,
                          std::uint64_t seed, const policy::EstimatorFactory& estimator, CollectStats* stats) {
  if (cfg.sequence_length <= 0 || cfg.workers <= 0) {
    throw std::invalid_argument("collect_sequences: bad configuration");
  }
  std::vector<std::unique_ptr<policy::Worker>> workers;
  for (int i = 0; i < cfg.workers; ++i) {
    workers.push_back(std::make_unique<policy::Worker>(cfg.worker, seed * 1000003ULL + static_cast<std::uint64_t>(i),
                                                       estimator));
  }
  std::vector<SequenceBuilder> builders(workers.size());
  std::vector<bool> active(workers.size(), false);
  Dataset out;
  std::int64_t have = 0;
  CollectStats local;

  while (have < samples) {
    for (std::size_t k = 0; k < workers.size() && have < samples; ++k) {
      auto& w = *workers[k];
      auto& b = builders[k];
      const auto t = w.step(policy);
      ++local.policy_steps;
      for (const auto& e : w.take_finished()) {
        ++local.episodes;
        local.successful_episodes += e.goals_reached > 0 ? 1 : 0;
      }
      if (!t) {
        active[k] = false;
        continue;
      }
      const std::uint64_t ep = (static_cast<std::uint64_t>(k) << 40) + w.episode_index();
      if (!active[k] || b.episode != ep) {
        b.start(w.episode_start_state(), ep);
        active[k] = true;
      }
      for (const auto& s : w.last_samples()) {
        b.io.push_back(FilterIO::from_sample(s).to_vector());
        b.states.push_back(state_row(s.cube));
        const auto len = static_cast<std::int64_t>(b.io.size());
        // Only emitted sequences count; partial ones cut by an episode end are dropped.
        if (len == cfg.sequence_length || have + len >= samples) {
          const std::int64_t keep = std::min(len, samples - have);
          out.sequences.push_back(b.build(cfg.inloop, static_cast<std::size_t>(keep)));
          have += keep;
          b.start(s.cube, ep);
          if (have == samples) {
            break;
          }
        }
      }
    }
  }
  if (stats) {
    *stats = local;
  }
  return out;
}

}  // namespace reorient::filter
