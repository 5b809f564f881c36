#include "reorient/checkpoint.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include <cereal/archives/binary.hpp>
#include <cereal/types/map.hpp>
#include <cereal/types/string.hpp>
#include <cereal/types/vector.hpp>

namespace reorient {

namespace {
constexpr std::array<char, 8> kMagic{'R', 'E', 'O', 'R', 'C', 'K', 'P', 'T'};
}

const std::vector<double>& Checkpoint::array(const std::string& name) const {
  const auto it = arrays.find(name);
  if (it == arrays.end()) {
    throw CheckpointError("checkpoint has no array '" + name + "'");
  }
  return it->second;
}

const std::vector<int>& Checkpoint::shape(const std::string& name) const {
  const auto it = shapes.find(name);
  if (it == shapes.end()) {
    throw CheckpointError("checkpoint has no shape '" + name + "'");
  }
  return it->second;
}

const std::string& Checkpoint::meta(const std::string& name) const {
  const auto it = metadata.find(name);
  if (it == metadata.end()) {
    throw CheckpointError("checkpoint has no metadata '" + name + "'");
  }
  return it->second;
}

std::string Checkpoint::meta_or(const std::string& name, const std::string& fallback) const {
  const auto it = metadata.find(name);
  return it == metadata.end() ? fallback : it->second;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  // Write to a sibling file and rename so a crash never leaves a torn checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) {
      throw CheckpointError("cannot open " + tmp.string() + " for writing");
    }
    out.write(kMagic.data(), kMagic.size());
    cereal::BinaryOutputArchive ar(out);
    ar(Checkpoint::kVersion, c.kind, c.metadata, c.arrays, c.shapes);
    if (!out) {
      throw CheckpointError("write failed for " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw CheckpointError("cannot open checkpoint " + path.string());
  }
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) {
    throw CheckpointError(path.string() + " is not a checkpoint file");
  }
  Checkpoint c;
  std::uint32_t version = 0;
  try {
    cereal::BinaryInputArchive ar(in);
    ar(version);
    if (version != Checkpoint::kVersion) {
      throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(Checkpoint::kVersion) + ")");
    }
    ar(c.kind, c.metadata, c.arrays, c.shapes);
  } catch (const cereal::Exception& e) {
    throw CheckpointError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
  return c;
}

std::string rng_to_string(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(Rng& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) {
    throw CheckpointError("invalid RNG state in checkpoint");
  }
}

}  // namespace reorient
