#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "reorient/rotations.hpp"

namespace reorient {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Versioned binary container: named double arrays, integer shape lists and
/// string metadata. Policy and filter checkpoints are both stored this way.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;  // "policy" or "filter"
  std::map<std::string, std::string> metadata;
  std::map<std::string, std::vector<double>> arrays;
  std::map<std::string, std::vector<int>> shapes;

  const std::vector<double>& array(const std::string& name) const;
  const std::vector<int>& shape(const std::string& name) const;
  const std::string& meta(const std::string& name) const;
  std::string meta_or(const std::string& name, const std::string& fallback) const;
};

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string rng_to_string(const Rng& rng);
void rng_from_string(Rng& rng, const std::string& s);

}  // namespace reorient
