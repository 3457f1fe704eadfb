#pragma once

#include <cstdint>
#include <string>

#include "hwids/cnn.hpp"
#include "hwids/trees.hpp"
#include "json.hpp"

namespace hwids::hwcost {

/// 1 KB = 1000 bytes throughout (budgets and reports).
inline constexpr std::uint64_t kBytesPerKb = 1000;

/// Deployment layout constants for tree ensembles.
inline constexpr std::uint64_t kTreeNodeBytes = 16;
inline constexpr std::uint64_t kTreeHeaderBytes = 8;
inline constexpr std::uint64_t kTraversalFrameBytes = 8;
inline constexpr std::uint64_t kTreeFixedStateBytes = 64;
inline constexpr std::uint64_t kScalarBytes = 4;

struct Budget {
  std::uint64_t flash_max = 300 * kBytesPerKb;
  std::uint64_t ram_max = 50 * kBytesPerKb;
  std::uint64_t compute_max = 1'500'000;

  static Budget unbounded();
};

enum class ComputeUnit : std::uint8_t { Ops = 0, Flops = 1 };

struct Profile {
  std::uint64_t flash_bytes = 0;
  std::uint64_t ram_bytes = 0;
  std::uint64_t compute = 0;
  ComputeUnit unit = ComputeUnit::Ops;

  bool operator==(const Profile&) const = default;
};

void to_json(nlohmann::json& j, const Profile& p);
void from_json(const nlohmann::json& j, Profile& p);
void to_json(nlohmann::json& j, const Budget& b);

/// flash = sum(nodes * 16 + 8); ops = sum(depth + 1);
/// ram = max_depth * 8 + n_classes * 4 + d * 4 + 64.
Profile profile_tree_ensemble(const trees::Ensemble& m);

/// Per-inference FLOPs (MAC = 2, bias = 1), 4-byte parameter storage, and
/// ping-pong activation RAM. Throws ConfigError on invalid geometry.
Profile profile_cnn(const cnn::Arch& arch);

/// Parameter count implied by the architecture (BN running stats included).
std::uint64_t cnn_parameter_count(const cnn::Arch& arch);

struct Verdict {
  bool feasible = true;
  bool flash_ok = true;
  bool ram_ok = true;
  bool compute_ok = true;
  // budget - usage per axis; negative when violated.
  double flash_slack = 0.0;
  double ram_slack = 0.0;
  double compute_slack = 0.0;
};

Verdict check_budget(const Profile& p, const Budget& b);

}  // namespace hwids::hwcost
