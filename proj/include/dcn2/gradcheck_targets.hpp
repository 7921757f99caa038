#pragma once

#include <string>
#include <vector>

#include "dcn2/finite_diff.hpp"

namespace dcn2 {

/// A differentiable operation registered for gradient checking. Each seed
/// builds a small random double-precision instance; sampling coordinates are
/// rejection-sampled to stay at least `kLatticeMargin` away from integer
/// lattice lines, where bilinear interpolation is not differentiable.
struct GradcheckTarget {
  std::string name;
  std::vector<std::string> blocks;
  InstanceGenerator generate;
};

inline constexpr double kLatticeMargin = 1e-2;

const std::vector<GradcheckTarget>& gradcheck_registry();

/// Targets whose name matches `pattern`: "all", an exact name, or a prefix
/// ending in '*'. Throws UsageError when nothing matches.
std::vector<const GradcheckTarget*> match_targets(const std::string& pattern);

}  // namespace dcn2
