#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcn2/conv_types.hpp"
#include "dcn2/deform_conv.hpp"
#include "dcn2/parallel.hpp"

namespace dcn2 {

struct BenchOptions {
  Dims input{1, 64, 128, 128};
  std::int64_t out_channels = 64;
  KernelSpec kernel{};
  int repeats = 3;
  bool use_double = false;
  std::uint64_t seed = 0;
  Execution exec{};
};

struct CostRow {
  LayerKind kind = LayerKind::regular;
  LayerCost cost;
};

struct BenchReport {
  BenchOptions opts;
  double reference_ms = 0.0;  // best of `repeats`
  double optimized_ms = 0.0;
  double max_abs_diff = 0.0;  // optimized vs reference output
  std::vector<CostRow> costs;

  double speedup() const { return optimized_ms > 0.0 ? reference_ms / optimized_ms : 0.0; }
  std::string text() const;
  std::string json() const;
};

/// Times the reference and optimized mdconv forward on random data (random
/// offsets within +-2 px, modulation in [0, 1]) and tabulates layer costs.
BenchReport run_bench(const BenchOptions& opts);

}  // namespace dcn2
