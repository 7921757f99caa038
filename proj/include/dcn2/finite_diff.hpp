#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dcn2/parallel.hpp"

namespace dcn2 {

/// Central differences (f(t + h e_i) - f(t - h e_i)) / 2h for every entry of
/// `block`. `f` reads the block in place; each entry is restored after use.
/// Throws OracleError if f returns a non-finite value.
std::vector<double> finite_diff(const std::function<double()>& f, std::span<double> block, double h = 1e-3);

/// |a - n| / max(|a|, |n|, 1e-6)
double relative_error(double analytic, double numeric);

struct BlockReport {
  std::string name;
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::int64_t compared = 0;
  std::int64_t skipped = 0;  // |a| + |n| at or below the floor
  bool pass = true;
};

struct GradCheckReport {
  std::string op;
  std::uint64_t seed = 0;
  std::vector<BlockReport> blocks;
  bool pass = true;
  std::string error;  // set when the instance could not be evaluated

  /// One JSON object on a single line.
  std::string json_line() const;
};

struct CheckTolerance {
  double rel = 1e-3;
  double floor = 1e-8;
  double step = 1e-3;
};

BlockReport compare_block(const std::string& name, std::span<const double> analytic, std::span<const double> numeric,
                          const CheckTolerance& tol = {});

/// One differentiable instance: a scalar loss reading its parameter blocks in
/// place, and the analytic gradient of every block at the current values.
struct GradBlock {
  std::string name;
  std::span<double> params;
  std::vector<double> analytic;
};

struct GradInstance {
  std::function<double()> loss;
  std::vector<GradBlock> blocks;
};

using InstanceGenerator = std::function<GradInstance(std::mt19937_64&)>;

/// Builds the instance for `seed` and compares every block against finite
/// differences. Failures are report contents, never exceptions.
GradCheckReport gradcheck(const std::string& op, const InstanceGenerator& gen, std::uint64_t seed,
                          const CheckTolerance& tol = {});

/// Runs seeds in parallel (each check single-threaded); reports come back in
/// seed order.
std::vector<GradCheckReport> gradcheck_seeds(const std::string& op, const InstanceGenerator& gen,
                                             std::span<const std::uint64_t> seeds, const CheckTolerance& tol = {},
                                             const Execution& exec = {});

}  // namespace dcn2
