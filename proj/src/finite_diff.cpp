#include "dcn2/finite_diff.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>

#include "dcn2/error.hpp"

namespace dcn2 {

std::vector<double> finite_diff(const std::function<double()>& f, std::span<double> block, double h) {
  if (!(h > 0.0)) throw OracleError("finite-difference step must be > 0");
  std::vector<double> grad(block.size());
  for (std::size_t i = 0; i < block.size(); ++i) {
    const double saved = block[i];
    block[i] = saved + h;
    const double up = f();
    block[i] = saved - h;
    const double down = f();
    block[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw OracleError("loss is not finite when perturbing entry " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

BlockReport compare_block(const std::string& name, std::span<const double> analytic, std::span<const double> numeric,
                          const CheckTolerance& tol) {
  if (analytic.size() != numeric.size()) throw OracleError("block '" + name + "' gradient sizes differ");
  BlockReport r;
  r.name = name;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    if (!std::isfinite(a)) {
      r.pass = false;
      r.max_rel = std::numeric_limits<double>::infinity();
      ++r.compared;
      continue;
    }
    if (std::abs(a) + std::abs(n) <= tol.floor) {
      ++r.skipped;
      continue;
    }
    ++r.compared;
    r.max_abs = std::max(r.max_abs, std::abs(a - n));
    r.max_rel = std::max(r.max_rel, relative_error(a, n));
  }
  r.pass = r.pass && r.max_rel < tol.rel;
  return r;
}

std::string GradCheckReport::json_line() const {
  nlohmann::json blocks_json = nlohmann::json::array();
  for (const BlockReport& b : blocks) {
    blocks_json.push_back({{"name", b.name},
                           {"max_rel", b.max_rel},
                           {"max_abs", b.max_abs},
                           {"compared", b.compared},
                           {"skipped", b.skipped},
                           {"pass", b.pass}});
  }
  nlohmann::json j{{"op", op}, {"seed", seed}, {"pass", pass}, {"blocks", blocks_json}};
  if (!error.empty()) j["error"] = error;
  return j.dump();
}

GradCheckReport gradcheck(const std::string& op, const InstanceGenerator& gen, std::uint64_t seed,
                          const CheckTolerance& tol) {
  GradCheckReport report;
  report.op = op;
  report.seed = seed;
  try {
    std::mt19937_64 rng(seed);
    GradInstance inst = gen(rng);
    for (GradBlock& b : inst.blocks) {
      const std::vector<double> numeric = finite_diff(inst.loss, b.params, tol.step);
      report.blocks.push_back(compare_block(b.name, b.analytic, numeric, tol));
      report.pass = report.pass && report.blocks.back().pass;
    }
  } catch (const std::exception& e) {
    report.pass = false;
    report.error = e.what();
  }
  return report;
}

std::vector<GradCheckReport> gradcheck_seeds(const std::string& op, const InstanceGenerator& gen,
                                             std::span<const std::uint64_t> seeds, const CheckTolerance& tol,
                                             const Execution& exec) {
  std::vector<GradCheckReport> reports(seeds.size());
  parallel_for(exec, 0, static_cast<std::int64_t>(seeds.size()), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      reports[static_cast<std::size_t>(i)] = gradcheck(op, gen, seeds[static_cast<std::size_t>(i)], tol);
    }
  });
  return reports;
}

}  // namespace dcn2
