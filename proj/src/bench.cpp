#include "dcn2/bench.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <random>

namespace dcn2 {

namespace {

template <typename T>
void run_typed(BenchReport& rep) {
  const BenchOptions& o = rep.opts;
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const KernelSpec& k = o.kernel;
  const std::int64_t oh = k.out_h(o.input.h);
  const std::int64_t ow = k.out_w(o.input.w);
  if (oh < 1 || ow < 1) throw ArgumentError("kernel does not fit the input");

  BasicTensor<T> x(o.input);
  for (T& v : x.data()) v = static_cast<T>(sym(rng));
  ConvWeights<T> w{BasicTensor<T>(Dims{o.out_channels, o.input.c, k.kernel_h, k.kernel_w}),
                   std::vector<T>(static_cast<std::size_t>(o.out_channels))};
  const double scale = 1.0 / std::sqrt(static_cast<double>(o.input.c * k.taps()));
  for (T& v : w.weight.data()) v = static_cast<T>(scale * sym(rng));
  for (T& v : w.bias) v = static_cast<T>(0.1 * sym(rng));
  OffsetModulationField<T> f = make_field<T>(o.input.n, k.taps(), oh, ow, T(0), T(1), true);
  for (T& v : f.offsets.data()) v = static_cast<T>(2.0 * sym(rng));
  for (T& v : f.modulation.data()) v = static_cast<T>(unit(rng));

  using clock = std::chrono::steady_clock;
  auto best_of = [&](auto&& fn, BasicTensor<T>& out) {
    double best = INFINITY;
    for (int r = 0; r < o.repeats; ++r) {
      const auto t0 = clock::now();
      out = fn();
      best = std::min(best, std::chrono::duration<double, std::milli>(clock::now() - t0).count());
    }
    return best;
  };
  BasicTensor<T> ref, opt;
  rep.reference_ms = best_of([&] { return mdconv_forward(x, w, k, f); }, ref);
  rep.optimized_ms = best_of([&] { return mdconv_forward_optimized(x, w, k, f, o.exec); }, opt);
  for (std::int64_t i = 0; i < ref.size(); ++i) {
    rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(static_cast<double>(ref[i]) - static_cast<double>(opt[i])));
  }
}

}  // namespace

BenchReport run_bench(const BenchOptions& opts) {
  if (opts.repeats < 1) throw ArgumentError("repeats must be >= 1");
  if (opts.input.n < 1 || opts.input.c < 1 || opts.input.h < 1 || opts.input.w < 1 || opts.out_channels < 1) {
    throw ArgumentError("bench shape must be positive");
  }
  opts.kernel.validate();
  BenchReport rep;
  rep.opts = opts;
  if (opts.use_double) {
    run_typed<double>(rep);
  } else {
    run_typed<float>(rep);
  }
  for (LayerKind kind : {LayerKind::regular, LayerKind::dconv, LayerKind::mdconv}) {
    rep.costs.push_back(
        {kind, layer_cost(kind, opts.input.c, opts.out_channels, opts.input.h, opts.input.w, opts.kernel)});
  }
  return rep;
}

std::string BenchReport::text() const {
  const KernelSpec& k = opts.kernel;
  std::string s;
  char line[256];
  std::snprintf(line, sizeof line, "input %s, %lld outputs, %dx%d kernel, %s, %d thread(s), best of %d\n",
                opts.input.str().c_str(), static_cast<long long>(opts.out_channels), k.kernel_h, k.kernel_w,
                opts.use_double ? "double" : "float", opts.exec.threads, opts.repeats);
  s += line;
  std::snprintf(line, sizeof line, "  reference  %10.2f ms\n  optimized  %10.2f ms  (%.2fx, max |diff| %.3g)\n",
                reference_ms, optimized_ms, speedup(), max_abs_diff);
  s += line;
  std::snprintf(line, sizeof line, "  %-8s %12s %16s %16s\n", "layer", "params", "MACs", "FLOPs");
  s += line;
  for (const CostRow& r : costs) {
    std::snprintf(line, sizeof line, "  %-8s %12lld %16lld %16lld\n", to_string(r.kind).c_str(),
                  static_cast<long long>(r.cost.params), static_cast<long long>(r.cost.macs),
                  static_cast<long long>(r.cost.flops()));
    s += line;
  }
  return s;
}

std::string BenchReport::json() const {
  using nlohmann::ordered_json;
  ordered_json j;
  j["input"] = {opts.input.n, opts.input.c, opts.input.h, opts.input.w};
  j["out_channels"] = opts.out_channels;
  j["kernel"] = {opts.kernel.kernel_h, opts.kernel.kernel_w};
  j["dtype"] = opts.use_double ? "double" : "float";
  j["threads"] = opts.exec.threads;
  j["repeats"] = opts.repeats;
  j["reference_ms"] = reference_ms;
  j["optimized_ms"] = optimized_ms;
  j["speedup"] = speedup();
  j["max_abs_diff"] = max_abs_diff;
  ordered_json rows = ordered_json::array();
  for (const CostRow& r : costs) {
    rows.push_back({{"layer", to_string(r.kind)},
                    {"params", r.cost.params},
                    {"macs", r.cost.macs},
                    {"flops", r.cost.flops()}});
  }
  j["costs"] = rows;
  return j.dump(2) + "\n";
}

}  // namespace dcn2
