// dcn2 command line: gradcheck, bench, demo-train, saliency, erf.
// Exit codes: 0 success, 1 failed check, 2 usage, 3 numeric divergence, 4 I/O.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>

#include "dcn2/bench.hpp"
#include "dcn2/gradcheck_targets.hpp"
#include "dcn2/image_io.hpp"
#include "dcn2/probes.hpp"
#include "dcn2/support_analysis.hpp"
#include "dcn2/trainer.hpp"

namespace {

using namespace dcn2;

struct Global {
  std::uint64_t seed = 0;
  std::optional<int> threads;
  bool deterministic = false;
  std::string out;
  std::string config;

  Execution exec() const {
    Execution e = Execution::from_env();
    if (threads) e.threads = std::max(1, *threads);
    e.deterministic = deterministic;
    return e;
  }
};

std::string read_text(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path.string(), {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::filesystem::path out_dir(const Global& g, const std::string& fallback) {
  const std::filesystem::path dir = g.out.empty() ? fallback : g.out;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

int cmd_gradcheck(const Global& g, const std::string& op, int seeds) {
  if (seeds < 0) throw UsageError("--seeds must be >= 0");
  const auto targets = match_targets(op);
  std::vector<std::uint64_t> seed_list;
  for (int i = 0; i < seeds; ++i) seed_list.push_back(g.seed + static_cast<std::uint64_t>(i));
  std::string lines;
  bool ok = true;
  for (const GradcheckTarget* t : targets) {
    for (const GradCheckReport& r : gradcheck_seeds(t->name, t->generate, seed_list, {}, g.exec())) {
      lines += r.json_line() + "\n";
      ok = ok && r.pass;
    }
  }
  std::cout << lines;
  if (!g.out.empty()) write_text(out_dir(g, "") / "gradcheck.jsonl", lines);
  return ok ? 0 : 1;
}

int cmd_bench(const Global& g, const std::vector<std::int64_t>& shape, std::int64_t outc, int kernel, int repeats,
              bool use_double) {
  if (shape.size() != 4) throw UsageError("--shape takes N,C,H,W");
  if (kernel < 1 || kernel % 2 == 0) throw UsageError("--kernel must be a positive odd size");
  BenchOptions o;
  o.input = Dims{shape[0], shape[1], shape[2], shape[3]};
  o.out_channels = outc;
  o.kernel.kernel_h = o.kernel.kernel_w = kernel;
  o.kernel.pad_h = o.kernel.pad_w = kernel / 2;
  o.repeats = repeats;
  o.use_double = use_double;
  o.seed = g.seed;
  o.exec = g.exec();
  BenchReport rep;
  try {
    rep = run_bench(o);
  } catch (const ArgumentError& e) {
    throw UsageError(e.what());
  }
  std::cout << rep.text();
  if (!g.out.empty()) write_text(out_dir(g, "") / "bench.json", rep.json());
  return 0;
}

struct TrainArgs {
  std::string preset = "mdconv";
  std::string task = "dilate";
  std::string target;
  int factor = 3;
  int size = 32;
  int steps = 500;
};

int cmd_demo_train(const Global& g, const TrainArgs& a) {
  ToyNetConfig cfg = g.config.empty() ? toy_preset(a.preset) : toy_config_from_json(read_text(g.config));
  TrainOptions opts;
  opts.task.mode = task_mode_from_string(a.task);
  opts.task.target = a.target.empty() ? (cfg.mimic ? TaskTarget::detection : TaskTarget::regression)
                                      : task_target_from_string(a.target);
  opts.task.factor = a.factor;
  opts.task.size = a.size;
  opts.steps = a.steps;
  opts.seed = g.seed;
  opts.exec = g.exec();
  const TrainMetrics m = train(cfg, opts);
  const std::string json = m.to_json(cfg, opts);
  if (g.out.empty()) {
    std::cout << json;
  } else {
    const auto dir = out_dir(g, "");
    write_text(dir / "metrics.json", json);
    if (!m.model_json.empty()) write_text(dir / "model.json", m.model_json);
    std::printf("final_eval %.6g after %d steps; wrote %s\n", m.final_eval, a.steps, dir.string().c_str());
  }
  return 0;
}

std::optional<RoI> parse_aspect(const std::string& text) {
  if (text.empty()) return std::nullopt;
  const auto rois = parse_roi_list("0 " + text);
  if (rois.size() != 1) throw UsageError("--roi takes 'x1 y1 x2 y2'");
  return rois[0];
}

int cmd_saliency(const Global& g, const std::string& image, const std::string& model, const std::string& node,
                 double epsilon, const std::string& roi) {
  const Tensor img = load_image(image);
  const NodeProbe probe = resolve_probe(node, model, g.exec());
  SaliencyOptions opts;
  opts.epsilon = epsilon;
  try {
    opts.aspect = parse_aspect(roi);
  } catch (const FormatError& e) {
    throw UsageError(std::string("bad --roi: ") + e.what());
  }
  const SaliencyResult res = saliency_region(probe, img, opts);
  const auto dir = out_dir(g, "dcn2_out");
  save_mask_pgm((dir / "saliency_mask.pgm").string(), res.mask.mask, res.mask.height, res.mask.width);
  const std::string report = saliency_report_json(res);
  write_text(dir / "saliency.json", report);
  std::cout << report;
  return 0;
}

int cmd_erf(const Global& g, const std::string& image, const std::string& model, const std::string& node) {
  const Tensor img = load_image(image);
  const NodeProbe probe = resolve_probe(node, model, g.exec());
  const Tensor erf = effective_receptive_field(probe, img);
  double peak = 0.0, total = 0.0;
  for (float v : erf.data()) {
    peak = std::max(peak, static_cast<double>(v));
    total += v;
  }
  Tensor shown = erf;
  if (peak > 0.0) {
    for (float& v : shown.data()) v = static_cast<float>(v / peak);
  }
  const auto dir = out_dir(g, "dcn2_out");
  save_image((dir / "erf.pgm").string(), shown);
  nlohmann::ordered_json j;
  j["height"] = erf.dims().h;
  j["width"] = erf.dims().w;
  j["max"] = peak;
  j["sum"] = total;
  j["nonzero"] = std::count_if(erf.data().begin(), erf.data().end(), [](float v) { return v != 0.0f; });
  const std::string report = j.dump(2) + "\n";
  write_text(dir / "erf.json", report);
  std::cout << report;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modulated deformable convolution / RoI pooling toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--seed", g.seed, "base random seed");
  app.add_option("--threads", g.threads, "worker threads (default: $DCN2_THREADS, else 1)");
  app.add_flag("--deterministic", g.deterministic, "ordered reductions, bit-identical across thread counts");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--config", g.config, "toy network config (JSON) for demo-train");

  std::string op = "all";
  int seeds = 50;
  auto* gc = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
  gc->add_option("--op", op, "op name, prefix*, or 'all'");
  gc->add_option("--seeds", seeds, "seeds per op");

  std::vector<std::int64_t> shape{1, 64, 128, 128};
  std::int64_t outc = 64;
  int kernel = 3, repeats = 3;
  bool use_double = false;
  auto* bench = app.add_subcommand("bench", "reference vs optimized mdconv forward, plus layer costs");
  bench->add_option("--shape", shape, "input N,C,H,W")->delimiter(',')->expected(4);
  bench->add_option("--out-channels", outc);
  bench->add_option("--kernel", kernel, "odd square kernel size");
  bench->add_option("--repeats", repeats);
  bench->add_flag("--double", use_double, "time double precision instead of float");

  TrainArgs ta;
  auto* demo = app.add_subcommand("demo-train", "train a toy net on a synthetic task");
  demo->add_option("--preset", ta.preset, "rigid | dconv | mdconv | mimic (ignored with --config)");
  demo->add_option("--task", ta.task, "translate | dilate | scale-jitter");
  demo->add_option("--target", ta.target, "regression | detection (default: detection iff mimic)");
  demo->add_option("--factor", ta.factor, "dilation / shift / max scale");
  demo->add_option("--size", ta.size, "image side");
  demo->add_option("--steps", ta.steps);

  std::string image, model, node, roi;
  double epsilon = 0.1;
  auto* sal = app.add_subcommand("saliency", "error-bounded saliency region of a node");
  sal->add_option("--image", image, "PGM/PPM input")->required();
  sal->add_option("--model", model, "model.json written by demo-train");
  sal->add_option("--node", node, "window:X,Y,W,H | constant:C | output:X,Y | layerI:X,Y")->required();
  sal->add_option("--epsilon", epsilon);
  sal->add_option("--roi", roi, "grow with this box's aspect ratio: 'x1 y1 x2 y2'");
  auto* erf = app.add_subcommand("erf", "effective receptive field of a node");
  erf->add_option("--image", image, "PGM/PPM input")->required();
  erf->add_option("--model", model, "model.json written by demo-train");
  erf->add_option("--node", node, "window:X,Y,W,H | constant:C | output:X,Y | layerI:X,Y")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gc) return cmd_gradcheck(g, op, seeds);
    if (*bench) return cmd_bench(g, shape, outc, kernel, repeats, use_double);
    if (*demo) return cmd_demo_train(g, ta);
    if (*sal) return cmd_saliency(g, image, model, node, epsilon, roi);
    if (*erf) return cmd_erf(g, image, model, node);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << " (step " << e.step() << ")\n";
    return 3;
  } catch (const ConvergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const CapabilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const FormatError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
