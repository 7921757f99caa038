#include "dcn2/toy_net.hpp"

#include <cmath>
#include <json.hpp>

namespace dcn2 {

namespace {

using nlohmann::json;

json pair_json(int a, int b) { return json::array({a, b}); }

std::pair<int, int> read_pair(const json& j, const char* key, std::pair<int, int> fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer()) {
    throw ConfigError(std::string("'") + key + "' must be a pair of integers");
  }
  return {v[0].get<int>(), v[1].get<int>()};
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("'") + key + "' has the wrong type");
  }
}

void gaussian_fill(std::span<double> v, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& e : v) e = dist(rng);
}

void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

ConvWeights<double> zeros_like(const ConvWeights<double>& w) {
  return {TensorD(w.weight.dims()), std::vector<double>(w.bias.size(), 0.0)};
}

void relu(TensorD& t) {
  for (double& v : t.data()) v = v > 0.0 ? v : 0.0;
}

}  // namespace

void ToyNetConfig::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ConfigError("channel counts must be >= 1");
  if (layers.empty()) throw ConfigError("a toy net needs at least one conv layer");
  for (const ToyLayerConfig& l : layers) {
    if (l.channels < 1) throw ConfigError("layer widths must be >= 1");
    try {
      l.kernel.validate();
    } catch (const ArgumentError& e) {
      throw ConfigError(std::string("bad layer kernel: ") + e.what());
    }
  }
  try {
    pool.spec.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("bad pool spec: ") + e.what());
  }
  if (pool.branch_hidden < 1 || feature_dim < 1 || num_classes < 1) throw ConfigError("head widths must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(optim.lr > 0.0) || !(optim.momentum >= 0.0) || !(optim.weight_decay >= 0.0) || !(optim.branch_lr_mult >= 0.0)) {
    throw ConfigError("optimizer settings out of range");
  }
  mimic_cfg.validate();
}

std::string toy_config_to_json(const ToyNetConfig& cfg) {
  json layers = json::array();
  for (const ToyLayerConfig& l : cfg.layers) {
    const KernelSpec& k = l.kernel;
    layers.push_back({{"kind", to_string(l.kind)},
                      {"channels", l.channels},
                      {"kernel", pair_json(k.kernel_h, k.kernel_w)},
                      {"stride", pair_json(k.stride_h, k.stride_w)},
                      {"pad", pair_json(k.pad_h, k.pad_w)},
                      {"dilation", pair_json(k.dilation_h, k.dilation_w)}});
  }
  json mimic = json::parse(mimic_config_to_json(cfg.mimic_cfg));
  mimic["enabled"] = cfg.mimic;
  const json j{
      {"in_channels", cfg.in_channels},
      {"layers", layers},
      {"relu", cfg.relu},
      {"out_channels", cfg.out_channels},
      {"pool",
       {{"deformable", cfg.pool.deformable},
        {"bins", pair_json(cfg.pool.spec.bins_h, cfg.pool.spec.bins_w)},
        {"samples", cfg.pool.spec.samples},
        {"branch_hidden", cfg.pool.branch_hidden}}},
      {"feature_dim", cfg.feature_dim},
      {"num_classes", cfg.num_classes},
      {"mimic", mimic},
      {"optimizer",
       {{"lr", cfg.optim.lr},
        {"momentum", cfg.optim.momentum},
        {"weight_decay", cfg.optim.weight_decay},
        {"branch_lr_mult", cfg.optim.branch_lr_mult}}},
      {"batch", cfg.batch},
  };
  return j.dump(2);
}

ToyNetConfig toy_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("toy config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("toy config must be a JSON object");
  reject_unknown(j,
                 {"in_channels", "layers", "relu", "out_channels", "pool", "feature_dim", "num_classes", "mimic",
                  "optimizer", "batch"},
                 "toy config");
  ToyNetConfig cfg;
  cfg.in_channels = get_or(j, "in_channels", cfg.in_channels);
  cfg.relu = get_or(j, "relu", cfg.relu);
  cfg.out_channels = get_or(j, "out_channels", cfg.out_channels);
  cfg.feature_dim = get_or(j, "feature_dim", cfg.feature_dim);
  cfg.num_classes = get_or(j, "num_classes", cfg.num_classes);
  cfg.batch = get_or(j, "batch", cfg.batch);

  if (j.contains("layers")) {
    if (!j["layers"].is_array()) throw ConfigError("'layers' must be an array");
    cfg.layers.clear();
    for (const json& l : j["layers"]) {
      if (!l.is_object()) throw ConfigError("each layer must be an object");
      reject_unknown(l, {"kind", "channels", "kernel", "stride", "pad", "dilation"}, "layer");
      ToyLayerConfig lc;
      lc.kind = layer_kind_from_string(get_or<std::string>(l, "kind", to_string(lc.kind)));
      lc.channels = get_or(l, "channels", lc.channels);
      KernelSpec& k = lc.kernel;
      std::tie(k.kernel_h, k.kernel_w) = read_pair(l, "kernel", {k.kernel_h, k.kernel_w});
      std::tie(k.stride_h, k.stride_w) = read_pair(l, "stride", {k.stride_h, k.stride_w});
      std::tie(k.pad_h, k.pad_w) = read_pair(l, "pad", {k.pad_h, k.pad_w});
      std::tie(k.dilation_h, k.dilation_w) = read_pair(l, "dilation", {k.dilation_h, k.dilation_w});
      cfg.layers.push_back(lc);
    }
  }
  if (j.contains("pool")) {
    const json& p = j["pool"];
    if (!p.is_object()) throw ConfigError("'pool' must be an object");
    reject_unknown(p, {"deformable", "bins", "samples", "branch_hidden"}, "pool");
    cfg.pool.deformable = get_or(p, "deformable", cfg.pool.deformable);
    std::tie(cfg.pool.spec.bins_h, cfg.pool.spec.bins_w) =
        read_pair(p, "bins", {cfg.pool.spec.bins_h, cfg.pool.spec.bins_w});
    cfg.pool.spec.samples = get_or(p, "samples", cfg.pool.spec.samples);
    cfg.pool.branch_hidden = get_or(p, "branch_hidden", cfg.pool.branch_hidden);
  }
  if (j.contains("mimic")) {
    json m = j["mimic"];
    if (!m.is_object()) throw ConfigError("'mimic' must be an object");
    cfg.mimic = get_or(m, "enabled", cfg.mimic);
    m.erase("enabled");
    reject_unknown(m, {"mimic_weight", "rcnn_cls_weight", "positive_iou", "omega_size", "patch_size", "stop_teacher"},
                   "mimic");
    cfg.mimic_cfg = mimic_config_from_json(m.dump());
  }
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    if (!o.is_object()) throw ConfigError("'optimizer' must be an object");
    reject_unknown(o, {"lr", "momentum", "weight_decay", "branch_lr_mult"}, "optimizer");
    cfg.optim.lr = get_or(o, "lr", cfg.optim.lr);
    cfg.optim.momentum = get_or(o, "momentum", cfg.optim.momentum);
    cfg.optim.weight_decay = get_or(o, "weight_decay", cfg.optim.weight_decay);
    cfg.optim.branch_lr_mult = get_or(o, "branch_lr_mult", cfg.optim.branch_lr_mult);
  }
  cfg.validate();
  return cfg;
}

ToyNetConfig toy_preset(const std::string& name) {
  ToyNetConfig cfg;
  if (name == "rigid") {
    cfg.layers = {{LayerKind::regular, 8, {}}};
    cfg.pool.deformable = false;
  } else if (name == "dconv") {
    cfg.layers = {{LayerKind::dconv, 8, {}}};
  } else if (name == "mdconv") {
    cfg.layers = {{LayerKind::mdconv, 8, {}}};
  } else if (name == "mimic") {
    cfg.layers = {{LayerKind::mdconv, 8, {}}};
    cfg.mimic = true;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected rigid, dconv, mdconv or mimic)");
  }
  return cfg;
}

// ---------------------------------------------------------------------------

ConvStack::ConvStack(const ToyNetConfig& cfg, std::mt19937_64& rng) : relu_(cfg.relu) {
  cfg.validate();
  std::int64_t cin = cfg.in_channels;
  for (const ToyLayerConfig& lc : cfg.layers) {
    ConvLayer layer;
    layer.cfg = lc;
    const KernelSpec& k = lc.kernel;
    layer.w.weight = TensorD(Dims{lc.channels, cin, k.kernel_h, k.kernel_w});
    gaussian_fill(layer.w.weight.data(), std::sqrt(1.0 / static_cast<double>(cin * k.taps())), rng);
    layer.w.bias.assign(static_cast<std::size_t>(lc.channels), 0.0);
    layer.grad_w = zeros_like(layer.w);
    if (layer.deformable()) {
      layer.branch = zero_offset_branch<double>(cin, k, layer.modulated());
      layer.grad_branch = zeros_like(layer.branch);
    }
    layers_.push_back(std::move(layer));
    cin = lc.channels;
  }
}

std::int64_t ConvStack::out_channels() const { return layers_.empty() ? 0 : layers_.back().cfg.channels; }

TensorD ConvStack::forward(const TensorD& x, StackTape* tape, const Execution& exec) const {
  TensorD a = x;
  for (const ConvLayer& layer : layers_) {
    const KernelSpec& k = layer.cfg.kernel;
    OffsetModulationField<double> field;
    TensorD y;
    if (layer.deformable()) {
      field = offset_branch_forward(a, layer.branch, k, layer.modulated(), exec);
      y = mdconv_forward_optimized(a, layer.w, k, field, exec);
    } else {
      y = conv2d_forward(a, layer.w, k, exec);
    }
    if (tape) {
      tape->inputs.push_back(std::move(a));
      tape->fields.push_back(std::move(field));
      tape->outputs.push_back(y);
    }
    if (relu_) relu(y);
    a = std::move(y);
  }
  return a;
}

TensorD ConvStack::backward(const StackTape& tape, const TensorD& grad_out, const Execution& exec,
                            std::size_t depth) {
  TensorD g = grad_out;
  for (std::size_t i = std::min(depth, layers_.size()); i-- > 0;) {
    ConvLayer& layer = layers_[i];
    if (relu_) {
      const auto pre = tape.outputs[i].data();
      auto gd = g.data();
      for (std::size_t e = 0; e < gd.size(); ++e) {
        if (!(pre[e] > 0.0)) gd[e] = 0.0;
      }
    }
    const KernelSpec& k = layer.cfg.kernel;
    if (layer.deformable()) {
      const ConvGrads<double> cg = mdconv_backward_optimized(tape.inputs[i], layer.w, k, tape.fields[i], g, exec);
      add_into(layer.grad_w.weight.data(), cg.grad_w.data());
      add_into(layer.grad_w.bias, cg.grad_bias);
      const ConvGrads<double> bg = offset_branch_backward(tape.inputs[i], layer.branch, k, tape.fields[i],
                                                          cg.grad_offsets, cg.grad_modulation, exec);
      add_into(layer.grad_branch.weight.data(), bg.grad_w.data());
      add_into(layer.grad_branch.bias, bg.grad_bias);
      g = cg.grad_x;
      add_into(g.data(), bg.grad_x.data());
    } else {
      const ConvGrads<double> cg = conv2d_backward(tape.inputs[i], layer.w, k, g, exec);
      add_into(layer.grad_w.weight.data(), cg.grad_w.data());
      add_into(layer.grad_w.bias, cg.grad_bias);
      g = cg.grad_x;
    }
  }
  return g;
}

void ConvStack::collect(std::vector<ParamRef>& out, double branch_mult) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    ConvLayer& l = layers_[i];
    const std::string p = "conv" + std::to_string(i);
    out.push_back({p + ".weight", l.w.weight.data(), l.grad_w.weight.data(), 1.0});
    out.push_back({p + ".bias", l.w.bias, l.grad_w.bias, 1.0});
    if (l.deformable()) {
      out.push_back({p + ".offset_branch.weight", l.branch.weight.data(), l.grad_branch.weight.data(), branch_mult});
      out.push_back({p + ".offset_branch.bias", l.branch.bias, l.grad_branch.bias, branch_mult});
    }
  }
}

void ConvStack::zero_grad() {
  for (ConvLayer& l : layers_) {
    l.grad_w.weight.fill(0.0);
    std::fill(l.grad_w.bias.begin(), l.grad_w.bias.end(), 0.0);
    if (l.deformable()) {
      l.grad_branch.weight.fill(0.0);
      std::fill(l.grad_branch.bias.begin(), l.grad_branch.bias.end(), 0.0);
    }
  }
}

std::vector<double> mean_abs_offsets(const ConvStack& stack, const StackTape& tape) {
  std::vector<double> out;
  for (std::size_t i = 0; i < stack.layers().size(); ++i) {
    if (!stack.layers()[i].deformable()) continue;
    const TensorD& off = tape.fields[i].offsets;
    double acc = 0.0;
    for (double v : off.data()) acc += std::abs(v);
    out.push_back(off.empty() ? 0.0 : acc / static_cast<double>(off.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

KernelSpec one_by_one() {
  KernelSpec k;
  k.kernel_h = k.kernel_w = 1;
  k.pad_h = k.pad_w = 0;
  return k;
}

}  // namespace

DenseNet::DenseNet(const ToyNetConfig& cfg, std::mt19937_64& rng) : cfg_(cfg), stack_(cfg, rng) {
  const std::int64_t cin = stack_.out_channels();
  head_.weight = TensorD(Dims{cfg.out_channels, cin, 1, 1});
  gaussian_fill(head_.weight.data(), std::sqrt(1.0 / static_cast<double>(cin)), rng);
  head_.bias.assign(static_cast<std::size_t>(cfg.out_channels), 0.0);
  grad_head_ = zeros_like(head_);
}

TensorD DenseNet::forward(const TensorD& x, StackTape* tape, const Execution& exec) const {
  return conv2d_forward(stack_.forward(x, tape, exec), head_, one_by_one(), exec);
}

double DenseNet::loss(const TensorD& x, const TensorD& target, const Execution& exec,
                      std::vector<double>* offsets_out) const {
  StackTape tape;
  const TensorD pred = forward(x, offsets_out ? &tape : nullptr, exec);
  if (pred.dims() != target.dims()) throw ShapeError("prediction " + pred.dims().str() + " vs target " + target.dims().str());
  double acc = 0.0;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    acc += d * d;
  }
  if (offsets_out) *offsets_out = mean_abs_offsets(stack_, tape);
  return acc / static_cast<double>(pred.size());
}

double DenseNet::loss_and_backward(const TensorD& x, const TensorD& target, const Execution& exec,
                                   std::vector<double>* offsets_out) {
  StackTape tape;
  const TensorD feat = stack_.forward(x, &tape, exec);
  const TensorD pred = conv2d_forward(feat, head_, one_by_one(), exec);
  if (pred.dims() != target.dims()) throw ShapeError("prediction " + pred.dims().str() + " vs target " + target.dims().str());
  TensorD grad(pred.dims());
  double acc = 0.0;
  const double scale = 2.0 / static_cast<double>(pred.size());
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    acc += d * d;
    grad[i] = scale * d;
  }
  const ConvGrads<double> hg = conv2d_backward(feat, head_, one_by_one(), grad, exec);
  add_into(grad_head_.weight.data(), hg.grad_w.data());
  add_into(grad_head_.bias, hg.grad_bias);
  stack_.backward(tape, hg.grad_x, exec);
  if (offsets_out) *offsets_out = mean_abs_offsets(stack_, tape);
  return acc / static_cast<double>(pred.size());
}

FeatureVec DenseNet::node(const TensorD& x, std::size_t layer, std::int64_t y, std::int64_t xx,
                          const Execution& exec) const {
  const std::size_t depth = stack_.layers().size();
  if (layer > depth) throw UsageError("node layer " + std::to_string(layer) + " out of range");
  StackTape tape;
  const TensorD out = forward(x, &tape, exec);
  const TensorD* t = &out;
  TensorD act;
  if (layer < depth) {
    act = tape.outputs[layer];
    if (cfg_.relu) relu(act);
    t = &act;
  }
  const Dims d = t->dims();
  if (d.n != 1) throw ShapeError("node probes take a single image");
  if (y < 0 || y >= d.h || xx < 0 || xx >= d.w) throw UsageError("node position outside the feature map");
  FeatureVec v(static_cast<std::size_t>(d.c));
  for (std::int64_t c = 0; c < d.c; ++c) v[static_cast<std::size_t>(c)] = (*t)(0, c, y, xx);
  return v;
}

TensorD DenseNet::node_vjp(const TensorD& x, std::size_t layer, std::int64_t y, std::int64_t xx,
                           std::span<const double> upstream, const Execution& exec) {
  const std::size_t depth = stack_.layers().size();
  if (layer > depth) throw UsageError("node layer " + std::to_string(layer) + " out of range");
  StackTape tape;
  const TensorD feat = stack_.forward(x, &tape, exec);
  const Dims d = layer < depth ? tape.outputs[layer].dims() : Dims{feat.dims().n, cfg_.out_channels, feat.dims().h,
                                                                     feat.dims().w};
  if (d.n != 1) throw ShapeError("node probes take a single image");
  if (y < 0 || y >= d.h || xx < 0 || xx >= d.w) throw UsageError("node position outside the feature map");
  if (static_cast<std::int64_t>(upstream.size()) != d.c) throw ShapeError("upstream does not match node width");
  TensorD g(d);
  for (std::int64_t c = 0; c < d.c; ++c) g(0, c, y, xx) = upstream[static_cast<std::size_t>(c)];
  if (layer == depth) {
    g = conv2d_backward(feat, head_, one_by_one(), g, exec).grad_x;
    return stack_.backward(tape, g, exec);
  }
  // backward() applies this layer's ReLU mask itself.
  return stack_.backward(tape, g, exec, layer + 1);
}

std::vector<ParamRef> DenseNet::params() {
  std::vector<ParamRef> out;
  stack_.collect(out, cfg_.optim.branch_lr_mult);
  out.push_back({"head.weight", head_.weight.data(), grad_head_.weight.data(), 1.0});
  out.push_back({"head.bias", head_.bias, grad_head_.bias, 1.0});
  return out;
}

void DenseNet::zero_grad() {
  stack_.zero_grad();
  grad_head_.weight.fill(0.0);
  std::fill(grad_head_.bias.begin(), grad_head_.bias.end(), 0.0);
}

std::string dense_model_to_json(DenseNet& net) {
  json params = json::object();
  for (const ParamRef& p : net.params()) params[p.name] = std::vector<double>(p.value.begin(), p.value.end());
  const json j{{"config", json::parse(toy_config_to_json(net.config()))}, {"params", params}};
  return j.dump() + "\n";
}

std::unique_ptr<DenseNet> dense_model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model file is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("config") || !j.contains("params") || !j["params"].is_object()) {
    throw ConfigError("model file needs 'config' and 'params'");
  }
  std::mt19937_64 rng(0);
  auto net = std::make_unique<DenseNet>(toy_config_from_json(j["config"].dump()), rng);
  const json& params = j["params"];
  for (const ParamRef& p : net->params()) {
    if (!params.contains(p.name)) throw ConfigError("model file lacks parameter '" + p.name + "'");
    const json& v = params[p.name];
    if (!v.is_array() || v.size() != p.value.size()) throw ConfigError("parameter '" + p.name + "' has the wrong size");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      if (!v[i].is_number()) throw ConfigError("parameter '" + p.name + "' holds a non-number");
      p.value[i] = v[i].get<double>();
    }
  }
  if (params.size() != net->params().size()) throw ConfigError("model file has unexpected parameters");
  return net;
}

// ---------------------------------------------------------------------------

namespace {

struct RoiPass : TrunkPass {
  StackTape tape;
  TensorD fmap;
  std::vector<RoI> rois;
  std::vector<RoiBranchCache> caches;
  std::vector<BinField<double>> fields;
  std::vector<FeatureVec> fc_in;
  std::vector<FeatureVec> fc_pre;
};

}  // namespace

RoiTrunk::RoiTrunk(const ToyNetConfig& cfg, std::mt19937_64& rng, const Execution& exec)
    : cfg_(cfg), exec_(exec), stack_(cfg, rng) {
  for (const ToyLayerConfig& l : cfg.layers) {
    if (l.kernel.out_h(64) != 64 || l.kernel.out_w(64) != 64) {
      throw ConfigError("the RoI head needs size-preserving conv layers (stride 1, matching pad)");
    }
  }
  const std::int64_t pooled = stack_.out_channels() * cfg.pool.spec.bins();
  if (cfg.pool.deformable) {
    branch_ = init_roi_branch<double>(pooled, cfg.pool.spec, rng, cfg.pool.branch_hidden);
    grad_branch_ = zeros_like(branch_);
  }
  fc_ = Affine<double>::gaussian(pooled, cfg.feature_dim, std::sqrt(2.0 / static_cast<double>(pooled)), rng);
  grad_fc_ = Affine<double>::zeros(pooled, cfg.feature_dim);
}

std::unique_ptr<TrunkPass> RoiTrunk::forward(const Tensor& images, std::span<const RoI> rois) const {
  auto pass = std::make_unique<RoiPass>();
  const PoolSpec& spec = cfg_.pool.spec;
  const int bins = spec.bins();
  pass->rois.assign(rois.begin(), rois.end());
  pass->fmap = stack_.forward(images.cast<double>(), &pass->tape, exec_);
  const std::int64_t c = pass->fmap.dims().c;
  const auto per_roi = static_cast<std::size_t>(c * bins);

  const std::size_t r_count = rois.size();
  if (cfg_.pool.deformable) {
    const TensorD aligned = roi_align_forward<double>(pass->fmap, rois, spec);
    pass->caches.resize(r_count);
    for (std::size_t r = 0; r < r_count; ++r) {
      const std::span<const double> flat = aligned.data().subspan(r * per_roi, per_roi);
      pass->fields.push_back(roi_branch_forward<double>(flat, branch_, rois[r], spec, &pass->caches[r]));
    }
  } else {
    pass->fields.assign(r_count, make_bin_field<double>(bins, 1.0, false));
  }
  const TensorD pooled = mdpool_forward<double>(pass->fmap, rois, spec, pass->fields, exec_);
  for (std::size_t r = 0; r < r_count; ++r) {
    const auto flat = pooled.data().subspan(r * per_roi, per_roi);
    pass->fc_in.emplace_back(flat.begin(), flat.end());
    FeatureVec pre = fc_.forward(pass->fc_in.back());
    FeatureVec feat = pre;
    relu_inplace(feat);
    pass->fc_pre.push_back(std::move(pre));
    pass->features.push_back(std::move(feat));
  }
  return pass;
}

void RoiTrunk::backward(const TrunkPass& base, std::span<const FeatureVec> grad_features) {
  const auto& pass = dynamic_cast<const RoiPass&>(base);
  const PoolSpec& spec = cfg_.pool.spec;
  const std::size_t r_count = pass.rois.size();
  if (grad_features.size() != r_count) throw ShapeError("one feature gradient per RoI required");
  const Dims fd = pass.fmap.dims();
  const auto per_roi = static_cast<std::size_t>(fd.c * spec.bins());

  TensorD grad_pooled(Dims{static_cast<std::int64_t>(r_count), fd.c, spec.bins_h, spec.bins_w});
  for (std::size_t r = 0; r < r_count; ++r) {
    FeatureVec g = grad_features[r];
    relu_backward_inplace(pass.fc_pre[r], g);
    const FeatureVec gin = fc_.backward(pass.fc_in[r], g, grad_fc_);
    std::copy(gin.begin(), gin.end(), grad_pooled.data().begin() + static_cast<std::ptrdiff_t>(r * per_roi));
  }
  const PoolGrads<double> pg = mdpool_backward<double>(pass.fmap, pass.rois, spec, pass.fields, grad_pooled, exec_);
  TensorD grad_fmap = pg.grad_x;
  if (cfg_.pool.deformable) {
    TensorD grad_aligned(grad_pooled.dims());
    for (std::size_t r = 0; r < r_count; ++r) {
      const std::vector<double> ga =
          roi_branch_backward(branch_, pass.caches[r], pass.rois[r], spec, pg.grad_fields[r], grad_branch_);
      std::copy(ga.begin(), ga.end(), grad_aligned.data().begin() + static_cast<std::ptrdiff_t>(r * per_roi));
    }
    const std::vector<BinField<double>> unit(r_count, make_bin_field<double>(spec.bins(), 1.0, false));
    const PoolGrads<double> ag = mdpool_backward<double>(pass.fmap, pass.rois, spec, unit, grad_aligned, exec_);
    add_into(grad_fmap.data(), ag.grad_x.data());
  }
  stack_.backward(pass.tape, grad_fmap, exec_);
}

void RoiTrunk::collect(std::vector<ParamRef>& out) {
  stack_.collect(out, cfg_.optim.branch_lr_mult);
  if (cfg_.pool.deformable) {
    const double m = cfg_.optim.branch_lr_mult;
    out.push_back({"roi_branch.fc1.weight", branch_.fc1.weight, grad_branch_.fc1.weight, m});
    out.push_back({"roi_branch.fc1.bias", branch_.fc1.bias, grad_branch_.fc1.bias, m});
    out.push_back({"roi_branch.fc2.weight", branch_.fc2.weight, grad_branch_.fc2.weight, m});
    out.push_back({"roi_branch.fc2.bias", branch_.fc2.bias, grad_branch_.fc2.bias, m});
    out.push_back({"roi_branch.out.weight", branch_.out.weight, grad_branch_.out.weight, m});
    out.push_back({"roi_branch.out.bias", branch_.out.bias, grad_branch_.out.bias, m});
  }
  out.push_back({"fc.weight", fc_.weight, grad_fc_.weight, 1.0});
  out.push_back({"fc.bias", fc_.bias, grad_fc_.bias, 1.0});
}

void RoiTrunk::zero_grad() {
  // In place: the optimizer holds spans into these buffers.
  auto clear = [](Affine<double>& a) {
    std::fill(a.weight.begin(), a.weight.end(), 0.0);
    std::fill(a.bias.begin(), a.bias.end(), 0.0);
  };
  stack_.zero_grad();
  if (cfg_.pool.deformable) {
    clear(grad_branch_.fc1);
    clear(grad_branch_.fc2);
    clear(grad_branch_.out);
  }
  clear(grad_fc_);
}

std::vector<double> RoiTrunk::offset_stats(const Tensor& images, std::span<const RoI> rois) const {
  const auto base = forward(images, rois);
  const auto& pass = dynamic_cast<const RoiPass&>(*base);
  std::vector<double> out = mean_abs_offsets(stack_, pass.tape);
  if (cfg_.pool.deformable) {
    double acc = 0.0;
    std::size_t count = 0;
    for (const BinField<double>& f : pass.fields) {
      for (double v : f.offsets) acc += std::abs(v);
      count += f.offsets.size();
    }
    out.push_back(count ? acc / static_cast<double>(count) : 0.0);
  }
  return out;
}

}  // namespace dcn2
