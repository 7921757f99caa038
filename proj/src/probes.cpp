#include "dcn2/probes.hpp"

#include <charconv>
#include <vector>

#include "dcn2/image_io.hpp"

namespace dcn2 {

NodeProbe window_mean_probe(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h) {
  if (w < 1 || h < 1 || x < 0 || y < 0) throw UsageError("window must have positive size and a non-negative corner");
  auto check = [=](const Dims& d) {
    if (d.n != 1) throw ShapeError("probes take a single image");
    if (x + w > d.w || y + h > d.h) throw UsageError("window lies outside the " + d.str() + " image");
  };
  NodeProbe p;
  p.evaluate = [=](const Tensor& img) {
    const Dims d = img.dims();
    check(d);
    double acc = 0.0;
    for (std::int64_t c = 0; c < d.c; ++c) {
      for (std::int64_t r = y; r < y + h; ++r) {
        for (std::int64_t q = x; q < x + w; ++q) acc += img(0, c, r, q);
      }
    }
    return FeatureVec{acc / static_cast<double>(d.c * w * h)};
  };
  p.vjp = [=](const Tensor& img, std::span<const double> up) {
    const Dims d = img.dims();
    check(d);
    Tensor g(d);
    const auto v = static_cast<float>(up[0] / static_cast<double>(d.c * w * h));
    for (std::int64_t c = 0; c < d.c; ++c) {
      for (std::int64_t r = y; r < y + h; ++r) {
        for (std::int64_t q = x; q < x + w; ++q) g(0, c, r, q) = v;
      }
    }
    return g;
  };
  return p;
}

NodeProbe constant_probe(double value) {
  NodeProbe p;
  p.evaluate = [value](const Tensor&) { return FeatureVec{value}; };
  p.vjp = [](const Tensor& img, std::span<const double>) { return Tensor(img.dims()); };
  return p;
}

NodeProbe dense_net_probe(std::shared_ptr<DenseNet> net, std::size_t layer, std::int64_t x, std::int64_t y,
                          const Execution& exec) {
  if (layer > net->stack().layers().size()) {
    throw UsageError("model has " + std::to_string(net->stack().layers().size()) + " conv layers");
  }
  const std::int64_t channels = net->config().in_channels;
  auto to_input = [channels](const Tensor& img) {
    if (img.dims().c != channels) {
      throw UsageError("model expects " + std::to_string(channels) + "-channel images, got " + img.dims().str());
    }
    return img.cast<double>();
  };
  NodeProbe p;
  p.evaluate = [=](const Tensor& img) { return net->node(to_input(img), layer, y, x, exec); };
  p.vjp = [=](const Tensor& img, std::span<const double> up) {
    const TensorD g = net->node_vjp(to_input(img), layer, y, x, up, exec);
    net->zero_grad();
    return g.cast<float>();
  };
  return p;
}

namespace {

std::vector<double> parse_numbers(const std::string& text, const std::string& selector) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find(',', pos), text.size());
    double v = 0.0;
    const char* first = text.data() + pos;
    const char* last = text.data() + end;
    const auto res = std::from_chars(first, last, v);
    if (first == last || res.ec != std::errc() || res.ptr != last) {
      throw UsageError("cannot parse node selector '" + selector + "'");
    }
    out.push_back(v);
    pos = end + 1;
  }
  return out;
}

std::int64_t as_index(double v, const std::string& selector) {
  if (v != static_cast<double>(static_cast<std::int64_t>(v))) {
    throw UsageError("node selector '" + selector + "' needs integer coordinates");
  }
  return static_cast<std::int64_t>(v);
}

}  // namespace

NodeProbe resolve_probe(const std::string& selector, const std::string& model_path, const Execution& exec) {
  const std::size_t colon = selector.find(':');
  if (colon == std::string::npos) throw UsageError("node selector '" + selector + "' has no ':'");
  const std::string kind = selector.substr(0, colon);
  const std::vector<double> args = parse_numbers(selector.substr(colon + 1), selector);
  auto expect = [&](std::size_t n) {
    if (args.size() != n) {
      throw UsageError("node selector '" + selector + "' needs " + std::to_string(n) + " values");
    }
  };

  if (kind == "window") {
    expect(4);
    return window_mean_probe(as_index(args[0], selector), as_index(args[1], selector), as_index(args[2], selector),
                             as_index(args[3], selector));
  }
  if (kind == "constant") {
    expect(1);
    return constant_probe(args[0]);
  }

  std::size_t layer = 0;
  bool head = false;
  if (kind == "output") {
    head = true;
  } else if (kind.rfind("layer", 0) == 0 && kind.size() > 5) {
    const char* first = kind.data() + 5;
    const char* last = kind.data() + kind.size();
    const auto res = std::from_chars(first, last, layer);
    if (res.ec != std::errc() || res.ptr != last) throw UsageError("bad layer index in '" + selector + "'");
  } else {
    throw UsageError("unknown node kind '" + kind + "' (expected window, constant, output or layerN)");
  }
  expect(2);
  if (model_path.empty()) throw UsageError("node selector '" + selector + "' needs --model");
  const std::vector<std::uint8_t> bytes = read_file(model_path);
  std::shared_ptr<DenseNet> net;
  try {
    net = dense_model_from_json(std::string(bytes.begin(), bytes.end()));
  } catch (const ConfigError& e) {
    throw FormatError(model_path + ": " + e.what(), 0);
  }
  if (head) layer = net->stack().layers().size();
  return dense_net_probe(std::move(net), layer, as_index(args[0], selector), as_index(args[1], selector), exec);
}

}  // namespace dcn2
