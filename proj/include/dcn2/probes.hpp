#pragma once

#include <memory>
#include <string>

#include "dcn2/parallel.hpp"
#include "dcn2/support_analysis.hpp"
#include "dcn2/toy_net.hpp"

namespace dcn2 {

/// Mean over all channels of the w x h window at (x, y). Its true dependency
/// region is exactly that window.
NodeProbe window_mean_probe(std::int64_t x, std::int64_t y, std::int64_t w, std::int64_t h);

/// Ignores the image entirely.
NodeProbe constant_probe(double value);

/// Node of a trained dense toy net at feature-map pixel (x, y): `layer`
/// indexes the conv layers, and the layer count selects the head output.
NodeProbe dense_net_probe(std::shared_ptr<DenseNet> net, std::size_t layer, std::int64_t x, std::int64_t y,
                          const Execution& exec);

/// Resolves a node selector:
///   window:X,Y,W,H     window_mean_probe
///   constant:C         constant_probe
///   output:X,Y         head output of the model at (X, Y)
///   layerI:X,Y         activations of conv layer I of the model at (X, Y)
/// The model selectors need `model_path` (a model.json from demo-train).
/// Throws UsageError for anything that does not resolve.
NodeProbe resolve_probe(const std::string& selector, const std::string& model_path, const Execution& exec);

}  // namespace dcn2
