#include <json.hpp>

#include "dcn2/conv_types.hpp"

namespace dcn2 {

namespace {

std::pair<int, int> read_pair(const nlohmann::json& j, const char* key, std::pair<int, int> fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer()) {
    throw ConfigError(std::string("layer config field '") + key + "' must be a pair of integers");
  }
  return {v[0].get<int>(), v[1].get<int>()};
}

}  // namespace

std::string layer_config_to_json(const LayerConfig& cfg) {
  const KernelSpec& k = cfg.kernel;
  nlohmann::json j{
      {"kernel", {k.kernel_h, k.kernel_w}},
      {"stride", {k.stride_h, k.stride_w}},
      {"pad", {k.pad_h, k.pad_w}},
      {"dilation", {k.dilation_h, k.dilation_w}},
      {"modulated", cfg.modulated},
  };
  return j.dump();
}

LayerConfig layer_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("layer config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("layer config must be a JSON object");
  LayerConfig cfg;
  KernelSpec& k = cfg.kernel;
  std::tie(k.kernel_h, k.kernel_w) = read_pair(j, "kernel", {k.kernel_h, k.kernel_w});
  std::tie(k.stride_h, k.stride_w) = read_pair(j, "stride", {k.stride_h, k.stride_w});
  std::tie(k.pad_h, k.pad_w) = read_pair(j, "pad", {k.pad_h, k.pad_w});
  std::tie(k.dilation_h, k.dilation_w) = read_pair(j, "dilation", {k.dilation_h, k.dilation_w});
  if (j.contains("modulated")) {
    if (!j["modulated"].is_boolean()) throw ConfigError("layer config field 'modulated' must be a boolean");
    cfg.modulated = j["modulated"].get<bool>();
  }
  try {
    k.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("invalid layer config: ") + e.what());
  }
  return cfg;
}

}  // namespace dcn2
