#pragma once

#include <random>

#include "dcn2/conv_types.hpp"
#include "dcn2/tensor.hpp"

namespace dcn2::test {

/// Uniform values in [center - scale, center + scale].
inline TensorD random_tensor(Dims d, std::mt19937_64& rng, double scale = 1.0, double center = 0.0) {
  std::uniform_real_distribution<double> u(center - scale, center + scale);
  TensorD t(d);
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline ConvWeights<double> random_weights(std::int64_t cout, std::int64_t cin, int kh, int kw, std::mt19937_64& rng) {
  ConvWeights<double> w{random_tensor({cout, cin, kh, kw}, rng, 0.5), {}};
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (std::int64_t o = 0; o < cout; ++o) w.bias.push_back(u(rng));
  return w;
}

}  // namespace dcn2::test
