#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dcn2/error.hpp"

namespace dcn2 {

/// Fully connected layer y = W x + b with W stored (out, in) row-major.
template <typename T>
struct Affine {
  std::int64_t in = 0;
  std::int64_t out = 0;
  std::vector<T> weight;
  std::vector<T> bias;

  static Affine zeros(std::int64_t in, std::int64_t out) {
    return {in, out, std::vector<T>(static_cast<std::size_t>(in * out)), std::vector<T>(static_cast<std::size_t>(out))};
  }

  static Affine gaussian(std::int64_t in, std::int64_t out, double stddev, std::mt19937_64& rng) {
    Affine a = zeros(in, out);
    std::normal_distribution<double> dist(0.0, stddev);
    for (T& v : a.weight) v = static_cast<T>(dist(rng));
    return a;
  }

  std::vector<double> forward(std::span<const double> x) const {
    if (static_cast<std::int64_t>(x.size()) != in) {
      throw ShapeError("affine input has " + std::to_string(x.size()) + " features, expected " + std::to_string(in));
    }
    std::vector<double> y(static_cast<std::size_t>(out));
    for (std::int64_t o = 0; o < out; ++o) {
      double acc = static_cast<double>(bias[static_cast<std::size_t>(o)]);
      const T* row = weight.data() + o * in;
      for (std::int64_t i = 0; i < in; ++i) acc += static_cast<double>(row[i]) * x[static_cast<std::size_t>(i)];
      y[static_cast<std::size_t>(o)] = acc;
    }
    return y;
  }

  /// Accumulates dL/dW and dL/db into `grads` and returns dL/dx.
  std::vector<double> backward(std::span<const double> x, std::span<const double> grad_y, Affine& grads) const {
    std::vector<double> gx(static_cast<std::size_t>(in));
    for (std::int64_t o = 0; o < out; ++o) {
      const double g = grad_y[static_cast<std::size_t>(o)];
      if (g == 0.0) continue;
      grads.bias[static_cast<std::size_t>(o)] += static_cast<T>(g);
      const T* row = weight.data() + o * in;
      T* grow = grads.weight.data() + o * in;
      for (std::int64_t i = 0; i < in; ++i) {
        grow[i] += static_cast<T>(g * x[static_cast<std::size_t>(i)]);
        gx[static_cast<std::size_t>(i)] += g * static_cast<double>(row[i]);
      }
    }
    return gx;
  }
};

inline void relu_inplace(std::vector<double>& v) {
  for (double& e : v) e = e > 0.0 ? e : 0.0;
}

/// Zeroes gradient entries whose forward activation was clipped by ReLU.
inline void relu_backward_inplace(std::span<const double> activation, std::vector<double>& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(activation[i] > 0.0)) grad[i] = 0.0;
  }
}

}  // namespace dcn2
