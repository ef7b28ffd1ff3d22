#pragma once

#include <array>
#include <cmath>
#include <numbers>

#include "ftrj/nn/dense.hpp"

namespace ftrj::nn {

// Sinusoidal features [sin(w_k t)..., cos(w_k t)...] on a geometric ladder
// w_k = pi 2^(k/8), k = 0..31, spanning pi to about 46 rad per unit time so
// that a 100-step RK4 solve on [0, 1] resolves every feature.
class TimeEmbedding {
 public:
  static constexpr int kFrequencies = 32;
  static constexpr int kDim = 2 * kFrequencies;

  TimeEmbedding() {
    for (int k = 0; k < kFrequencies; ++k)
      freq_[k] = std::numbers::pi * std::pow(2.0, k / 8.0);
  }

  const std::array<double, kFrequencies>& frequencies() const { return freq_; }

  template <typename Row>
  void embed(double t, Row&& out) const {
    for (int k = 0; k < kFrequencies; ++k) {
      out[k] = std::sin(freq_[k] * t);
      out[k + kFrequencies] = std::cos(freq_[k] * t);
    }
  }

  // d/dt of embed(t)
  template <typename Row>
  void derivative(double t, Row&& out) const {
    for (int k = 0; k < kFrequencies; ++k) {
      out[k] = freq_[k] * std::cos(freq_[k] * t);
      out[k + kFrequencies] = -freq_[k] * std::sin(freq_[k] * t);
    }
  }

  Vector operator()(double t) const {
    Vector v(kDim);
    embed(t, v);
    return v;
  }

  Vector dt(double t) const {
    Vector v(kDim);
    derivative(t, v);
    return v;
  }

 private:
  std::array<double, kFrequencies> freq_{};
};

inline Vector time_embed(double t) { return TimeEmbedding{}(t); }

}  // namespace ftrj::nn
