#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ftrj/error.hpp"

namespace ftrj::nn {

struct AdamWOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-2;
};

// Decoupled weight decay with bias-corrected moments. Moment buffers are
// allocated on the first step and shaped like the parameter list.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWOptions options) : options_(options) {}

  const AdamWOptions& options() const { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  std::size_t step_count() const { return step_count_; }
  const std::vector<std::vector<double>>& first_moment() const { return m_; }
  const std::vector<std::vector<double>>& second_moment() const { return v_; }

  // Returns false (and leaves parameters untouched) when any gradient entry
  // is non-finite.
  bool step(const std::vector<std::span<double>>& params,
            const std::vector<std::span<double>>& grads) {
    require(params.size() == grads.size(), "AdamW: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i)
      require(params[i].size() == grads[i].size(), "AdamW: parameter/gradient shape mismatch");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    require(m_.size() == params.size(), "AdamW: parameter list changed between steps");
    for (const auto& g : grads)
      for (double x : g)
        if (!std::isfinite(x)) return false;

    ++step_count_;
    const auto t = static_cast<double>(step_count_);
    const double bc1 = 1.0 - std::pow(options_.beta1, t);
    const double bc2 = 1.0 - std::pow(options_.beta2, t);
    const double lr = options_.learning_rate;
    const double decay = 1.0 - lr * options_.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i];
      auto g = grads[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
        v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        p[j] = p[j] * decay - lr * mhat / (std::sqrt(vhat) + options_.epsilon);
      }
    }
    return true;
  }

 private:
  AdamWOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_count_ = 0;
};

}  // namespace ftrj::nn
