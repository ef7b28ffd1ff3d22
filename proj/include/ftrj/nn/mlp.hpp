#pragma once

#include <cmath>
#include <cstddef>
#include <iostream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ftrj/error.hpp"
#include "ftrj/nn/dense.hpp"
#include "ftrj/rng.hpp"

namespace ftrj::nn {

enum class Activation { silu, tanh, relu };
enum class NormMode { training, inference };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::silu: return "silu";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "silu") return Activation::silu;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  fail(ErrorKind::config, "unknown activation '" + s + "'");
}

namespace detail {

inline double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline double act(Activation a, double z) {
  switch (a) {
    case Activation::silu: return z * sigmoid(z);
    case Activation::tanh: return std::tanh(z);
    case Activation::relu: return z > 0 ? z : 0.0;
  }
  return 0;
}

inline double act_d1(Activation a, double z) {
  switch (a) {
    case Activation::silu: {
      double s = sigmoid(z);
      return s * (1.0 + z * (1.0 - s));
    }
    case Activation::tanh: {
      double t = std::tanh(z);
      return 1.0 - t * t;
    }
    case Activation::relu: return z > 0 ? 1.0 : 0.0;
  }
  return 0;
}

inline double act_d2(Activation a, double z) {
  switch (a) {
    case Activation::silu: {
      double s = sigmoid(z);
      return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s));
    }
    case Activation::tanh: {
      double t = std::tanh(z);
      return -2.0 * t * (1.0 - t * t);
    }
    case Activation::relu: return 0.0;
  }
  return 0;
}

}  // namespace detail

struct MlpOptions {
  // input, hidden..., output
  std::vector<std::size_t> dims;
  Activation activation = Activation::silu;
  bool batch_norm = true;
};

// Default: three hidden layers of width 256.
inline MlpOptions default_mlp(std::size_t in, std::size_t out,
                              std::size_t width = 256, std::size_t depth = 3,
                              bool batch_norm = true) {
  MlpOptions o;
  o.dims.push_back(in);
  for (std::size_t i = 0; i < depth; ++i) o.dims.push_back(width);
  o.dims.push_back(out);
  o.batch_norm = batch_norm;
  return o;
}

// Dense feed-forward network: hidden layers are Linear -> [BatchNorm] -> act,
// the output layer is Linear only.
//
// Besides the plain forward pass it supports a "dual" forward that carries
// one tangent direction per sample (forward-mode), and a reverse pass over
// either. Reversing the dual pass yields parameter gradients of losses that
// contain J(x)v, plus the second-order input term grad_x <w, J(x) v>.
class MlpNetwork {
 public:
  struct Linear {
    DenseMatrix weight;  // out x in
    Vector bias;
  };

  struct BatchNorm {
    Vector gamma, beta, running_mean, running_var;
  };

  static constexpr double kNormEps = 1e-5;
  static constexpr double kNormMomentum = 0.1;

  struct Gradients {
    std::vector<DenseMatrix> weight;
    std::vector<Vector> bias, gamma, beta;

    void set_zero() {
      for (auto& m : weight) m.setZero();
      for (auto& v : bias) v.setZero();
      for (auto& v : gamma) v.setZero();
      for (auto& v : beta) v.setZero();
    }

    // Same order as MlpNetwork::parameters().
    std::vector<std::span<double>> spans() {
      std::vector<std::span<double>> out;
      for (std::size_t i = 0; i < weight.size(); ++i) {
        out.push_back(as_span(weight[i]));
        out.push_back(as_span(bias[i]));
      }
      for (std::size_t i = 0; i < gamma.size(); ++i) {
        out.push_back(as_span(gamma[i]));
        out.push_back(as_span(beta[i]));
      }
      return out;
    }
  };

  struct Tape {
    struct Layer {
      DenseMatrix input, input_dot;
      DenseMatrix pre, pre_dot;  // activation argument
      DenseMatrix normalized, normalized_dot;  // batch-norm x-hat
      Vector batch_mean, batch_var, inv_std;
    };
    std::vector<Layer> layers;
    bool has_tangent = false;
    NormMode mode = NormMode::inference;
  };

  struct DualOutput {
    DenseMatrix value, tangent;
  };

  MlpNetwork() = default;

  MlpNetwork(const MlpOptions& options, Rng& rng) : options_(options) {
    require(options_.dims.size() >= 2, "MlpNetwork: need at least input and output dims");
    for (auto d : options_.dims) require(d > 0, "MlpNetwork: zero-width layer");
    for (std::size_t k = 0; k + 1 < options_.dims.size(); ++k) {
      const auto in = options_.dims[k], out = options_.dims[k + 1];
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      Linear l{DenseMatrix(out, in), Vector(out)};
      for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = u(rng);
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = u(rng);
      linear_.push_back(std::move(l));
    }
    if (options_.batch_norm) {
      for (std::size_t k = 1; k + 1 < options_.dims.size(); ++k) {
        const auto w = static_cast<Eigen::Index>(options_.dims[k]);
        norm_.push_back({Vector::Ones(w), Vector::Zero(w), Vector::Zero(w), Vector::Ones(w)});
      }
    }
  }

  // Build from explicit layers (no batch norm); used for hand-constructed nets.
  static MlpNetwork from_layers(std::vector<Linear> layers, Activation activation) {
    require(!layers.empty(), "MlpNetwork: no layers");
    MlpNetwork net;
    net.options_.activation = activation;
    net.options_.batch_norm = false;
    net.options_.dims.push_back(static_cast<std::size_t>(layers.front().weight.cols()));
    for (std::size_t k = 0; k < layers.size(); ++k) {
      require(layers[k].bias.size() == layers[k].weight.rows(), "MlpNetwork: bias size");
      if (k > 0)
        require(layers[k].weight.cols() == layers[k - 1].weight.rows(),
                "MlpNetwork: incompatible layer dims");
      net.options_.dims.push_back(static_cast<std::size_t>(layers[k].weight.rows()));
    }
    net.linear_ = std::move(layers);
    return net;
  }

  const MlpOptions& options() const { return options_; }
  std::size_t input_dim() const { return options_.dims.front(); }
  std::size_t output_dim() const { return options_.dims.back(); }
  std::size_t num_layers() const { return linear_.size(); }
  Activation activation() const { return options_.activation; }

  NormMode mode() const { return mode_; }
  void set_mode(NormMode m) { mode_ = m; }

  std::vector<Linear>& linear() { return linear_; }
  const std::vector<Linear>& linear() const { return linear_; }
  std::vector<BatchNorm>& norms() { return norm_; }
  const std::vector<BatchNorm>& norms() const { return norm_; }

  std::vector<std::span<double>> parameters() {
    std::vector<std::span<double>> out;
    for (auto& l : linear_) {
      out.push_back(as_span(l.weight));
      out.push_back(as_span(l.bias));
    }
    for (auto& n : norm_) {
      out.push_back(as_span(n.gamma));
      out.push_back(as_span(n.beta));
    }
    return out;
  }

  Gradients make_gradients() const {
    Gradients g;
    for (const auto& l : linear_) {
      g.weight.push_back(DenseMatrix::Zero(l.weight.rows(), l.weight.cols()));
      g.bias.push_back(Vector::Zero(l.bias.size()));
    }
    for (const auto& n : norm_) {
      g.gamma.push_back(Vector::Zero(n.gamma.size()));
      g.beta.push_back(Vector::Zero(n.beta.size()));
    }
    return g;
  }

  DenseMatrix forward(const DenseMatrix& x, Tape* tape = nullptr) const {
    return run(x, nullptr, tape).value;
  }

  // Forward with one tangent direction per row; returns (f(x), J(x) xdot).
  DualOutput forward_dual(const DenseMatrix& x, const DenseMatrix& xdot,
                          Tape* tape = nullptr) const {
    require(xdot.rows() == x.rows() && xdot.cols() == x.cols(),
            "MlpNetwork: tangent shape mismatch");
    return run(x, &xdot, tape);
  }

  // Reverse pass over a recorded forward. Gradients accumulate into `grads`.
  // With a dual tape, `ydot_bar` is the cotangent of the output tangent and
  // `xdot_bar` receives the cotangent of the input tangent.
  void backward(const Tape& tape, const DenseMatrix& y_bar, const DenseMatrix* ydot_bar,
                Gradients* grads, DenseMatrix* x_bar, DenseMatrix* xdot_bar) const {
    const bool dual = tape.has_tangent && ydot_bar != nullptr;
    require(!(ydot_bar && !tape.has_tangent), "MlpNetwork: tangent cotangent on a primal tape");
    DenseMatrix g = y_bar;
    DenseMatrix gd;
    if (dual) gd = *ydot_bar;
    const std::size_t L = linear_.size();
    for (std::size_t kk = L; kk-- > 0;) {
      const auto& rec = tape.layers[kk];
      const auto& lin = linear_[kk];
      if (kk + 1 < L) {
        // through activation
        const DenseMatrix& z = rec.pre;
        DenseMatrix gz(z.rows(), z.cols());
        if (dual) {
          DenseMatrix gzd(z.rows(), z.cols());
          for (Eigen::Index i = 0; i < z.size(); ++i) {
            const double zi = z.data()[i];
            const double d1 = detail::act_d1(options_.activation, zi);
            const double d2 = detail::act_d2(options_.activation, zi);
            gz.data()[i] = d1 * g.data()[i] + d2 * rec.pre_dot.data()[i] * gd.data()[i];
            gzd.data()[i] = d1 * gd.data()[i];
          }
          gd = std::move(gzd);
        } else {
          for (Eigen::Index i = 0; i < z.size(); ++i)
            gz.data()[i] = detail::act_d1(options_.activation, z.data()[i]) * g.data()[i];
        }
        g = std::move(gz);
        if (!norm_.empty()) back_norm(kk, rec, tape.mode, dual, g, gd, grads);
      }
      if (grads) {
        grads->weight[kk].noalias() += g.transpose() * rec.input;
        grads->bias[kk] += g.colwise().sum().transpose();
        if (dual) grads->weight[kk].noalias() += gd.transpose() * rec.input_dot;
      }
      if (kk > 0 || x_bar || xdot_bar) {
        DenseMatrix gi = g * lin.weight;
        g = std::move(gi);
        if (dual) {
          DenseMatrix gdi = gd * lin.weight;
          gd = std::move(gdi);
        }
      }
    }
    if (x_bar) *x_bar = std::move(g);
    if (xdot_bar) {
      if (dual)
        *xdot_bar = std::move(gd);
      else
        *xdot_bar = DenseMatrix::Zero(y_bar.rows(), static_cast<Eigen::Index>(input_dim()));
    }
  }

  // Fold the batch statistics recorded on a training-mode tape into the
  // running estimates.
  void update_running_stats(const Tape& tape) {
    if (norm_.empty() || tape.mode != NormMode::training) return;
    for (std::size_t k = 0; k < norm_.size(); ++k) {
      const auto& rec = tape.layers[k];
      const double n = static_cast<double>(rec.input.rows());
      const double unbias = n > 1 ? n / (n - 1) : 1.0;
      norm_[k].running_mean = (1 - kNormMomentum) * norm_[k].running_mean + kNormMomentum * rec.batch_mean;
      norm_[k].running_var =
          (1 - kNormMomentum) * norm_[k].running_var + kNormMomentum * unbias * rec.batch_var;
    }
  }

 private:
  DualOutput run(const DenseMatrix& x, const DenseMatrix* xdot, Tape* tape) const {
    require(static_cast<std::size_t>(x.cols()) == input_dim(),
            "MlpNetwork: input has " + std::to_string(x.cols()) + " columns, expected " +
                std::to_string(input_dim()));
    require(x.allFinite(), "MlpNetwork: non-finite input");
    const bool dual = xdot != nullptr;
    if (dual && mode_ == NormMode::training && !norm_.empty())
      fail(ErrorKind::invalid_argument,
           "MlpNetwork: derivative queries need inference-mode batch norm");
    if (mode_ == NormMode::training && !norm_.empty())
      require(x.rows() >= 2, "MlpNetwork: training-mode batch norm needs >= 2 rows");
    if (tape) {
      tape->layers.assign(linear_.size(), {});
      tape->has_tangent = dual;
      tape->mode = mode_;
    }
    DenseMatrix h = x;
    DenseMatrix hd;
    if (dual) hd = *xdot;
    const std::size_t L = linear_.size();
    for (std::size_t k = 0; k < L; ++k) {
      const auto& lin = linear_[k];
      DenseMatrix z = h * lin.weight.transpose();
      z.rowwise() += lin.bias.transpose();
      DenseMatrix zd;
      if (dual) zd = hd * lin.weight.transpose();
      Tape::Layer* rec = tape ? &tape->layers[k] : nullptr;
      if (rec) {
        rec->input = std::move(h);
        if (dual) rec->input_dot = std::move(hd);
      }
      if (k + 1 == L) {
        h = std::move(z);
        if (dual) hd = std::move(zd);
        break;
      }
      if (!norm_.empty()) apply_norm(k, z, dual ? &zd : nullptr, rec);
      h.resize(z.rows(), z.cols());
      for (Eigen::Index i = 0; i < z.size(); ++i) h.data()[i] = detail::act(options_.activation, z.data()[i]);
      if (dual) {
        hd.resize(z.rows(), z.cols());
        for (Eigen::Index i = 0; i < z.size(); ++i)
          hd.data()[i] = detail::act_d1(options_.activation, z.data()[i]) * zd.data()[i];
      }
      if (rec) {
        rec->pre = std::move(z);
        if (dual) rec->pre_dot = std::move(zd);
      }
    }
    DualOutput out;
    out.value = std::move(h);
    if (dual) out.tangent = std::move(hd);
    return out;
  }

  void apply_norm(std::size_t k, DenseMatrix& z, DenseMatrix* zd, Tape::Layer* rec) const {
    const auto& bn = norm_[k];
    if (mode_ == NormMode::inference) {
      Vector inv_std = (bn.running_var.array() + kNormEps).sqrt().inverse();
      DenseMatrix xhat = ((z.rowwise() - bn.running_mean.transpose()).array().rowwise() *
                          inv_std.transpose().array()).matrix();
      z = (xhat.array().rowwise() * bn.gamma.transpose().array()).matrix();
      z.rowwise() += bn.beta.transpose();
      if (zd) {
        DenseMatrix xhat_dot = (zd->array().rowwise() * inv_std.transpose().array()).matrix();
        *zd = (xhat_dot.array().rowwise() * bn.gamma.transpose().array()).matrix();
        if (rec) rec->normalized_dot = std::move(xhat_dot);
      }
      if (rec) {
        rec->normalized = std::move(xhat);
        rec->inv_std = std::move(inv_std);
      }
      return;
    }
    const double n = static_cast<double>(z.rows());
    Vector mean = z.colwise().sum().transpose() / n;
    DenseMatrix centered = z.rowwise() - mean.transpose();
    Vector var = centered.array().square().colwise().sum().transpose() / n;
    Vector inv_std = (var.array() + kNormEps).sqrt().inverse();
    DenseMatrix xhat = (centered.array().rowwise() * inv_std.transpose().array()).matrix();
    z = (xhat.array().rowwise() * bn.gamma.transpose().array()).matrix();
    z.rowwise() += bn.beta.transpose();
    if (rec) {
      rec->normalized = std::move(xhat);
      rec->batch_mean = std::move(mean);
      rec->batch_var = std::move(var);
      rec->inv_std = std::move(inv_std);
    }
  }

  void back_norm(std::size_t k, const Tape::Layer& rec, NormMode mode, bool dual, DenseMatrix& g,
                 DenseMatrix& gd, Gradients* grads) const {
    const auto& bn = norm_[k];
    if (mode == NormMode::inference) {
      // y = gamma * (z - mu) * inv_std + beta, statistics frozen
      if (grads) {
        grads->gamma[k] += (g.array() * rec.normalized.array()).colwise().sum().transpose().matrix();
        grads->beta[k] += g.colwise().sum().transpose();
        if (dual)
          grads->gamma[k] +=
              (gd.array() * rec.normalized_dot.array()).colwise().sum().transpose().matrix();
      }
      Vector scale = bn.gamma.array() * rec.inv_std.array();
      g = (g.array().rowwise() * scale.transpose().array()).matrix();
      if (dual) gd = (gd.array().rowwise() * scale.transpose().array()).matrix();
      return;
    }
    const DenseMatrix& xhat = rec.normalized;
    const double n = static_cast<double>(g.rows());
    if (grads) {
      grads->gamma[k] += (g.array() * xhat.array()).colwise().sum().transpose().matrix();
      grads->beta[k] += g.colwise().sum().transpose();
    }
    DenseMatrix gx = (g.array().rowwise() * bn.gamma.transpose().array()).matrix();
    Vector mean_g = gx.colwise().sum().transpose() / n;
    Vector mean_gx = (gx.array() * xhat.array()).colwise().sum().transpose() / n;
    DenseMatrix out = gx.rowwise() - mean_g.transpose();
    out -= (xhat.array().rowwise() * mean_gx.transpose().array()).matrix();
    g = (out.array().rowwise() * rec.inv_std.transpose().array()).matrix();
  }

  MlpOptions options_;
  std::vector<Linear> linear_;
  std::vector<BatchNorm> norm_;
  NormMode mode_ = NormMode::inference;
};

// Single-sample derivative queries. All require inference mode.

inline Vector mlp_forward_one(const MlpNetwork& net, const Vector& x) {
  return row_vector(net.forward(as_row(x)), 0);
}

inline DenseMatrix mlp_forward(const MlpNetwork& net, const DenseMatrix& batch) {
  return net.forward(batch);
}

inline void require_inference(const MlpNetwork& net) {
  if (net.mode() != NormMode::inference && !net.norms().empty())
    fail(ErrorKind::invalid_argument,
         "MlpNetwork: Jacobian queries are undefined under training-mode batch norm");
}

// J(x) v
inline Vector mlp_jvp(const MlpNetwork& net, const Vector& x, const Vector& v) {
  require_inference(net);
  require(static_cast<std::size_t>(v.size()) == net.input_dim(), "mlp_jvp: |v| != input dim");
  return row_vector(net.forward_dual(as_row(x), as_row(v)).tangent, 0);
}

// J(x)^T w
inline Vector mlp_vjp(const MlpNetwork& net, const Vector& x, const Vector& w) {
  require_inference(net);
  require(static_cast<std::size_t>(w.size()) == net.output_dim(), "mlp_vjp: |w| != output dim");
  MlpNetwork::Tape tape;
  net.forward(as_row(x), &tape);
  DenseMatrix xb;
  net.backward(tape, as_row(w), nullptr, nullptr, &xb, nullptr);
  return row_vector(xb, 0);
}

// d/dx [J(x)^T w] . u, i.e. the Hessian of <w, f> applied to u.
inline Vector mlp_second_order(const MlpNetwork& net, const Vector& x, const Vector& w,
                               const Vector& u) {
  require_inference(net);
  if (net.activation() == Activation::relu)
    fail(ErrorKind::invalid_argument,
         "mlp_second_order: relu has an almost-everywhere zero second derivative");
  require(static_cast<std::size_t>(w.size()) == net.output_dim(), "mlp_second_order: |w|");
  require(static_cast<std::size_t>(u.size()) == net.input_dim(), "mlp_second_order: |u|");
  MlpNetwork::Tape tape;
  net.forward_dual(as_row(x), as_row(u), &tape);
  DenseMatrix zero = DenseMatrix::Zero(1, static_cast<Eigen::Index>(net.output_dim()));
  DenseMatrix wrow = as_row(w);
  DenseMatrix xb, xdb;
  net.backward(tape, zero, &wrow, nullptr, &xb, &xdb);
  return row_vector(xb, 0);
}

}  // namespace ftrj::nn
