#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ftrj/finsler.hpp"
#include "ftrj/nn/adamw.hpp"
#include "ftrj/nn/mlp.hpp"
#include "ftrj/nn/time_embedding.hpp"
#include "ftrj/rng.hpp"
#include "ftrj/transport.hpp"

namespace ftrj {

struct NetShape {
  std::size_t width = 256;
  std::size_t depth = 3;
  nn::Activation activation = nn::Activation::silu;
};

// These networks are differentiated inside their own losses, so they carry
// no batch norm and behave identically in training and evaluation.
inline nn::MlpNetwork plain_mlp(std::size_t in, std::size_t out, const NetShape& shape, Rng& rng) {
  nn::MlpOptions o = nn::default_mlp(in, out, shape.width, shape.depth, false);
  o.activation = shape.activation;
  return nn::MlpNetwork(o, rng);
}

// d(x, y) = ||phi(x) - phi(y)|| + <psi(x) - psi(y), beta>_+
class EmbeddingModel {
 public:
  struct Gradients {
    nn::MlpNetwork::Gradients phi, psi;
    Vector beta;

    void set_zero() {
      phi.set_zero();
      psi.set_zero();
      beta.setZero();
    }
  };

  EmbeddingModel() = default;
  EmbeddingModel(nn::MlpNetwork phi, nn::MlpNetwork psi, Vector beta)
      : phi_(std::move(phi)), psi_(std::move(psi)), beta_(std::move(beta)) {
    require(phi_.input_dim() == psi_.input_dim(), "EmbeddingModel: phi and psi input dims differ");
    require(phi_.output_dim() == psi_.output_dim() && psi_.output_dim() == static_cast<std::size_t>(beta_.size()),
            "EmbeddingModel: latent dims differ");
    require(phi_.norms().empty() && psi_.norms().empty(), "EmbeddingModel: batch norm not supported");
  }

  static EmbeddingModel create(std::size_t n, std::size_t latent, const NetShape& shape, Rng& rng) {
    auto phi = plain_mlp(n, latent, shape, rng);
    auto psi = plain_mlp(n, latent, shape, rng);
    // beta = 0 is a stationary point of the one-sided term, so start off it
    std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(latent)));
    Vector beta(static_cast<Eigen::Index>(latent));
    for (Eigen::Index i = 0; i < beta.size(); ++i) beta[i] = g(rng);
    return EmbeddingModel(std::move(phi), std::move(psi), std::move(beta));
  }

  std::size_t dim() const { return phi_.input_dim(); }
  std::size_t latent_dim() const { return phi_.output_dim(); }
  const nn::MlpNetwork& phi() const { return phi_; }
  const nn::MlpNetwork& psi() const { return psi_; }
  nn::MlpNetwork& phi() { return phi_; }
  nn::MlpNetwork& psi() { return psi_; }
  const Vector& beta() const { return beta_; }
  Vector& beta() { return beta_; }

  Gradients make_gradients() const {
    return {phi_.make_gradients(), psi_.make_gradients(), Vector::Zero(beta_.size())};
  }

  std::vector<std::span<double>> parameters() {
    auto p = phi_.parameters();
    for (auto s : psi_.parameters()) p.push_back(s);
    p.push_back(as_span(beta_));
    return p;
  }

  static std::vector<std::span<double>> spans(Gradients& g) {
    auto p = g.phi.spans();
    for (auto s : g.psi.spans()) p.push_back(s);
    p.push_back(as_span(g.beta));
    return p;
  }

  double dhat(const Vector& x, const Vector& y) const {
    require(static_cast<std::size_t>(x.size()) == dim() && x.size() == y.size(), "dhat: dimension mismatch");
    require(x.allFinite() && y.allFinite(), "dhat: non-finite input");
    DenseMatrix xy(2, x.size());
    xy.row(0) = x.transpose();
    xy.row(1) = y.transpose();
    const DenseMatrix a = phi_.forward(xy), b = psi_.forward(xy);
    return (a.row(0) - a.row(1)).norm() + std::max(0.0, (b.row(0) - b.row(1)).dot(beta_.transpose()));
  }

  // C(i, j) = dhat(source_i, target_j), one forward pass per side.
  CostMatrix cost_matrix(const DenseMatrix& source, const DenseMatrix& target) const {
    require(source.rows() > 0 && target.rows() > 0, "cost_matrix: empty batch");
    const DenseMatrix a0 = phi_.forward(source), a1 = phi_.forward(target);
    const Vector s0 = psi_.forward(source) * beta_, s1 = psi_.forward(target) * beta_;
    CostMatrix c(source.rows(), target.rows());
    for (Eigen::Index i = 0; i < source.rows(); ++i) {
      c.row(i) = (a1.rowwise() - a0.row(i)).rowwise().norm().transpose();
      for (Eigen::Index j = 0; j < target.rows(); ++j) c(i, j) += std::max(0.0, s0[i] - s1[j]);
    }
    require(c.allFinite(), "cost_matrix: non-finite cost", ErrorKind::training);
    return c;
  }

  // fhat(x, v) = ||Jphi v|| + <-Jpsi v, beta>_+, the first-order expansion of
  // dhat(x, x + v).
  Vector fhat_batch(const DenseMatrix& x, const DenseMatrix& v) const {
    const DenseMatrix a = phi_.forward_dual(x, v).tangent;
    const DenseMatrix b = psi_.forward_dual(x, v).tangent;
    Vector out = a.rowwise().norm();
    const Vector s = b * beta_;
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += std::max(0.0, -s[i]);
    return out;
  }

  double fhat(const Vector& x, const Vector& v) const {
    require(static_cast<std::size_t>(x.size()) == dim() && x.size() == v.size(), "fhat: dimension mismatch");
    return fhat_batch(as_row(x), as_row(v))[0];
  }

 private:
  nn::MlpNetwork phi_, psi_;
  Vector beta_;
};

// x_t = (1 - t) x0 + t x1 + t (1 - t) eta(x0, x1, emb(t)).
class GeodesicModel {
 public:
  struct Tape {
    nn::MlpNetwork::Tape net;
    Vector t;
  };

  struct Output {
    DenseMatrix x, xdot;
  };

  GeodesicModel() = default;
  explicit GeodesicModel(nn::MlpNetwork eta) : eta_(std::move(eta)) {
    require(eta_.norms().empty(), "GeodesicModel: batch norm not supported");
    require(eta_.input_dim() == 2 * eta_.output_dim() + nn::TimeEmbedding::kDim,
            "GeodesicModel: eta input must be (x0, x1, emb(t))");
  }

  static GeodesicModel create(std::size_t n, const NetShape& shape, Rng& rng) {
    return GeodesicModel(plain_mlp(2 * n + nn::TimeEmbedding::kDim, n, shape, rng));
  }

  std::size_t dim() const { return eta_.output_dim(); }
  const nn::MlpNetwork& eta() const { return eta_; }
  nn::MlpNetwork& eta() { return eta_; }

  // eta and its exact time derivative, by forward mode through emb(t).
  nn::MlpNetwork::DualOutput eta_dual(const DenseMatrix& x0, const DenseMatrix& x1, const Vector& t,
                                      nn::MlpNetwork::Tape* tape = nullptr) const {
    const auto B = x0.rows();
    const auto n = x0.cols();
    require(x1.rows() == B && t.size() == B && x1.cols() == n && static_cast<std::size_t>(n) == dim(),
            "GeodesicModel: batch shape mismatch");
    DenseMatrix in(B, 2 * n + nn::TimeEmbedding::kDim);
    DenseMatrix in_dot = DenseMatrix::Zero(B, in.cols());
    for (Eigen::Index i = 0; i < B; ++i) {
      in.row(i).head(n) = x0.row(i);
      in.row(i).segment(n, n) = x1.row(i);
      embedding_.embed(t[i], in.row(i).tail(nn::TimeEmbedding::kDim));
      embedding_.derivative(t[i], in_dot.row(i).tail(nn::TimeEmbedding::kDim));
    }
    return eta_.forward_dual(in, in_dot, tape);
  }

  Output interpolate(const DenseMatrix& x0, const DenseMatrix& x1, const Vector& t, Tape* tape = nullptr) const {
    require((t.array() >= 0.0).all() && (t.array() <= 1.0).all(), "interpolant: t must lie in [0, 1]");
    auto e = eta_dual(x0, x1, t, tape ? &tape->net : nullptr);
    Output o;
    o.x.resize(x0.rows(), x0.cols());
    o.xdot.resize(x0.rows(), x0.cols());
    for (Eigen::Index i = 0; i < x0.rows(); ++i) {
      const double s = t[i], w = s * (1.0 - s);
      o.x.row(i) = (1.0 - s) * x0.row(i) + s * x1.row(i) + w * e.value.row(i);
      o.xdot.row(i) = x1.row(i) - x0.row(i) + (1.0 - 2.0 * s) * e.value.row(i) + w * e.tangent.row(i);
    }
    if (tape) tape->t = t;
    return o;
  }

  std::pair<Vector, Vector> interpolant(const Vector& x0, const Vector& x1, double t) const {
    auto o = interpolate(as_row(x0), as_row(x1), Vector::Constant(1, t));
    return {row_vector(o.x, 0), row_vector(o.xdot, 0)};
  }

  // Cotangents of (x_t, xdot_t) to eta parameter gradients (accumulated).
  void backward(const Tape& tape, const DenseMatrix& x_bar, const DenseMatrix& xdot_bar,
                nn::MlpNetwork::Gradients* grads) const {
    DenseMatrix eta_bar(x_bar.rows(), x_bar.cols()), eta_dot_bar(x_bar.rows(), x_bar.cols());
    for (Eigen::Index i = 0; i < x_bar.rows(); ++i) {
      const double s = tape.t[i], w = s * (1.0 - s);
      eta_bar.row(i) = w * x_bar.row(i) + (1.0 - 2.0 * s) * xdot_bar.row(i);
      eta_dot_bar.row(i) = w * xdot_bar.row(i);
    }
    eta_.backward(tape.net, eta_bar, &eta_dot_bar, grads, nullptr, nullptr);
  }

 private:
  nn::MlpNetwork eta_;
  nn::TimeEmbedding embedding_;
};

// mean_i | fhat(x_i, v_i) - F_i | with F given; gradients go to phi, psi,
// beta only (the tangent samples are treated as data).
inline double emb_loss(const EmbeddingModel& e, const DenseMatrix& x, const DenseMatrix& v, const Vector& f,
                       EmbeddingModel::Gradients* grads = nullptr) {
  require(x.rows() > 0, "emb_loss: empty batch");
  require(f.size() == x.rows(), "emb_loss: metric values do not match batch");
  if (!f.allFinite()) fail(ErrorKind::training, "emb_loss: non-finite metric values");
  const auto B = x.rows();
  nn::MlpNetwork::Tape ta, tb;
  const DenseMatrix a = e.phi().forward_dual(x, v, grads ? &ta : nullptr).tangent;
  const DenseMatrix b = e.psi().forward_dual(x, v, grads ? &tb : nullptr).tangent;
  const Vector s = b * e.beta();
  const Vector an = a.rowwise().norm();
  double loss = 0;
  DenseMatrix a_bar, b_bar;
  if (grads) {
    a_bar = DenseMatrix::Zero(B, a.cols());
    b_bar = DenseMatrix::Zero(B, b.cols());
  }
  for (Eigen::Index i = 0; i < B; ++i) {
    const bool active = -s[i] > 0;
    const double r = an[i] + (active ? -s[i] : 0.0) - f[i];
    loss += std::abs(r);
    if (!grads) continue;
    const double c = (r > 0 ? 1.0 : r < 0 ? -1.0 : 0.0) / static_cast<double>(B);
    if (an[i] > 0) a_bar.row(i) = (c / an[i]) * a.row(i);
    if (active) {
      b_bar.row(i) = -c * e.beta().transpose();
      grads->beta -= c * b.row(i).transpose();
    }
  }
  if (grads) {
    const DenseMatrix zero_a = DenseMatrix::Zero(B, a.cols()), zero_b = DenseMatrix::Zero(B, b.cols());
    e.phi().backward(ta, zero_a, &a_bar, &grads->phi, nullptr, nullptr);
    e.psi().backward(tb, zero_b, &b_bar, &grads->psi, nullptr, nullptr);
  }
  return loss / static_cast<double>(B);
}

inline double emb_loss(const EmbeddingModel& e, const FinslerMetric& metric, const DenseMatrix& x,
                       const DenseMatrix& v, EmbeddingModel::Gradients* grads = nullptr) {
  return emb_loss(e, x, v, metric.evaluate(x, v).value, grads);
}

// mean_i F(x_t, xdot_t)^2 along the interpolant. Gradients reach eta
// through both x_t and xdot_t; stop_x freezes the metric field in x.
inline double geo_loss(const GeodesicModel& g, const FinslerMetric& metric, const DenseMatrix& x0,
                       const DenseMatrix& x1, const Vector& t, nn::MlpNetwork::Gradients* grads = nullptr,
                       bool stop_x = false, GeodesicModel::Output* samples = nullptr,
                       Vector* metric_values = nullptr) {
  require(x0.rows() > 0, "geo_loss: empty batch");
  GeodesicModel::Tape tape;
  auto o = g.interpolate(x0, x1, t, grads ? &tape : nullptr);
  auto b = metric.evaluate(o.x, o.xdot, grads != nullptr && !stop_x);
  if (!b.value.allFinite()) fail(ErrorKind::training, "geo_loss: non-finite metric value");
  const double B = static_cast<double>(x0.rows());
  const double loss = b.value.squaredNorm() / B;
  if (grads) {
    const Vector f_bar = (2.0 / B) * b.value;
    DenseMatrix x_bar, v_bar;
    metric.backward(b, o.x, o.xdot, f_bar, &x_bar, &v_bar, stop_x);
    g.backward(tape, x_bar, v_bar, grads);
  }
  if (samples) *samples = std::move(o);
  if (metric_values) *metric_values = std::move(b.value);
  return loss;
}

struct MetricTrainConfig {
  std::size_t iters = 2000;
  std::size_t batch = 2048;
  std::size_t latent_dim = 32;
  NetShape shape{};
  nn::AdamWOptions optimizer{};
  bool stop_gradient_jacobian = false;
};

struct MetricTrainHistory {
  std::vector<double> emb, geo;
};

struct TrainedMetric {
  EmbeddingModel embedding;
  GeodesicModel geodesic;
  MetricTrainHistory history;
};

namespace detail {

inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

inline DenseMatrix take_rows(const DenseMatrix& x, const std::vector<std::size_t>& idx) {
  DenseMatrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

}  // namespace detail

// Pairs a source and a target batch of equal size by the exact assignment
// under the learned asymmetric cost.
inline std::pair<DenseMatrix, DenseMatrix> coupled_batch(const EmbeddingModel& e, const DenseMatrix& source,
                                                         const DenseMatrix& target, std::size_t batch, Rng& rng) {
  const std::size_t b = std::min({batch, static_cast<std::size_t>(source.rows()), static_cast<std::size_t>(target.rows())});
  DenseMatrix s = detail::take_rows(source, detail::sample_without_replacement(static_cast<std::size_t>(source.rows()), b, rng));
  DenseMatrix t = detail::take_rows(target, detail::sample_without_replacement(static_cast<std::size_t>(target.rows()), b, rng));
  auto pi = ot_coupling(e.cost_matrix(s, t));
  return {std::move(s), detail::take_rows(t, pi.assignment)};
}

// Joint training of (phi, psi, beta) and eta on one pair of marginals: each
// step couples fresh batches under dhat, draws t ~ U[0, 1] per pair and takes
// one optimizer step on L_emb + L_geo.
inline TrainedMetric train_metric(const DenseMatrix& source, const DenseMatrix& target, const FinslerMetric& metric,
                                  const MetricTrainConfig& cfg, Rng& rng) {
  require(source.rows() >= 1 && target.rows() >= 1, "train_metric: empty marginal",
          ErrorKind::data);
  require(static_cast<std::size_t>(source.cols()) == metric.dim() && source.cols() == target.cols(),
          "train_metric: dimension mismatch", ErrorKind::data);
  const auto n = metric.dim();
  TrainedMetric out;
  out.embedding = EmbeddingModel::create(n, cfg.latent_dim, cfg.shape, rng);
  out.geodesic = GeodesicModel::create(n, cfg.shape, rng);
  auto& e = out.embedding;
  auto& g = out.geodesic;
  auto eg = e.make_gradients();
  auto gg = g.eta().make_gradients();
  auto params = e.parameters();
  for (auto s : g.eta().parameters()) params.push_back(s);
  nn::AdamW opt(cfg.optimizer);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    auto [x0, x1] = coupled_batch(e, source, target, cfg.batch, rng);
    Vector t(x0.rows());
    for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = unit(rng);
    eg.set_zero();
    gg.set_zero();
    GeodesicModel::Output mu;
    Vector f_mu;
    const double lg = geo_loss(g, metric, x0, x1, t, &gg, cfg.stop_gradient_jacobian, &mu, &f_mu);
    const double le = emb_loss(e, mu.x, mu.xdot, f_mu, &eg);
    if (!std::isfinite(lg) || !std::isfinite(le))
      fail(ErrorKind::training, "train_metric: non-finite loss at iteration " + std::to_string(it));
    out.history.geo.push_back(lg);
    out.history.emb.push_back(le);
    auto grads = EmbeddingModel::spans(eg);
    for (auto s : gg.spans()) grads.push_back(s);
    opt.step(params, grads);
  }
  return out;
}

}  // namespace ftrj
