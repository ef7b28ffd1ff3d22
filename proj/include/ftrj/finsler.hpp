#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>

#include "ftrj/classifier.hpp"
#include "ftrj/lineage.hpp"
#include "ftrj/nn/dense.hpp"
#include "ftrj/rng.hpp"

namespace ftrj {

// Conformal Riemannian base ||v||_g = G(x) ||v||. Only conformal bases are
// representable; the lineage penalty is a valid Finsler term on top of them.
class ConformalMetric {
 public:
  enum class Variant { euclidean, rbf_density };

  static ConformalMetric euclidean() { return ConformalMetric(); }

  // G(x) = (sum_k exp(-||x - c_k||^2 / kappa^2) + eps)^(-1/2)
  static ConformalMetric rbf(DenseMatrix centers, double bandwidth, double epsilon) {
    require(bandwidth > 0, "ConformalMetric: bandwidth must be > 0");
    require(epsilon > 0, "ConformalMetric: epsilon must be > 0");
    ConformalMetric m;
    m.variant_ = Variant::rbf_density;
    m.centers_ = std::move(centers);
    m.bandwidth_ = bandwidth;
    m.epsilon_ = epsilon;
    return m;
  }

  Variant variant() const { return variant_; }
  const DenseMatrix& centers() const { return centers_; }
  double bandwidth() const { return bandwidth_; }
  double epsilon() const { return epsilon_; }

  double scale(const Vector& x) const {
    Vector g;
    scale_batch(as_row(x), g, nullptr);
    return g[0];
  }

  // G per row, and optionally its gradient per row.
  void scale_batch(const DenseMatrix& x, Vector& g, DenseMatrix* grad) const {
    if (variant_ == Variant::euclidean) {
      g = Vector::Ones(x.rows());
      if (grad) *grad = DenseMatrix::Zero(x.rows(), x.cols());
      return;
    }
    if (centers_.rows() == 0) fail(ErrorKind::invalid_argument, "ConformalMetric: rbf variant is not fitted");
    require(centers_.cols() == x.cols(), "ConformalMetric: dimension mismatch");
    const double inv_k2 = 1.0 / (bandwidth_ * bandwidth_);
    g.resize(x.rows());
    if (grad) grad->resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double s = 0;
      Eigen::RowVectorXd ds = Eigen::RowVectorXd::Zero(x.cols());
      for (Eigen::Index k = 0; k < centers_.rows(); ++k) {
        Eigen::RowVectorXd d = x.row(i) - centers_.row(k);
        const double w = std::exp(-d.squaredNorm() * inv_k2);
        s += w;
        if (grad) ds -= 2.0 * inv_k2 * w * d;
      }
      const double base = s + epsilon_;
      g[i] = 1.0 / std::sqrt(base);
      if (grad) grad->row(i) = -0.5 * std::pow(base, -1.5) * ds;
    }
  }

 private:
  Variant variant_ = Variant::euclidean;
  DenseMatrix centers_;
  double bandwidth_ = 1.0;
  double epsilon_ = 0.05;
};

inline double conformal_scale(const ConformalMetric& base, const Vector& x) { return base.scale(x); }

// Lloyd's k-means with k-means++ seeding.
inline DenseMatrix kmeans(const DenseMatrix& points, std::size_t k, Rng& rng, std::size_t iters = 50) {
  require(points.rows() > 0, "kmeans: empty input");
  k = std::min<std::size_t>(k, static_cast<std::size_t>(points.rows()));
  DenseMatrix centers(static_cast<Eigen::Index>(k), points.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, points.rows() - 1);
  centers.row(0) = points.row(pick(rng));
  Vector d2 = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (std::size_t c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index chosen = 0;
    if (total > 0) {
      double r = uniform01(rng) * total;
      for (chosen = 0; chosen + 1 < points.rows(); ++chosen) {
        r -= d2[chosen];
        if (r <= 0) break;
      }
    }
    centers.row(static_cast<Eigen::Index>(c)) = points.row(chosen);
    d2 = d2.cwiseMin((points.rowwise() - centers.row(static_cast<Eigen::Index>(c))).rowwise().squaredNorm());
  }
  std::vector<Eigen::Index> assign(static_cast<std::size_t>(points.rows()), 0);
  for (std::size_t it = 0; it < iters; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      Eigen::Index best;
      (centers.rowwise() - points.row(i)).rowwise().squaredNorm().minCoeff(&best);
      if (best != assign[static_cast<std::size_t>(i)] || it == 0) changed = true;
      assign[static_cast<std::size_t>(i)] = best;
    }
    DenseMatrix sums = DenseMatrix::Zero(centers.rows(), centers.cols());
    Vector counts = Vector::Zero(centers.rows());
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
      counts[assign[static_cast<std::size_t>(i)]] += 1;
    }
    for (Eigen::Index c = 0; c < centers.rows(); ++c)
      if (counts[c] > 0) centers.row(c) = sums.row(c) / counts[c];
    if (!changed) break;
  }
  return centers;
}

inline ConformalMetric fit_rbf_metric(const DenseMatrix& points, std::size_t clusters, double bandwidth,
                                      double epsilon, Rng& rng) {
  return ConformalMetric::rbf(kmeans(points, clusters, rng), bandwidth, epsilon);
}

// F(x, v) = G(x) ||v|| + lambda G(x) F~(x, v) with the lineage penalty
// F~(x, v) = sum_c f_c(x) < v, Jf(x)^T (1 - A^T) e_c >_+.
class FinslerMetric {
 public:
  struct Batch {
    Vector value, penalty, scale, speed;
    DenseMatrix scale_grad;
    DenseMatrix p, s;  // class probabilities and per-class signed rates
    Classifier::DualTape tape;
    bool penalty_active = false;
  };

  FinslerMetric(std::shared_ptr<const Classifier> classifier, IllegalDirectionMatrix illegal,
                ConformalMetric base, double lambda)
      : classifier_(std::move(classifier)), illegal_(std::move(illegal)), base_(std::move(base)),
        lambda_(lambda) {
    require(classifier_ != nullptr, "FinslerMetric: classifier required");
    require(lambda_ >= 0 && std::isfinite(lambda_), "FinslerMetric: lambda must be >= 0");
    require(static_cast<std::size_t>(illegal_.m.rows()) == classifier_->num_classes(),
            "FinslerMetric: classifier output dim != lineage size");
  }

  const Classifier& classifier() const { return *classifier_; }
  std::shared_ptr<const Classifier> classifier_ptr() const { return classifier_; }
  const IllegalDirectionMatrix& illegal() const { return illegal_; }
  const ConformalMetric& base() const { return base_; }
  double lambda() const { return lambda_; }
  std::size_t dim() const { return classifier_->dim(); }

  FinslerMetric with_lambda(double lambda) const {
    return FinslerMetric(classifier_, illegal_, base_, lambda);
  }

  // The lineage term contributes nothing when lambda = 0 or every transition
  // is admissible; it is then skipped so results equal the pure base metric.
  bool penalty_active() const { return lambda_ > 0 && !illegal_.is_zero(); }

  // Reference evaluation: one classifier VJP per class.
  double tilde_f(const Vector& x, const Vector& v) const {
    check_pair(x, v);
    const Vector p = classifier_->predict_proba(x);
    double out = 0;
    for (Eigen::Index c = 0; c < illegal_.m.cols(); ++c) {
      if (p[c] == 0.0 || illegal_.m.col(c).isZero()) continue;
      const Vector dir = classifier_->vjp(x, illegal_.m.col(c));
      out += p[c] * std::max(0.0, v.dot(dir));
    }
    return out;
  }

  double operator()(const Vector& x, const Vector& v) const {
    check_pair(x, v);
    const double n = v.norm();
    if (n == 0.0) return 0.0;
    const double g = base_.scale(x);
    double f = g * n;
    if (penalty_active()) f += lambda_ * g * tilde_f(x, v);
    return f;
  }

  // Batched evaluation through one forward-mode classifier pass:
  // the signed rates are s = (Jf v)^T M, so F~ = sum_c p_c (s_c)_+.
  Batch evaluate(const DenseMatrix& x, const DenseMatrix& v, bool need_scale_grad = false) const {
    require(x.rows() == v.rows() && x.cols() == v.cols(), "FinslerMetric: batch shape mismatch");
    require(static_cast<std::size_t>(x.cols()) == dim(), "FinslerMetric: dimension mismatch");
    require(x.allFinite() && v.allFinite(), "FinslerMetric: non-finite input");
    Batch b;
    b.speed = v.rowwise().norm();
    base_.scale_batch(x, b.scale, need_scale_grad ? &b.scale_grad : nullptr);
    b.penalty_active = penalty_active();
    b.value = b.scale.cwiseProduct(b.speed);
    if (!b.penalty_active) {
      b.penalty = Vector::Zero(x.rows());
      return b;
    }
    auto out = classifier_->forward_dual(x, v, &b.tape);
    b.p = std::move(out.value);
    b.s = out.tangent * illegal_.m;
    b.penalty = (b.p.array() * b.s.array().max(0.0)).rowwise().sum();
    b.value += lambda_ * b.scale.cwiseProduct(b.penalty);
    return b;
  }

  // Cotangent of F per row to cotangents of (x, v). With stop_x the metric
  // field (classifier Jacobian and G) is treated as constant in x.
  void backward(const Batch& b, const DenseMatrix& x, const DenseMatrix& v, const Vector& f_bar,
                DenseMatrix* x_bar, DenseMatrix* v_bar, bool stop_x = false) const {
    const auto B = v.rows();
    DenseMatrix vb(B, v.cols());
    for (Eigen::Index i = 0; i < B; ++i) {
      const double sp = b.speed[i];
      if (sp > 0)
        vb.row(i) = (f_bar[i] * b.scale[i] / sp) * v.row(i);
      else
        vb.row(i).setZero();
    }
    DenseMatrix xb = DenseMatrix::Zero(B, x.cols());
    if (!stop_x && base_.variant() != ConformalMetric::Variant::euclidean) {
      require(b.scale_grad.rows() == B, "FinslerMetric: evaluate() without scale gradient");
      for (Eigen::Index i = 0; i < B; ++i)
        xb.row(i) = f_bar[i] * (b.speed[i] + lambda_ * b.penalty[i]) * b.scale_grad.row(i);
    }
    if (b.penalty_active) {
      DenseMatrix p_bar(b.p.rows(), b.p.cols());
      DenseMatrix active(b.s.rows(), b.s.cols());
      for (Eigen::Index i = 0; i < B; ++i) {
        const double w = f_bar[i] * lambda_ * b.scale[i];
        for (Eigen::Index c = 0; c < b.s.cols(); ++c) {
          p_bar(i, c) = w * std::max(0.0, b.s(i, c));
          active(i, c) = b.s(i, c) > 0 ? w * b.p(i, c) : 0.0;
        }
      }
      DenseMatrix pdot_bar = active * illegal_.m.transpose();
      DenseMatrix cx, cv;
      classifier_->backward_dual(b.tape, p_bar, pdot_bar, &cx, &cv);
      vb += cv;
      if (!stop_x) xb += cx;
    }
    if (x_bar) *x_bar = std::move(xb);
    if (v_bar) *v_bar = std::move(vb);
  }

 private:
  void check_pair(const Vector& x, const Vector& v) const {
    require(static_cast<std::size_t>(x.size()) == dim() && x.size() == v.size(),
            "FinslerMetric: |x|, |v| must equal n");
    require(x.allFinite() && v.allFinite(), "FinslerMetric: non-finite input");
  }

  std::shared_ptr<const Classifier> classifier_;
  IllegalDirectionMatrix illegal_;
  ConformalMetric base_;
  double lambda_;
};

inline double tilde_f(const FinslerMetric& metric, const Vector& x, const Vector& v) {
  return metric.tilde_f(x, v);
}
inline double finsler_f(const FinslerMetric& metric, const Vector& x, const Vector& v) {
  return metric(x, v);
}

// ---------------------------------------------------------------------------
// Empirical asymmetric-norm checks: positive homogeneity, subadditivity and a
// uniform lower bound F(x, v) >= m ||v||.

struct AxiomTolerances {
  double homogeneity = 1e-12;     // relative
  double subadditivity = 1e-8;    // absolute, per unit of F(u) + F(v) above 1
  double min_lower_bound = 1e-6;  // m must exceed this
};

struct AxiomReport {
  double homogeneity_violation = 0;
  double subadditivity_violation = 0;
  double lower_bound = std::numeric_limits<double>::infinity();
  bool homogeneity_ok = true;
  bool subadditivity_ok = true;
  bool nondegenerate_ok = true;
  std::size_t samples = 0;

  bool all_ok() const { return homogeneity_ok && subadditivity_ok && nondegenerate_ok; }
};

using LocalNorm = std::function<double(const Vector&, const Vector&)>;

// points and directions are paired row by row; subadditivity pairs direction
// i with direction i + 1 at point i.
inline AxiomReport check_finsler_axioms(const LocalNorm& F, const DenseMatrix& points,
                                        const DenseMatrix& directions, AxiomTolerances tol = {}) {
  require(points.rows() > 0 && directions.rows() > 0, "check_finsler_axioms: empty sample set");
  require(points.rows() == directions.rows() && points.cols() == directions.cols(),
          "check_finsler_axioms: points and directions must be paired");
  AxiomReport r;
  const auto N = points.rows();
  r.samples = static_cast<std::size_t>(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    const Vector x = row_vector(points, i);
    const Vector v = row_vector(directions, i);
    const Vector u = row_vector(directions, (i + 1) % N);
    const double fv = F(x, v);
    for (double a : {0.5, 2.0, 10.0}) {
      const double lhs = F(x, a * v), rhs = a * fv;
      const double scale = std::max(std::abs(rhs), std::numeric_limits<double>::min());
      r.homogeneity_violation = std::max(r.homogeneity_violation, std::abs(lhs - rhs) / scale);
    }
    const double fu = F(x, u);
    const double excess = F(x, u + v) - fu - fv;
    r.subadditivity_violation =
        std::max(r.subadditivity_violation, std::max(0.0, excess) / std::max(1.0, fu + fv));
    const double n = v.norm();
    if (n > 0) r.lower_bound = std::min(r.lower_bound, fv / n);
  }
  r.homogeneity_ok = r.homogeneity_violation <= tol.homogeneity;
  r.subadditivity_ok = r.subadditivity_violation <= tol.subadditivity;
  r.nondegenerate_ok = r.lower_bound > tol.min_lower_bound;
  return r;
}

}  // namespace ftrj
