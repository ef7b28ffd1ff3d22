#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

#include "ftrj/error.hpp"
#include "ftrj/nn/dense.hpp"

namespace ftrj {

// Rows index the source batch (earlier time), columns the target batch.
// Costs need not be symmetric.
using CostMatrix = DenseMatrix;
using CostFn = std::function<double(const Vector&, const Vector&)>;

inline CostMatrix build_cost(const DenseMatrix& source, const DenseMatrix& target, const CostFn& cost) {
  require(source.rows() > 0 && target.rows() > 0, "build_cost: empty batch");
  require(source.cols() == target.cols(), "build_cost: dimension mismatch");
  CostMatrix c(source.rows(), target.rows());
  for (Eigen::Index i = 0; i < source.rows(); ++i) {
    const Vector x = row_vector(source, i);
    for (Eigen::Index j = 0; j < target.rows(); ++j) {
      const double v = cost(x, row_vector(target, j));
      if (!std::isfinite(v)) fail(ErrorKind::invalid_argument, "build_cost: non-finite cost");
      c(i, j) = v;
    }
  }
  return c;
}

inline CostMatrix euclidean_cost(const DenseMatrix& a, const DenseMatrix& b) {
  require(a.cols() == b.cols(), "euclidean_cost: dimension mismatch");
  CostMatrix c(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    c.row(i) = (b.rowwise() - a.row(i)).rowwise().norm().transpose();
  return c;
}

// Minimum-cost perfect matching on a square matrix (shortest augmenting
// path with potentials, O(n^3)). Returns the column assigned to each row.
inline std::vector<std::size_t> solve_assignment(const CostMatrix& cost) {
  require(cost.rows() == cost.cols(), "solve_assignment: cost must be square");
  require(cost.allFinite(), "solve_assignment: non-finite cost");
  const auto n = static_cast<std::size_t>(cost.rows());
  if (n == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n);
  for (std::size_t j = 1; j <= n; ++j) assign[p[j] - 1] = j - 1;
  return assign;
}

struct Coupling {
  struct Entry {
    std::size_t source, target;
    double weight;
  };
  std::size_t rows = 0, cols = 0;
  std::vector<Entry> plan;
  // Target index per source row for permutation couplings; empty otherwise.
  std::vector<std::size_t> assignment;
  double marginal_error = 0.0;

  double cost(const CostMatrix& c) const {
    double s = 0;
    for (const auto& e : plan) s += e.weight * c(static_cast<Eigen::Index>(e.source), static_cast<Eigen::Index>(e.target));
    return s;
  }
};

namespace detail {

inline double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& z) {
  const double m = z.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((z.array() - m).exp().sum());
}

struct SinkhornResult {
  DenseMatrix plan;
  Vector f, g;
  double marginal_error = 0;
};

// Log-domain Sinkhorn with uniform marginals.
inline SinkhornResult sinkhorn(const CostMatrix& c, double epsilon, std::size_t max_iters, double tol) {
  const auto m = c.rows(), k = c.cols();
  const double log_a = -std::log(static_cast<double>(m)), log_b = -std::log(static_cast<double>(k));
  SinkhornResult r;
  r.f = Vector::Zero(m);
  r.g = Vector::Zero(k);
  auto row_marginal_error = [&] {
    double err = 0;
    for (Eigen::Index i = 0; i < m; ++i) {
      Eigen::RowVectorXd z = (r.g.transpose() - c.row(i)) / epsilon;
      err += std::abs(std::exp(r.f[i] / epsilon + log_sum_exp(z)) - std::exp(log_a));
    }
    return err;
  };
  for (std::size_t it = 0; it < max_iters; ++it) {
    for (Eigen::Index i = 0; i < m; ++i)
      r.f[i] = epsilon * log_a - epsilon * log_sum_exp((r.g.transpose() - c.row(i)) / epsilon);
    for (Eigen::Index j = 0; j < k; ++j)
      r.g[j] = epsilon * log_b - epsilon * log_sum_exp((r.f - c.col(j)).transpose() / epsilon);
    // columns are exact after the g update; rows carry the residual
    if (it % 10 == 9 || it + 1 == max_iters) {
      r.marginal_error = row_marginal_error();
      if (r.marginal_error <= tol) break;
    }
  }
  r.plan.resize(m, k);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < k; ++j) r.plan(i, j) = std::exp((r.f[i] + r.g[j] - c(i, j)) / epsilon);
  return r;
}

// Projects a nonnegative plan onto the transport polytope with uniform
// marginals (scale down over-full rows and columns, then fill the deficit
// with a rank-one correction).
inline DenseMatrix round_to_marginals(DenseMatrix p) {
  const auto m = p.rows(), k = p.cols();
  const double a = 1.0 / static_cast<double>(m), b = 1.0 / static_cast<double>(k);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double s = p.row(i).sum();
    if (s > a) p.row(i) *= a / s;
  }
  for (Eigen::Index j = 0; j < k; ++j) {
    const double s = p.col(j).sum();
    if (s > b) p.col(j) *= b / s;
  }
  Vector ra = Vector::Constant(m, a) - p.rowwise().sum();
  Vector rb = Vector::Constant(k, b) - p.colwise().sum().transpose();
  ra = ra.cwiseMax(0.0);
  rb = rb.cwiseMax(0.0);
  const double mass = ra.sum();
  if (mass > 0) p += ra * rb.transpose() / mass;
  return p;
}

inline double marginal_error(const DenseMatrix& p) {
  const double a = 1.0 / static_cast<double>(p.rows()), b = 1.0 / static_cast<double>(p.cols());
  return (p.rowwise().sum().array() - a).abs().sum() + (p.colwise().sum().array() - b).abs().sum();
}

}  // namespace detail

struct SinkhornOptions {
  double epsilon_scale = 0.05;  // epsilon = scale * mean cost
  std::size_t max_iters = 500;
  double tolerance = 1e-6;
};

// Exact assignment for square costs; entropic plan rounded onto the
// uniform marginals otherwise.
inline Coupling ot_coupling(const CostMatrix& cost, SinkhornOptions opts = {}) {
  require(cost.rows() > 0 && cost.cols() > 0, "ot_coupling: empty cost");
  require(cost.allFinite() && (cost.array() >= 0).all(), "ot_coupling: costs must be finite and >= 0");
  Coupling out;
  out.rows = static_cast<std::size_t>(cost.rows());
  out.cols = static_cast<std::size_t>(cost.cols());
  if (cost.rows() == cost.cols()) {
    out.assignment = solve_assignment(cost);
    const double w = 1.0 / static_cast<double>(out.rows);
    for (std::size_t i = 0; i < out.rows; ++i) out.plan.push_back({i, out.assignment[i], w});
    return out;
  }
  const double mean = cost.mean();
  DenseMatrix plan;
  if (mean == 0.0) {
    plan = DenseMatrix::Constant(cost.rows(), cost.cols(), 1.0 / static_cast<double>(cost.size()));
  } else {
    auto r = detail::sinkhorn(cost, opts.epsilon_scale * mean, opts.max_iters, opts.tolerance);
    plan = detail::round_to_marginals(std::move(r.plan));
  }
  out.marginal_error = detail::marginal_error(plan);
  for (Eigen::Index i = 0; i < plan.rows(); ++i)
    for (Eigen::Index j = 0; j < plan.cols(); ++j)
      if (plan(i, j) > 0)
        out.plan.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), plan(i, j)});
  return out;
}

struct W1Options {
  // Unequal sizes are solved exactly by replicating both sets up to
  // lcm(m, k) points when lcm(m, k) stays at or below this bound.
  std::size_t max_exact_size = 2048;
  SinkhornOptions sinkhorn{};
};

namespace detail {

inline DenseMatrix replicate_rows(const DenseMatrix& a, std::size_t times) {
  DenseMatrix out(a.rows() * static_cast<Eigen::Index>(times), a.cols());
  for (std::size_t r = 0; r < times; ++r) out.middleRows(static_cast<Eigen::Index>(r) * a.rows(), a.rows()) = a;
  return out;
}

// Transport cost of the entropic plan.
inline double entropic_ot(const CostMatrix& c, double epsilon, const SinkhornOptions& opts) {
  auto r = sinkhorn(c, epsilon, opts.max_iters, opts.tolerance);
  return r.plan.cwiseProduct(c).sum();
}

}  // namespace detail

// W1 between uniform empirical measures with Euclidean ground cost. Exact
// whenever an assignment formulation fits; otherwise the entropic transport
// cost debiased by the two self-transport terms, which is approximate.
inline double wasserstein1(const DenseMatrix& a, const DenseMatrix& b, W1Options opts = {}) {
  require(a.rows() > 0 && b.rows() > 0, "wasserstein1: empty point set");
  require(a.cols() == b.cols(), "wasserstein1: dimension mismatch");
  const auto m = static_cast<std::size_t>(a.rows()), k = static_cast<std::size_t>(b.rows());
  const std::size_t l = std::lcm(m, k);
  if (m == k || l <= opts.max_exact_size) {
    DenseMatrix aa = m == l ? a : detail::replicate_rows(a, l / m);
    DenseMatrix bb = k == l ? b : detail::replicate_rows(b, l / k);
    CostMatrix c = euclidean_cost(aa, bb);
    auto assign = solve_assignment(c);
    double s = 0;
    for (std::size_t i = 0; i < l; ++i) s += c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(assign[i]));
    return s / static_cast<double>(l);
  }
  CostMatrix cab = euclidean_cost(a, b);
  const double eps = opts.sinkhorn.epsilon_scale * cab.mean();
  if (eps == 0.0) return 0.0;
  const double ab = detail::entropic_ot(cab, eps, opts.sinkhorn);
  const double aa = detail::entropic_ot(euclidean_cost(a, a), eps, opts.sinkhorn);
  const double bb = detail::entropic_ot(euclidean_cost(b, b), eps, opts.sinkhorn);
  return std::max(0.0, ab - 0.5 * (aa + bb));
}

struct MarginalReport {
  std::map<double, double> per_t;
  double mean = 0.0;
};

inline MarginalReport evaluate_marginals(const std::map<double, DenseMatrix>& simulated,
                                         const std::map<double, DenseMatrix>& truth, W1Options opts = {}) {
  if (truth.empty()) fail(ErrorKind::evaluation, "evaluate_marginals: no held-out timepoints");
  MarginalReport r;
  for (const auto& [t, pts] : truth) {
    auto it = simulated.find(t);
    if (it == simulated.end())
      fail(ErrorKind::evaluation, "evaluate_marginals: no simulated samples at t=" + std::to_string(t));
    if (pts.rows() == 0 || it->second.rows() == 0)
      fail(ErrorKind::evaluation, "evaluate_marginals: empty marginal at t=" + std::to_string(t));
    r.per_t[t] = wasserstein1(it->second, pts, opts);
  }
  double s = 0;
  for (const auto& [t, w] : r.per_t) s += w;
  r.mean = s / static_cast<double>(r.per_t.size());
  return r;
}

}  // namespace ftrj
