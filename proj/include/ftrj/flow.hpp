#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "ftrj/classifier.hpp"
#include "ftrj/embed_geo.hpp"
#include "ftrj/nn/adamw.hpp"
#include "ftrj/nn/mlp.hpp"
#include "ftrj/nn/time_embedding.hpp"

namespace ftrj {

// v_theta(x, emb(t)) -> R^n.
class VectorField {
 public:
  VectorField() = default;
  explicit VectorField(nn::MlpNetwork net) : net_(std::move(net)) {
    require(net_.input_dim() == net_.output_dim() + nn::TimeEmbedding::kDim,
            "VectorField: input must be (x, emb(t))");
    net_.set_mode(nn::NormMode::inference);
  }

  static VectorField create(std::size_t n, const NetShape& shape, bool batch_norm, Rng& rng) {
    nn::MlpOptions o = nn::default_mlp(n + nn::TimeEmbedding::kDim, n, shape.width, shape.depth, batch_norm);
    o.activation = shape.activation;
    return VectorField(nn::MlpNetwork(o, rng));
  }

  std::size_t dim() const { return net_.output_dim(); }
  const nn::MlpNetwork& network() const { return net_; }
  nn::MlpNetwork& network() { return net_; }

  DenseMatrix inputs(const DenseMatrix& x, const Vector& t) const {
    require(static_cast<std::size_t>(x.cols()) == dim() && t.size() == x.rows(), "VectorField: batch shape mismatch");
    DenseMatrix in(x.rows(), x.cols() + nn::TimeEmbedding::kDim);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      in.row(i).head(x.cols()) = x.row(i);
      embedding_.embed(t[i], in.row(i).tail(nn::TimeEmbedding::kDim));
    }
    return in;
  }

  DenseMatrix evaluate(const DenseMatrix& x, const Vector& t) const {
    nn::require_inference(net_);
    return net_.forward(inputs(x, t));
  }

  DenseMatrix operator()(const DenseMatrix& x, double t) const {
    return evaluate(x, Vector::Constant(x.rows(), t));
  }

 private:
  nn::MlpNetwork net_;
  nn::TimeEmbedding embedding_;
};

using Field = std::function<DenseMatrix(const DenseMatrix&, double)>;

// Fixed-step classical RK4 from t_from to t_to.
inline DenseMatrix integrate(const Field& v, const DenseMatrix& x0, double t_from, double t_to, std::size_t steps) {
  if (t_from == t_to) return x0;
  require(steps >= 1, "integrate: steps must be >= 1");
  const double h = (t_to - t_from) / static_cast<double>(steps);
  DenseMatrix x = x0;
  for (std::size_t s = 0; s < steps; ++s) {
    const double t = t_from + h * static_cast<double>(s);
    const DenseMatrix k1 = v(x, t);
    const DenseMatrix k2 = v(x + 0.5 * h * k1, t + 0.5 * h);
    const DenseMatrix k3 = v(x + 0.5 * h * k2, t + 0.5 * h);
    const DenseMatrix k4 = v(x + h * k3, t + h);
    x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!x.allFinite())
      fail(ErrorKind::evaluation, "integrate: non-finite state at step " + std::to_string(s + 1));
  }
  return x;
}

inline DenseMatrix integrate(const VectorField& v, const DenseMatrix& x0, double t_from, double t_to,
                             std::size_t steps) {
  return integrate([&v](const DenseMatrix& x, double t) { return v(x, t); }, x0, t_from, t_to, steps);
}

// Number of steps for a sub-interval when `steps_per_unit` steps span [0, 1].
inline std::size_t steps_for(double dt, std::size_t steps_per_unit) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(std::abs(dt) * static_cast<double>(steps_per_unit))));
}

// Pushes the source batch forward to each requested time (ascending, >= 0).
inline std::map<double, DenseMatrix> simulate(const VectorField& v, const DenseMatrix& x0,
                                              const std::vector<double>& times, std::size_t steps_per_unit) {
  std::map<double, DenseMatrix> out;
  DenseMatrix x = x0;
  double t = 0.0;
  for (double target : times) {
    require(target >= t, "simulate: times must be ascending and >= 0");
    x = integrate(v, x, t, target, steps_for(target - t, steps_per_unit));
    t = target;
    out[target] = x;
  }
  return out;
}

struct TrajectoryTable {
  struct Row {
    std::size_t traj_id;
    double t;
    Vector x, p;
  };
  std::vector<Row> rows;
  std::size_t dim = 0, classes = 0;

  void write_csv(std::ostream& os) const {
    os << "traj_id,t";
    for (std::size_t d = 0; d < dim; ++d) os << ",x_" << d + 1;
    for (std::size_t c = 0; c < classes; ++c) os << ",p_class_" << c;
    os << "\n";
    for (const auto& r : rows) {
      os << r.traj_id << "," << format_double(r.t);
      for (Eigen::Index d = 0; d < r.x.size(); ++d) os << "," << format_double(r.x[d]);
      for (Eigen::Index c = 0; c < r.p.size(); ++c) os << "," << format_double(r.p[c]);
      os << "\n";
    }
  }

  // Argmax class per grid time for one trajectory.
  std::vector<std::size_t> argmax_sequence(std::size_t traj_id) const {
    std::vector<std::size_t> seq;
    for (const auto& r : rows)
      if (r.traj_id == traj_id) seq.push_back(argmax_class(r.p));
    return seq;
  }
};

inline TrajectoryTable simulate_and_classify(const VectorField& v, const Classifier& f, const DenseMatrix& x0,
                                             const std::vector<double>& t_grid, std::size_t steps_per_unit) {
  require(!t_grid.empty(), "simulate_and_classify: empty time grid");
  for (std::size_t i = 0; i < t_grid.size(); ++i) {
    require(t_grid[i] >= 0.0 && t_grid[i] <= 1.0, "simulate_and_classify: grid must lie in [0, 1]");
    require(i == 0 || t_grid[i] > t_grid[i - 1], "simulate_and_classify: grid must be ascending");
  }
  TrajectoryTable table;
  table.dim = static_cast<std::size_t>(x0.cols());
  table.classes = f.num_classes();
  auto states = simulate(v, x0, t_grid, steps_per_unit);
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    for (double t : t_grid) {
      const DenseMatrix& x = states.at(t);
      Vector xi = row_vector(x, i);
      table.rows.push_back({static_cast<std::size_t>(i), t, xi, f.predict_proba(xi)});
    }
  }
  return table;
}

struct FlowTrainConfig {
  std::size_t iters = 2000;
  std::size_t batch = 512;
  NetShape shape{};
  bool batch_norm = true;
  nn::AdamWOptions optimizer{};
  // Half-cosine decay of the learning rate to zero over `iters`.
  bool cosine_decay = false;
};

inline double cosine_learning_rate(double base, std::size_t it, std::size_t iters) {
  if (iters <= 1) return base;
  const double u = static_cast<double>(it) / static_cast<double>(iters - 1);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * u));
}

// Produces a coupled (source, target) batch of equal size.
using Coupler = std::function<std::pair<DenseMatrix, DenseMatrix>(Rng&)>;

// mean_i || v(x_i, t_i) - target_i ||^2 with the field in its current mode.
inline double flow_loss(const VectorField& v, const DenseMatrix& x, const Vector& t, const DenseMatrix& target) {
  const DenseMatrix r = v.network().forward(v.inputs(x, t)) - target;
  return r.rowwise().squaredNorm().mean();
}

struct TrainedFlow {
  VectorField field;
  std::vector<double> loss_history;
};

// Regresses v onto the velocities of the frozen interpolant.
inline TrainedFlow train_flow(const GeodesicModel& g, const Coupler& coupler, const FlowTrainConfig& cfg, Rng& rng) {
  TrainedFlow out;
  out.field = VectorField::create(g.dim(), cfg.shape, cfg.batch_norm, rng);
  auto& net = out.field.network();
  auto grads = net.make_gradients();
  nn::AdamW opt(cfg.optimizer);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    auto [x0, x1] = coupler(rng);
    Vector t(x0.rows());
    for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = unit(rng);
    auto target = g.interpolate(x0, x1, t);
    net.set_mode(nn::NormMode::training);
    nn::MlpNetwork::Tape tape;
    const DenseMatrix pred = net.forward(out.field.inputs(target.x, t), &tape);
    const DenseMatrix r = pred - target.xdot;
    const double loss = r.rowwise().squaredNorm().mean();
    if (!std::isfinite(loss)) fail(ErrorKind::training, "train_flow: non-finite loss at iteration " + std::to_string(it));
    grads.set_zero();
    net.backward(tape, (2.0 / static_cast<double>(r.rows())) * r, nullptr, &grads, nullptr, nullptr);
    if (!net.norms().empty()) net.update_running_stats(tape);
    if (cfg.cosine_decay) opt.set_learning_rate(cosine_learning_rate(cfg.optimizer.learning_rate, it, cfg.iters));
    opt.step(net.parameters(), grads.spans());
    out.loss_history.push_back(loss);
  }
  net.set_mode(nn::NormMode::inference);
  return out;
}

// Coupler drawing equal-size batches and pairing them by exact assignment
// under the learned cost. The embedding is frozen here, so the full cost
// matrix is computed once and batches read sub-blocks of it.
inline Coupler dhat_coupler(const EmbeddingModel& e, const DenseMatrix& source, const DenseMatrix& target,
                            std::size_t batch) {
  auto full = std::make_shared<const CostMatrix>(e.cost_matrix(source, target));
  return [full, source, target, batch](Rng& rng) {
    const auto m = static_cast<std::size_t>(source.rows()), k = static_cast<std::size_t>(target.rows());
    const std::size_t b = std::min({batch, m, k});
    const auto si = detail::sample_without_replacement(m, b, rng);
    const auto ti = detail::sample_without_replacement(k, b, rng);
    CostMatrix c(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(b));
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j)
        c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            (*full)(static_cast<Eigen::Index>(si[i]), static_cast<Eigen::Index>(ti[j]));
    const auto a = solve_assignment(c);
    std::vector<std::size_t> paired(b);
    for (std::size_t i = 0; i < b; ++i) paired[i] = ti[a[i]];
    return std::make_pair(detail::take_rows(source, si), detail::take_rows(target, paired));
  };
}

}  // namespace ftrj
