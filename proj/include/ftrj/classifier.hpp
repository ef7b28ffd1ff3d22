#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "ftrj/data.hpp"
#include "ftrj/lineage.hpp"
#include "ftrj/nn/adamw.hpp"
#include "ftrj/nn/mlp.hpp"

namespace ftrj {

// Cell-type classifier f: R^n -> simplex, an MLP over logits with a softmax
// head. All derivative queries go through the inference-mode network.
class Classifier {
 public:
  struct DualTape {
    nn::MlpNetwork::Tape net;
    DenseMatrix p, pdot, zdot;
  };

  Classifier() = default;
  Classifier(nn::MlpNetwork net, double smoothing) : net_(std::move(net)), smoothing_(smoothing) {
    net_.set_mode(nn::NormMode::inference);
  }

  const nn::MlpNetwork& network() const { return net_; }
  nn::MlpNetwork& network() { return net_; }
  double smoothing() const { return smoothing_; }
  std::size_t num_classes() const { return net_.output_dim(); }
  std::size_t dim() const { return net_.input_dim(); }

  static DenseMatrix softmax(const DenseMatrix& z) {
    DenseMatrix p(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double m = z.row(i).maxCoeff();
      p.row(i) = (z.row(i).array() - m).exp();
      p.row(i) /= p.row(i).sum();
    }
    return p;
  }

  DenseMatrix predict_proba(const DenseMatrix& x) const { return softmax(net_.forward(x)); }

  Vector predict_proba(const Vector& x) const {
    require(static_cast<std::size_t>(x.size()) == dim(), "predict_proba: |x| != n");
    return row_vector(predict_proba(as_row(x)), 0);
  }

  // Returns (f(x), Jf(x) v) per row.
  nn::MlpNetwork::DualOutput forward_dual(const DenseMatrix& x, const DenseMatrix& v,
                                          DualTape* tape = nullptr) const {
    auto out = net_.forward_dual(x, v, tape ? &tape->net : nullptr);
    DenseMatrix p = softmax(out.value);
    DenseMatrix pdot(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double mean = p.row(i).dot(out.tangent.row(i));
      pdot.row(i) = p.row(i).array() * (out.tangent.row(i).array() - mean);
    }
    if (tape) {
      tape->p = p;
      tape->pdot = pdot;
      tape->zdot = std::move(out.tangent);
    }
    return {std::move(p), std::move(pdot)};
  }

  // Reverse of forward_dual: cotangents of (p, pdot) to cotangents of (x, v).
  // The x part contains the second-order term grad_x <pdot_bar, Jf(x) v>.
  void backward_dual(const DualTape& tape, const DenseMatrix& p_bar, const DenseMatrix& pdot_bar,
                     DenseMatrix* x_bar, DenseMatrix* v_bar) const {
    const auto& p = tape.p;
    const auto& zd = tape.zdot;
    DenseMatrix z_bar(p.rows(), p.cols()), zd_bar(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double pz = p.row(i).dot(zd.row(i));
      const double qp = pdot_bar.row(i).dot(p.row(i));
      zd_bar.row(i) = p.row(i).array() * (pdot_bar.row(i).array() - qp);
      // total cotangent on p: direct plus through pdot = p * (zd - <p, zd>)
      Eigen::RowVectorXd pb = p_bar.row(i).array() + pdot_bar.row(i).array() * (zd.row(i).array() - pz) -
                              zd.row(i).array() * qp;
      z_bar.row(i) = p.row(i).array() * (pb.array() - pb.dot(p.row(i)));
    }
    net_.backward(tape.net, z_bar, &zd_bar, nullptr, x_bar, v_bar);
  }

  // Jf(x)^T w, including the softmax Jacobian.
  Vector vjp(const Vector& x, const Vector& w) const {
    require(static_cast<std::size_t>(w.size()) == num_classes(), "classifier_vjp: |w| != |C|");
    require(static_cast<std::size_t>(x.size()) == dim(), "classifier_vjp: |x| != n");
    nn::require_inference(net_);
    nn::MlpNetwork::Tape tape;
    DenseMatrix z = net_.forward(as_row(x), &tape);
    Vector p = row_vector(softmax(z), 0);
    DenseMatrix zb = as_row(Vector(p.array() * (w.array() - w.dot(p))));
    DenseMatrix xb;
    net_.backward(tape, zb, nullptr, nullptr, &xb, nullptr);
    return row_vector(xb, 0);
  }

 private:
  nn::MlpNetwork net_;
  double smoothing_ = 0.0;
};

inline Vector predict_proba(const Classifier& f, const Vector& x) { return f.predict_proba(x); }
inline Vector classifier_vjp(const Classifier& f, const Vector& x, const Vector& w) {
  return f.vjp(x, w);
}

struct ClassifierConfig {
  double smoothing = 0.05;
  std::size_t batch = 512;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;
  double val_fraction = 0.1;
  bool endpoints_only = false;
  nn::AdamWOptions optimizer{};
  std::size_t width = 256;
  std::size_t depth = 3;
  nn::Activation activation = nn::Activation::silu;
  bool batch_norm = true;
};

struct ClassifierReport {
  double validation_accuracy = 1.0;
  std::size_t epochs = 0;
  std::vector<double> loss_history;
  std::vector<std::string> warnings;
};

// Smoothed targets (1 - s) onehot + s / |C|.
inline double smoothed_cross_entropy(const DenseMatrix& p, const std::vector<std::size_t>& labels,
                                     double smoothing, DenseMatrix* z_bar = nullptr) {
  const auto C = p.cols();
  const double off = smoothing / static_cast<double>(C);
  double loss = 0;
  if (z_bar) z_bar->resize(p.rows(), C);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index c = 0; c < C; ++c) {
      const double target = off + (static_cast<std::size_t>(c) == labels[i] ? 1.0 - smoothing : 0.0);
      loss -= target * std::log(std::max(p(i, c), 1e-300));
      if (z_bar) (*z_bar)(i, c) = (p(i, c) - target) / static_cast<double>(p.rows());
    }
  }
  return loss / static_cast<double>(p.rows());
}

inline std::pair<Classifier, ClassifierReport> train_classifier(const TimeSeriesDataset& data,
                                                                const LineageTree& tree,
                                                                const ClassifierConfig& cfg,
                                                                Rng& rng) {
  const auto C = tree.num_classes();
  data.validate(C);
  ClassifierReport report;

  std::vector<std::size_t> pool;
  if (cfg.endpoints_only) {
    auto [t0, t1] = data.training_pair();
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data.times[i] == t0 || data.times[i] == t1) pool.push_back(i);
  } else {
    pool.resize(data.size());
    std::iota(pool.begin(), pool.end(), 0);
  }
  require(pool.size() >= 2, "train_classifier: need at least two samples", ErrorKind::data);
  std::vector<std::size_t> counts(C, 0);
  for (auto i : pool) ++counts[data.labels[i]];
  for (std::size_t c = 0; c < C; ++c)
    if (counts[c] == 0)
      report.warnings.push_back("class '" + tree.class_names[c] + "' absent from classifier data");

  std::shuffle(pool.begin(), pool.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(pool.size())));
  std::vector<std::size_t> val(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(pool.begin() + static_cast<std::ptrdiff_t>(n_val), pool.end());
  require(train.size() >= 2, "train_classifier: training split too small", ErrorKind::data);

  nn::MlpOptions opts = nn::default_mlp(data.dim(), C, cfg.width, cfg.depth, cfg.batch_norm);
  opts.activation = cfg.activation;
  nn::MlpNetwork net(opts, rng);
  nn::AdamW opt(cfg.optimizer);
  auto grads = net.make_gradients();

  auto labels_of = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(data.labels[i]);
    return out;
  };
  const DenseMatrix x_val = data.gather(val);
  const auto y_val = labels_of(val);

  nn::MlpNetwork best = net;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  const std::size_t batch = std::max<std::size_t>(2, std::min(cfg.batch, train.size()));

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double epoch_loss = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < train.size(); start += batch) {
      std::size_t end = std::min(train.size(), start + batch);
      if (train.size() - end == 1) end = train.size();  // keep batch-norm batches >= 2
      std::vector<std::size_t> idx(train.begin() + static_cast<std::ptrdiff_t>(start),
                                   train.begin() + static_cast<std::ptrdiff_t>(end));
      net.set_mode(nn::NormMode::training);
      nn::MlpNetwork::Tape tape;
      DenseMatrix p = Classifier::softmax(net.forward(data.gather(idx), &tape));
      DenseMatrix z_bar;
      const double loss = smoothed_cross_entropy(p, labels_of(idx), cfg.smoothing, &z_bar);
      if (!std::isfinite(loss)) fail(ErrorKind::training, "train_classifier: non-finite loss");
      grads.set_zero();
      net.backward(tape, z_bar, nullptr, &grads, nullptr, nullptr);
      net.update_running_stats(tape);
      opt.step(net.parameters(), grads.spans());
      epoch_loss += loss * static_cast<double>(idx.size());
      seen += idx.size();
      if (end == train.size()) break;
    }
    net.set_mode(nn::NormMode::inference);
    report.loss_history.push_back(epoch_loss / static_cast<double>(seen));
    report.epochs = epoch + 1;
    if (val.empty()) {
      best = net;
      continue;
    }
    const double vloss = smoothed_cross_entropy(Classifier::softmax(net.forward(x_val)), y_val, cfg.smoothing);
    if (vloss < best_val) {
      best_val = vloss;
      best = net;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  best.set_mode(nn::NormMode::inference);
  Classifier f(std::move(best), cfg.smoothing);
  if (!val.empty()) {
    DenseMatrix p = f.predict_proba(x_val);
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      Eigen::Index arg;
      p.row(i).maxCoeff(&arg);
      if (static_cast<std::size_t>(arg) == y_val[static_cast<std::size_t>(i)]) ++correct;
    }
    report.validation_accuracy = static_cast<double>(correct) / static_cast<double>(val.size());
  }
  return {std::move(f), std::move(report)};
}

inline std::size_t argmax_class(const Vector& p) {
  Eigen::Index arg;
  p.maxCoeff(&arg);
  return static_cast<std::size_t>(arg);
}

}  // namespace ftrj
