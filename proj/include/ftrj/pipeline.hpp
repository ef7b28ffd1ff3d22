#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftrj/classifier.hpp"
#include "ftrj/config.hpp"
#include "ftrj/data.hpp"
#include "ftrj/embed_geo.hpp"
#include "ftrj/finsler.hpp"
#include "ftrj/flow.hpp"
#include "ftrj/lineage.hpp"
#include "ftrj/nn/checkpoint.hpp"
#include "ftrj/transport.hpp"

namespace ftrj {

namespace fs = std::filesystem;

inline constexpr int kMetricsSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Inputs

struct Problem {
  TimeSeriesDataset data;
  LineageTree tree;
  std::string data_hash, lineage_hash;

  DenseMatrix source() const { return data.points_at(data.training_pair().first); }
  DenseMatrix target() const { return data.points_at(data.training_pair().second); }
};

inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string read_file(const std::string& path, ErrorKind kind = ErrorKind::data) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(kind, "cannot open " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::data, "cannot write " + path.string());
  os << text;
}

inline Problem load_problem(const ExperimentConfig& cfg) {
  Problem p;
  if (cfg.data_source == "synthetic") {
    auto [ds, tree] = gen_synthetic(cfg.synthetic, derive_seed(cfg.seed, "data"));
    p.data = std::move(ds);
    p.tree = std::move(tree);
    std::ostringstream os;
    save_dataset(p.data, os);
    p.data_hash = fnv1a_hex(os.str());
  } else {
    p.data_hash = fnv1a_hex(read_file(cfg.data_path));
    p.data = load_dataset(cfg.data_path);
  }
  if (!cfg.lineage_path.empty()) {
    p.tree = load_tree(cfg.lineage_path);
    p.lineage_hash = fnv1a_hex(read_file(cfg.lineage_path));
  } else if (cfg.data_source != "synthetic") {
    fail(ErrorKind::config, "config: data.lineage is required for file data");
  } else {
    p.lineage_hash = fnv1a_hex(tree_to_json(p.tree).dump());
  }
  if (cfg.lineage_transitive_closure) p.tree = transitive_closure(p.tree);
  if (!cfg.data_heldout.empty()) set_heldout(p.data, parse_time_list(cfg.data_heldout));
  if (p.data.roles.empty()) assign_default_roles(p.data);
  p.data.validate(p.tree.num_classes());
  (void)p.data.training_pair();
  if (p.data.times_with(TimeRole::heldout).empty())
    fail(ErrorKind::data, "dataset: no held-out timepoint to evaluate");
  return p;
}

// ---------------------------------------------------------------------------
// Component configs

inline NetShape net_shape(const ExperimentConfig& cfg) {
  return {cfg.net_width, cfg.net_depth, nn::parse_activation(cfg.net_activation)};
}

inline ClassifierConfig classifier_config(const ExperimentConfig& cfg) {
  ClassifierConfig c;
  c.smoothing = cfg.classifier_smoothing;
  c.batch = cfg.classifier_batch;
  c.max_epochs = cfg.classifier_max_epochs;
  c.patience = cfg.classifier_patience;
  c.val_fraction = cfg.classifier_val_fraction;
  c.endpoints_only = cfg.classifier_train_on == "endpoints";
  c.optimizer.learning_rate = cfg.classifier_lr;
  c.optimizer.weight_decay = cfg.train_weight_decay;
  c.width = cfg.net_width;
  c.depth = cfg.net_depth;
  c.activation = nn::parse_activation(cfg.net_activation);
  c.batch_norm = cfg.net_batch_norm;
  return c;
}

inline MetricTrainConfig metric_config(const ExperimentConfig& cfg) {
  MetricTrainConfig c;
  c.iters = cfg.train_iters;
  c.batch = cfg.train_batch;
  c.latent_dim = cfg.embed_latent_dim;
  c.shape = net_shape(cfg);
  c.optimizer.learning_rate = cfg.train_lr;
  c.optimizer.weight_decay = cfg.train_weight_decay;
  c.stop_gradient_jacobian = cfg.geodesic_stop_gradient_jacobian;
  return c;
}

inline FlowTrainConfig flow_config(const ExperimentConfig& cfg) {
  FlowTrainConfig c;
  c.iters = cfg.flow_iters;
  c.batch = cfg.flow_batch;
  c.shape = net_shape(cfg);
  c.batch_norm = cfg.net_batch_norm;
  c.optimizer.learning_rate = cfg.flow_lr;
  c.optimizer.weight_decay = cfg.train_weight_decay;
  c.cosine_decay = cfg.flow_cosine_decay;
  return c;
}

// Master seed of replica k. Replica 0 of a run with seed s is what the
// single-phase commands train.
inline std::uint64_t replica_seed(std::uint64_t seed, std::size_t k) {
  return derive_seed(seed, "replica/" + std::to_string(k));
}

// ---------------------------------------------------------------------------
// Phases

struct Models {
  std::shared_ptr<const Classifier> classifier;
  ClassifierReport classifier_report;
  ConformalMetric base = ConformalMetric::euclidean();
  std::optional<TrainedMetric> metric;
  std::optional<TrainedFlow> flow;
};

// Re-raises a failure with the phase name prepended, keeping its class.
template <typename F>
auto run_phase(const std::string& phase, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const Error& e) {
    throw Error(e.kind(), "phase " + phase + ": " + e.what());
  }
}

inline void train_classifier_phase(const Problem& p, const ExperimentConfig& cfg, std::uint64_t seed, Models& m) {
  run_phase("classifier", [&] {
    Rng rng = make_rng(seed, "classifier");
    auto [f, report] = train_classifier(p.data, p.tree, classifier_config(cfg), rng);
    m.classifier = std::make_shared<const Classifier>(std::move(f));
    m.classifier_report = std::move(report);
  });
}

inline ConformalMetric fit_base(const Problem& p, const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.finsler_base == "euclidean") return ConformalMetric::euclidean();
  std::vector<std::size_t> idx;
  for (double t : p.data.times_with(TimeRole::train))
    for (auto i : p.data.indices_at(t)) idx.push_back(i);
  Rng rng = make_rng(seed, "base");
  return fit_rbf_metric(p.data.gather(idx), cfg.finsler_rbf_clusters, cfg.finsler_rbf_bandwidth,
                        cfg.finsler_rbf_epsilon, rng);
}

inline FinslerMetric make_metric(const Problem& p, const ExperimentConfig& cfg, const Models& m) {
  require(m.classifier != nullptr, "metric requires a trained classifier", ErrorKind::data);
  return FinslerMetric(m.classifier, illegal_matrix(p.tree), m.base, cfg.finsler_lambda);
}

inline void train_metric_phase(const Problem& p, const ExperimentConfig& cfg, std::uint64_t seed, Models& m) {
  run_phase("metric", [&] {
    m.base = fit_base(p, cfg, seed);
    Rng rng = make_rng(seed, "metric");
    m.metric = train_metric(p.source(), p.target(), make_metric(p, cfg, m), metric_config(cfg), rng);
  });
}

inline void train_flow_phase(const Problem& p, const ExperimentConfig& cfg, std::uint64_t seed, Models& m) {
  run_phase("flow", [&] {
    require(m.metric.has_value(), "flow requires a trained metric", ErrorKind::data);
    const DenseMatrix source = p.source(), target = p.target();
    Rng rng = make_rng(seed, "flow");
    m.flow = train_flow(m.metric->geodesic, dhat_coupler(m.metric->embedding, source, target, cfg.flow_batch),
                        flow_config(cfg), rng);
  });
}

// ---------------------------------------------------------------------------
// Checkpoints: checkpoints/replica_<k>/{classifier,metric,flow}.ftrj

inline fs::path replica_dir(const fs::path& run, std::size_t k) {
  return run / "checkpoints" / ("replica_" + std::to_string(k));
}

inline void save_classifier(const fs::path& dir, const Models& m) {
  fs::create_directories(dir);
  nn::TensorMap map;
  nn::store_network(map, "classifier", m.classifier->network());
  map["classifier.smoothing"] = nn::to_tensor(Vector(Vector::Constant(1, m.classifier->smoothing())));
  nn::save_checkpoint((dir / "classifier.ftrj").string(), map);
}

inline void save_metric(const fs::path& dir, const Models& m) {
  fs::create_directories(dir);
  nn::TensorMap map;
  const auto& e = m.metric->embedding;
  nn::store_network(map, "phi", e.phi());
  nn::store_network(map, "psi", e.psi());
  map["beta"] = nn::to_tensor(e.beta());
  nn::store_network(map, "eta", m.metric->geodesic.eta());
  if (m.base.variant() == ConformalMetric::Variant::rbf_density) {
    map["base.centers"] = nn::to_tensor(m.base.centers());
    Vector hp(2);
    hp << m.base.bandwidth(), m.base.epsilon();
    map["base.params"] = nn::to_tensor(hp);
  }
  nn::save_checkpoint((dir / "metric.ftrj").string(), map);
}

inline void save_flow(const fs::path& dir, const Models& m) {
  fs::create_directories(dir);
  nn::TensorMap map;
  nn::store_network(map, "field", m.flow->field.network());
  nn::save_checkpoint((dir / "flow.ftrj").string(), map);
}

inline void load_classifier(const fs::path& dir, Models& m) {
  auto map = nn::load_checkpoint((dir / "classifier.ftrj").string());
  const double s = nn::vector_from(nn::find_tensor(map, "classifier.smoothing"))[0];
  m.classifier = std::make_shared<const Classifier>(nn::load_network(map, "classifier"), s);
}

inline void load_metric(const fs::path& dir, Models& m) {
  auto map = nn::load_checkpoint((dir / "metric.ftrj").string());
  TrainedMetric t;
  t.embedding = EmbeddingModel(nn::load_network(map, "phi"), nn::load_network(map, "psi"),
                               nn::vector_from(nn::find_tensor(map, "beta")));
  t.geodesic = GeodesicModel(nn::load_network(map, "eta"));
  m.metric = std::move(t);
  if (map.count("base.centers")) {
    const Vector hp = nn::vector_from(nn::find_tensor(map, "base.params"));
    m.base = ConformalMetric::rbf(nn::matrix_from(nn::find_tensor(map, "base.centers")), hp[0], hp[1]);
  } else {
    m.base = ConformalMetric::euclidean();
  }
}

inline void load_flow(const fs::path& dir, Models& m) {
  auto map = nn::load_checkpoint((dir / "flow.ftrj").string());
  m.flow = TrainedFlow{VectorField(nn::load_network(map, "field")), {}};
}

inline Models load_models(const fs::path& dir) {
  for (const char* f : {"classifier.ftrj", "metric.ftrj", "flow.ftrj"})
    if (!fs::exists(dir / f)) fail(ErrorKind::data, "missing checkpoint " + (dir / f).string());
  Models m;
  load_classifier(dir, m);
  load_metric(dir, m);
  load_flow(dir, m);
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation

struct ReplicaMetrics {
  std::uint64_t seed = 0;
  std::map<double, double> per_t;  // physical held-out time -> W1
  double mean = 0;
  double validation_w1 = 0;        // first held-out time, validation subsample
  double lineage_consistency = 0;  // fraction of sampled trajectories
};

inline std::vector<double> uniform_grid(std::size_t n) {
  if (n == 1) return {1.0};
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = static_cast<double>(i) / static_cast<double>(n - 1);
  return g;
}

// Pushes every source point to each held-out time.
inline std::map<double, DenseMatrix> simulate_heldout(const Problem& p, const ExperimentConfig& cfg, const Models& m) {
  std::vector<double> ts;
  for (double t : p.data.times_with(TimeRole::heldout)) ts.push_back(p.data.normalized_time(t));
  std::vector<double> order = ts;
  std::sort(order.begin(), order.end());
  auto sim = simulate(m.flow->field, p.source(), order, cfg.flow_steps);
  std::map<double, DenseMatrix> out;
  for (double t : p.data.times_with(TimeRole::heldout)) out[t] = sim.at(p.data.normalized_time(t));
  return out;
}

inline TrajectoryTable sample_trajectories(const Problem& p, const ExperimentConfig& cfg, const Models& m,
                                           std::uint64_t seed) {
  const DenseMatrix source = p.source();
  Rng rng = make_rng(seed, "trajectories");
  const auto k = std::min<std::size_t>(cfg.eval_trajectories, static_cast<std::size_t>(source.rows()));
  DenseMatrix x0 = detail::take_rows(source, detail::sample_without_replacement(static_cast<std::size_t>(source.rows()), k, rng));
  return simulate_and_classify(m.flow->field, *m.classifier, x0, uniform_grid(cfg.eval_grid), cfg.flow_steps);
}

inline double consistency_fraction(const TrajectoryTable& table, const LineageTree& tree, std::size_t count) {
  if (count == 0) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < count; ++i)
    if (sequence_is_consistent(tree, table.argmax_sequence(i))) ++ok;
  return static_cast<double>(ok) / static_cast<double>(count);
}

// Validation subsample of the first held-out timepoint (at least one point).
inline DenseMatrix validation_points(const Problem& p, const ExperimentConfig& cfg, std::uint64_t seed) {
  const double t = p.data.times_with(TimeRole::heldout).front();
  const DenseMatrix all = p.data.points_at(t);
  const auto n = static_cast<std::size_t>(all.rows());
  const auto k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.eval_validation_fraction * static_cast<double>(n))), 1, n);
  Rng rng = make_rng(seed, "validation");
  return detail::take_rows(all, detail::sample_without_replacement(n, k, rng));
}

inline ReplicaMetrics evaluate_replica(const Problem& p, const ExperimentConfig& cfg, const Models& m,
                                       std::uint64_t seed) {
  return run_phase("evaluate", [&] {
    require(m.flow.has_value() && m.classifier != nullptr, "evaluate requires trained models", ErrorKind::evaluation);
    ReplicaMetrics r;
    r.seed = seed;
    std::map<double, DenseMatrix> truth;
    for (double t : p.data.times_with(TimeRole::heldout)) truth[t] = p.data.points_at(t);
    auto sim = simulate_heldout(p, cfg, m);
    auto report = evaluate_marginals(sim, truth);
    r.per_t = report.per_t;
    r.mean = report.mean;
    const double first = p.data.times_with(TimeRole::heldout).front();
    r.validation_w1 = wasserstein1(sim.at(first), validation_points(p, cfg, seed));
    auto table = sample_trajectories(p, cfg, m, seed);
    const auto count = std::min<std::size_t>(cfg.eval_trajectories, static_cast<std::size_t>(p.source().rows()));
    r.lineage_consistency = consistency_fraction(table, p.tree, count);
    return r;
  });
}

struct RunMetrics {
  std::vector<ReplicaMetrics> replicas;
  std::map<double, double> per_t, per_t_std;
  double mean = 0, std_over_seeds = 0, lineage_consistency = 0;
};

inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mu = 0;
  for (double x : v) mu += x;
  mu /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline RunMetrics aggregate(std::vector<ReplicaMetrics> reps) {
  require(!reps.empty(), "aggregate: no replicas", ErrorKind::evaluation);
  RunMetrics out;
  std::map<double, std::vector<double>> by_t;
  std::vector<double> means;
  for (const auto& r : reps) {
    for (auto [t, w] : r.per_t) by_t[t].push_back(w);
    means.push_back(r.mean);
    out.lineage_consistency += r.lineage_consistency;
  }
  for (const auto& [t, ws] : by_t) {
    double s = 0;
    for (double w : ws) s += w;
    out.per_t[t] = s / static_cast<double>(ws.size());
    out.per_t_std[t] = sample_std(ws);
  }
  for (double x : means) out.mean += x;
  out.mean /= static_cast<double>(means.size());
  out.std_over_seeds = sample_std(means);
  out.lineage_consistency /= static_cast<double>(reps.size());
  out.replicas = std::move(reps);
  return out;
}

inline nlohmann::json metrics_json(const RunMetrics& m) {
  nlohmann::json j;
  j["schema_version"] = kMetricsSchemaVersion;
  nlohmann::json per_t = nlohmann::json::object();
  for (auto [t, w] : m.per_t) per_t[format_double(t)] = {{"w1", w}, {"std", m.per_t_std.at(t)}};
  j["per_t"] = per_t;
  j["mean"] = m.mean;
  j["std_over_seeds"] = m.std_over_seeds;
  j["lineage_consistency"] = m.lineage_consistency;
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& r : m.replicas) {
    nlohmann::json rj;
    rj["seed"] = r.seed;
    nlohmann::json pt = nlohmann::json::object();
    for (auto [t, w] : r.per_t) pt[format_double(t)] = w;
    rj["per_t"] = pt;
    rj["mean"] = r.mean;
    rj["validation_w1"] = r.validation_w1;
    rj["lineage_consistency"] = r.lineage_consistency;
    reps.push_back(rj);
  }
  j["replicas"] = reps;
  return j;
}

// ---------------------------------------------------------------------------
// Run directory

class RunManifest {
 public:
  RunManifest(fs::path run, std::string command, const ExperimentConfig& cfg)
      : path_(std::move(run) / "manifest.json") {
    doc_["command"] = std::move(command);
    nlohmann::json c = nlohmann::json::object();
    for (const auto& [k, v] : cfg.entries()) c[k] = v;
    doc_["config"] = c;
    doc_["seed"] = cfg.seed;
    doc_["status"] = "running";
    doc_["seeds"] = nlohmann::json::array();
    doc_["inputs"] = nlohmann::json::object();
    doc_["timings_s"] = nlohmann::json::object();
    doc_["outputs"] = nlohmann::json::array();
  }

  void input(const std::string& name, const std::string& hash) { doc_["inputs"][name] = hash; }
  void seed(std::uint64_t s) { doc_["seeds"].push_back(s); }
  void output(const std::string& rel) {
    if (std::find(doc_["outputs"].begin(), doc_["outputs"].end(), rel) == doc_["outputs"].end())
      doc_["outputs"].push_back(rel);
  }
  void timing(const std::string& phase, double seconds) {
    doc_["timings_s"][phase] = doc_["timings_s"].value(phase, 0.0) + seconds;
  }
  void write() const { write_file(path_, doc_.dump(2) + "\n"); }
  void finish(const std::string& status, const std::string& message = "") {
    doc_["status"] = status;
    if (!message.empty()) doc_["message"] = message;
    write();
  }

 private:
  fs::path path_;
  nlohmann::json doc_;
};

// Times a phase into the manifest.
template <typename F>
auto timed(RunManifest& manifest, const std::string& phase, F&& body) -> decltype(body()) {
  const auto start = std::chrono::steady_clock::now();
  struct Stop {
    RunManifest& m;
    std::string phase;
    std::chrono::steady_clock::time_point start;
    ~Stop() { m.timing(phase, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()); }
  } stop{manifest, phase, start};
  return body();
}

inline void write_metrics(const fs::path& run, const RunMetrics& m) {
  write_file(run / "metrics.json", metrics_json(m).dump(2) + "\n");
}

inline void write_trajectories(const fs::path& run, const TrajectoryTable& table) {
  std::ofstream os(run / "trajectories.csv", std::ios::binary);
  if (!os) fail(ErrorKind::data, "cannot write trajectories.csv");
  table.write_csv(os);
}

// Observed points at every timepoint and simulated points at every
// timepoint other than the source, in physical time.
inline void write_marginals(const fs::path& run, const Problem& p, const ExperimentConfig& cfg, const Models& m) {
  std::vector<double> norm;
  for (double t : p.data.timepoints()) {
    const double u = p.data.normalized_time(t);
    if (u > 0.0) norm.push_back(u);
  }
  std::sort(norm.begin(), norm.end());
  auto sim = simulate(m.flow->field, p.source(), norm, cfg.flow_steps);
  std::ofstream os(run / "marginals.csv", std::ios::binary);
  if (!os) fail(ErrorKind::data, "cannot write marginals.csv");
  os << "kind,t";
  for (std::size_t d = 0; d < p.data.dim(); ++d) os << ",x_" << d + 1;
  os << "\n";
  auto put = [&](const char* kind, double t, const DenseMatrix& x) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      os << kind << "," << format_double(t);
      for (Eigen::Index d = 0; d < x.cols(); ++d) os << "," << format_double(x(i, d));
      os << "\n";
    }
  };
  for (double t : p.data.timepoints()) put("observed", t, p.data.points_at(t));
  for (double t : p.data.timepoints()) {
    const double u = p.data.normalized_time(t);
    if (u > 0.0) put("simulated", t, sim.at(u));
  }
}

inline void export_plots(const fs::path& run, const Problem& p, const ExperimentConfig& cfg, const Models& m,
                         std::uint64_t seed) {
  write_trajectories(run, sample_trajectories(p, cfg, m, seed));
  write_marginals(run, p, cfg, m);
}

// Reads the effective config echoed into a run directory.
inline ExperimentConfig load_run_config(const fs::path& run) {
  const auto path = run / "config.echo";
  if (!fs::exists(path)) fail(ErrorKind::data, "not a run directory (no config.echo): " + run.string());
  return load_config(path.string());
}

inline void prepare_run_dir(const fs::path& run, const ExperimentConfig& cfg) {
  fs::create_directories(run);
  write_file(run / "config.echo", echo_config(cfg));
}

// ---------------------------------------------------------------------------
// Full pipeline: eval.seeds replicas of classifier -> metric -> flow ->
// evaluate. Checkpoints of each phase are written as soon as it finishes.

struct PipelineOptions {
  bool dry_run = false;
  bool write_outputs = true;  // metrics.json, trajectories.csv, marginals.csv
  std::optional<std::size_t> replicas;  // overrides eval.seeds
};

inline std::optional<RunMetrics> run_pipeline(const ExperimentConfig& cfg, const fs::path& run,
                                              const PipelineOptions& opts = {}) {
  prepare_run_dir(run, cfg);
  RunManifest manifest(run, "pipeline", cfg);
  manifest.output("config.echo");
  manifest.output("manifest.json");
  try {
    Problem p = timed(manifest, "load", [&] { return load_problem(cfg); });
    manifest.input("dataset", p.data_hash);
    manifest.input("lineage", p.lineage_hash);
    const std::size_t n = opts.replicas.value_or(cfg.eval_seeds);
    for (std::size_t k = 0; k < n; ++k) manifest.seed(replica_seed(cfg.seed, k));
    manifest.write();
    if (opts.dry_run) {
      manifest.finish("dry-run");
      return std::nullopt;
    }
    std::vector<ReplicaMetrics> reps;
    std::optional<Models> first;
    for (std::size_t k = 0; k < n; ++k) {
      const auto seed = replica_seed(cfg.seed, k);
      const auto dir = replica_dir(run, k);
      Models m;
      timed(manifest, "classifier", [&] { train_classifier_phase(p, cfg, seed, m); });
      save_classifier(dir, m);
      timed(manifest, "metric", [&] { train_metric_phase(p, cfg, seed, m); });
      save_metric(dir, m);
      timed(manifest, "flow", [&] { train_flow_phase(p, cfg, seed, m); });
      save_flow(dir, m);
      manifest.output(fs::relative(dir, run).string());
      reps.push_back(timed(manifest, "evaluate", [&] { return evaluate_replica(p, cfg, m, seed); }));
      if (k == 0) first = std::move(m);
      manifest.write();
    }
    RunMetrics metrics = aggregate(std::move(reps));
    if (opts.write_outputs) {
      write_metrics(run, metrics);
      timed(manifest, "export", [&] { export_plots(run, p, cfg, *first, replica_seed(cfg.seed, 0)); });
      for (const char* f : {"metrics.json", "trajectories.csv", "marginals.csv"}) manifest.output(f);
    }
    manifest.finish("ok");
    return metrics;
  } catch (const Error& e) {
    manifest.finish("failed", e.what());
    throw;
  }
}

// Re-evaluates every replica checkpoint found in a run directory.
inline RunMetrics evaluate_run(const fs::path& run) {
  const ExperimentConfig cfg = load_run_config(run);
  Problem p = load_problem(cfg);
  std::vector<ReplicaMetrics> reps;
  for (std::size_t k = 0; fs::exists(replica_dir(run, k)); ++k)
    reps.push_back(evaluate_replica(p, cfg, load_models(replica_dir(run, k)), replica_seed(cfg.seed, k)));
  if (reps.empty()) fail(ErrorKind::data, "missing checkpoints under " + (run / "checkpoints").string());
  return aggregate(std::move(reps));
}

// ---------------------------------------------------------------------------
// Sweep: each grid cell trains replica 0 and is scored by W1 against the
// validation subsample of the first held-out time; the winner is then run
// with eval.seeds replicas on all held-out times.

struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};

// "key=v1,v2;key2=v3" -> axes. Keys are validated against the config.
inline std::vector<SweepAxis> parse_grid(const std::string& spec) {
  std::vector<SweepAxis> axes;
  for (const auto& part : detail::split(spec, ';')) {
    const auto item = detail::trim(part);
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) fail(ErrorKind::config, "grid: expected key=v1,v2 in '" + item + "'");
    SweepAxis a{detail::trim(item.substr(0, eq)), {}};
    for (const auto& v : detail::split(item.substr(eq + 1), ','))
      if (!detail::trim(v).empty()) a.values.push_back(detail::trim(v));
    if (a.values.empty()) fail(ErrorKind::config, "grid: no values for " + a.key);
    ExperimentConfig probe;
    for (const auto& v : a.values) probe.set(a.key, v);
    axes.push_back(std::move(a));
  }
  if (axes.empty()) fail(ErrorKind::config, "grid: empty grid");
  return axes;
}

inline const char* kDefaultGrid = "finsler.lambda=0.2,0.5,1.0;classifier.smoothing=0.03,0.05";

inline std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base, const std::vector<SweepAxis>& axes) {
  std::vector<ExperimentConfig> out{base};
  for (const auto& a : axes) {
    std::vector<ExperimentConfig> next;
    for (const auto& c : out)
      for (const auto& v : a.values) {
        ExperimentConfig d = c;
        d.set(a.key, v);
        d.validate();
        next.push_back(std::move(d));
      }
    out = std::move(next);
  }
  return out;
}

struct SweepRow {
  ExperimentConfig config;
  double validation_w1 = 0;
};

struct SweepResult {
  std::vector<SweepAxis> axes;
  std::vector<SweepRow> rows;
  std::size_t best = 0;
  RunMetrics winner;
};

inline SweepResult run_sweep(const ExperimentConfig& base, const std::vector<SweepAxis>& axes, const fs::path& out) {
  SweepResult res;
  res.axes = axes;
  const auto configs = expand_grid(base, axes);
  fs::create_directories(out);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    PipelineOptions o;
    o.replicas = 1;
    o.write_outputs = false;
    auto m = run_pipeline(configs[i], out / ("cell_" + std::to_string(i)), o);
    res.rows.push_back({configs[i], m->replicas.front().validation_w1});
    if (res.rows[i].validation_w1 < res.rows[res.best].validation_w1) res.best = i;
  }
  res.winner = *run_pipeline(configs[res.best], out / "winner");
  std::ostringstream table;
  table << "cell";
  for (const auto& a : axes) table << "," << a.key;
  table << ",validation_w1\n";
  for (std::size_t i = 0; i < res.rows.size(); ++i) {
    table << i;
    const auto entries = res.rows[i].config.entries();
    for (const auto& a : axes)
      for (const auto& [k, v] : entries)
        if (k == a.key) table << "," << v;
    table << "," << format_double(res.rows[i].validation_w1) << "\n";
  }
  write_file(out / "sweep.csv", table.str());
  write_file(out / "best.config", echo_config(configs[res.best]));
  write_metrics(out, res.winner);
  return res;
}

}  // namespace ftrj
