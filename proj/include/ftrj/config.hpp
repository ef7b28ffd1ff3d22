#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "ftrj/data.hpp"
#include "ftrj/error.hpp"

namespace ftrj {

// Flat experiment configuration. Every key has a default; files only list
// overrides as `dotted.key = value`, one per line, `#` starts a comment.
struct ExperimentConfig {
  std::uint64_t seed = 0;

  std::string data_source = "synthetic";  // synthetic | file
  std::string data_path;
  std::string lineage_path;
  std::string data_heldout;  // comma-separated timepoint tags; empty = file roles

  SyntheticConfig synthetic;
  bool lineage_transitive_closure = false;

  std::size_t net_width = 256;
  std::size_t net_depth = 3;
  std::string net_activation = "silu";
  bool net_batch_norm = true;

  double classifier_smoothing = 0.05;
  std::size_t classifier_batch = 512;
  std::size_t classifier_max_epochs = 200;
  std::size_t classifier_patience = 20;
  double classifier_lr = 1e-3;
  std::string classifier_train_on = "all";  // all | endpoints
  double classifier_val_fraction = 0.1;

  double finsler_lambda = 1.0;
  std::string finsler_base = "euclidean";  // euclidean | rbf
  std::size_t finsler_rbf_clusters = 100;
  double finsler_rbf_bandwidth = 1.0;
  double finsler_rbf_epsilon = 0.05;

  std::size_t embed_latent_dim = 32;
  bool geodesic_stop_gradient_jacobian = false;

  std::size_t train_iters = 2000;
  std::size_t train_batch = 2048;
  double train_lr = 1e-3;
  double train_weight_decay = 1e-2;

  std::size_t flow_iters = 2000;
  std::size_t flow_batch = 512;
  double flow_lr = 1e-3;
  std::size_t flow_steps = 100;
  bool flow_cosine_decay = false;

  std::size_t eval_trajectories = 50;
  std::size_t eval_grid = 21;
  double eval_validation_fraction = 0.2;
  std::size_t eval_seeds = 10;

  void set(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;
  void validate() const;
};

namespace config_detail {

using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Key {
  std::string name;
  Setter set;
  Getter get;
};

inline std::string fmt(double v) { return format_double(v); }

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    fail(ErrorKind::config, "config: " + key + " expects a number, got '" + v + "'");
  }
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    auto d = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    fail(ErrorKind::config, "config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::config, "config: " + key + " expects true/false, got '" + v + "'");
}

#define FTRJ_KEY_D(name, field)                                                            \
  Key{name, [](ExperimentConfig& c, const std::string& k, const std::string& v) {          \
        c.field = to_double(k, v);                                                          \
      },                                                                                    \
      [](const ExperimentConfig& c) { return fmt(c.field); }}
#define FTRJ_KEY_U(name, field)                                                            \
  Key{name, [](ExperimentConfig& c, const std::string& k, const std::string& v) {          \
        c.field = static_cast<decltype(c.field)>(to_uint(k, v));                            \
      },                                                                                    \
      [](const ExperimentConfig& c) { return std::to_string(c.field); }}
#define FTRJ_KEY_B(name, field)                                                            \
  Key{name, [](ExperimentConfig& c, const std::string& k, const std::string& v) {          \
        c.field = to_bool(k, v);                                                            \
      },                                                                                    \
      [](const ExperimentConfig& c) { return std::string(c.field ? "true" : "false"); }}
#define FTRJ_KEY_S(name, field)                                                            \
  Key{name, [](ExperimentConfig& c, const std::string&, const std::string& v) {            \
        c.field = v;                                                                        \
      },                                                                                    \
      [](const ExperimentConfig& c) { return c.field; }}

inline const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      FTRJ_KEY_U("seed", seed),
      FTRJ_KEY_S("data.source", data_source),
      FTRJ_KEY_S("data.path", data_path),
      FTRJ_KEY_S("data.lineage", lineage_path),
      FTRJ_KEY_S("data.heldout", data_heldout),
      FTRJ_KEY_U("synthetic.dim", synthetic.dim),
      FTRJ_KEY_D("synthetic.cluster_std", synthetic.cluster_std),
      FTRJ_KEY_U("synthetic.endpoint_count", synthetic.endpoint_count),
      FTRJ_KEY_U("synthetic.intermediate_count", synthetic.intermediate_count),
      FTRJ_KEY_D("synthetic.branch_offset", synthetic.branch_offset),
      FTRJ_KEY_B("synthetic.distractors_timed", synthetic.distractors_timed),
      FTRJ_KEY_B("lineage.transitive_closure", lineage_transitive_closure),
      FTRJ_KEY_U("net.width", net_width),
      FTRJ_KEY_U("net.depth", net_depth),
      FTRJ_KEY_S("net.activation", net_activation),
      FTRJ_KEY_B("net.batch_norm", net_batch_norm),
      FTRJ_KEY_D("classifier.smoothing", classifier_smoothing),
      FTRJ_KEY_U("classifier.batch", classifier_batch),
      FTRJ_KEY_U("classifier.max_epochs", classifier_max_epochs),
      FTRJ_KEY_U("classifier.patience", classifier_patience),
      FTRJ_KEY_D("classifier.lr", classifier_lr),
      FTRJ_KEY_S("classifier.train_on", classifier_train_on),
      FTRJ_KEY_D("classifier.val_fraction", classifier_val_fraction),
      FTRJ_KEY_D("finsler.lambda", finsler_lambda),
      FTRJ_KEY_S("finsler.base", finsler_base),
      FTRJ_KEY_U("finsler.rbf_clusters", finsler_rbf_clusters),
      FTRJ_KEY_D("finsler.rbf_bandwidth", finsler_rbf_bandwidth),
      FTRJ_KEY_D("finsler.rbf_epsilon", finsler_rbf_epsilon),
      FTRJ_KEY_U("embed.latent_dim", embed_latent_dim),
      FTRJ_KEY_B("geodesic.stop_gradient_jacobian", geodesic_stop_gradient_jacobian),
      FTRJ_KEY_U("train.iters", train_iters),
      FTRJ_KEY_U("train.batch", train_batch),
      FTRJ_KEY_D("train.lr", train_lr),
      FTRJ_KEY_D("train.weight_decay", train_weight_decay),
      FTRJ_KEY_U("flow.iters", flow_iters),
      FTRJ_KEY_U("flow.batch", flow_batch),
      FTRJ_KEY_D("flow.lr", flow_lr),
      FTRJ_KEY_U("flow.steps", flow_steps),
      FTRJ_KEY_B("flow.cosine_decay", flow_cosine_decay),
      FTRJ_KEY_U("eval.trajectories", eval_trajectories),
      FTRJ_KEY_U("eval.grid", eval_grid),
      FTRJ_KEY_D("eval.validation_fraction", eval_validation_fraction),
      FTRJ_KEY_U("eval.seeds", eval_seeds),
  };
  return k;
}

#undef FTRJ_KEY_D
#undef FTRJ_KEY_U
#undef FTRJ_KEY_B
#undef FTRJ_KEY_S

}  // namespace config_detail

inline void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (const auto& k : config_detail::keys()) {
    if (k.name == key) {
      k.set(*this, key, value);
      return;
    }
  }
  fail(ErrorKind::config, "config: unknown key '" + key + "'");
}

inline std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : config_detail::keys()) out.emplace_back(k.name, k.get(*this));
  return out;
}

inline void ExperimentConfig::validate() const {
  auto check = [](bool ok, const std::string& key, const std::string& why) {
    if (!ok) fail(ErrorKind::config, "config: " + key + " " + why);
  };
  check(data_source == "synthetic" || data_source == "file", "data.source", "must be synthetic|file");
  check(data_source != "file" || !data_path.empty(), "data.path", "is required for file data");
  check(synthetic.dim >= 2, "synthetic.dim", "must be >= 2");
  check(synthetic.cluster_std > 0, "synthetic.cluster_std", "must be > 0");
  check(synthetic.endpoint_count >= 1, "synthetic.endpoint_count", "must be >= 1");
  check(synthetic.intermediate_count >= 1, "synthetic.intermediate_count", "must be >= 1");
  check(synthetic.branch_offset > 0, "synthetic.branch_offset", "must be > 0");
  check(net_width >= 1, "net.width", "must be >= 1");
  check(net_activation == "silu" || net_activation == "tanh" || net_activation == "relu",
        "net.activation", "must be silu|tanh|relu");
  check(classifier_smoothing >= 0 && classifier_smoothing < 0.5, "classifier.smoothing",
        "must be in [0, 0.5)");
  check(classifier_batch >= 2, "classifier.batch", "must be >= 2");
  check(classifier_lr > 0, "classifier.lr", "must be > 0");
  check(classifier_train_on == "all" || classifier_train_on == "endpoints", "classifier.train_on",
        "must be all|endpoints");
  check(classifier_val_fraction >= 0 && classifier_val_fraction < 1, "classifier.val_fraction",
        "must be in [0, 1)");
  check(finsler_lambda >= 0, "finsler.lambda", "must be >= 0");
  check(finsler_base == "euclidean" || finsler_base == "rbf", "finsler.base",
        "must be euclidean|rbf (only conformal bases are supported)");
  check(finsler_rbf_clusters >= 1, "finsler.rbf_clusters", "must be >= 1");
  check(finsler_rbf_bandwidth > 0, "finsler.rbf_bandwidth", "must be > 0");
  check(finsler_rbf_epsilon > 0, "finsler.rbf_epsilon", "must be > 0");
  check(embed_latent_dim >= 1, "embed.latent_dim", "must be >= 1");
  check(train_batch >= 2, "train.batch", "must be >= 2");
  check(train_lr > 0, "train.lr", "must be > 0");
  check(train_weight_decay >= 0, "train.weight_decay", "must be >= 0");
  check(flow_batch >= 2, "flow.batch", "must be >= 2");
  check(flow_lr > 0, "flow.lr", "must be > 0");
  check(flow_steps >= 1, "flow.steps", "must be >= 1");
  check(eval_grid >= 1, "eval.grid", "must be >= 1");
  check(eval_validation_fraction > 0 && eval_validation_fraction < 1, "eval.validation_fraction",
        "must be in (0, 1)");
  check(eval_seeds >= 1, "eval.seeds", "must be >= 1");
}

inline ExperimentConfig parse_config(std::istream& is) {
  ExperimentConfig cfg;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::config, "config line " + std::to_string(n) + ": expected key = value");
    cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::config, "cannot open config " + path);
  return parse_config(is);
}

inline std::string echo_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  for (const auto& [k, v] : cfg.entries()) os << k << " = " << v << "\n";
  return os.str();
}

inline std::vector<double> parse_time_list(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : detail::split(s, ','))
    if (!detail::trim(item).empty()) out.push_back(detail::parse_number(item, "time list"));
  return out;
}

}  // namespace ftrj
