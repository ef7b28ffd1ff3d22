#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ftrj/error.hpp"
#include "ftrj/lineage.hpp"
#include "ftrj/nn/dense.hpp"
#include "ftrj/rng.hpp"

namespace ftrj {

enum class TimeRole { train, heldout };

inline bool is_untimed(double t) { return std::isnan(t); }
inline constexpr double kUntimed = std::numeric_limits<double>::quiet_NaN();

// Labeled points tagged with an observation time. A NaN time marks a labeled
// reference point that belongs to no observed marginal; such points only
// inform the classifier.
struct TimeSeriesDataset {
  DenseMatrix points;
  std::vector<std::size_t> labels;
  std::vector<double> times;
  std::map<double, TimeRole> roles;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(points.cols()); }

  std::vector<double> timepoints() const {
    std::vector<double> ts;
    for (double t : times)
      if (!is_untimed(t) && std::find(ts.begin(), ts.end(), t) == ts.end()) ts.push_back(t);
    std::sort(ts.begin(), ts.end());
    return ts;
  }

  std::vector<double> times_with(TimeRole role) const {
    std::vector<double> out;
    for (double t : timepoints())
      if (role_of(t) == role) out.push_back(t);
    return out;
  }

  TimeRole role_of(double t) const {
    auto it = roles.find(t);
    if (it == roles.end()) fail(ErrorKind::data, "dataset: no role for timepoint " + std::to_string(t));
    return it->second;
  }

  std::vector<std::size_t> indices_at(double t) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < times.size(); ++i)
      if (times[i] == t) out.push_back(i);
    return out;
  }

  DenseMatrix points_at(double t) const { return gather(indices_at(t)); }

  DenseMatrix gather(const std::vector<std::size_t>& idx) const {
    DenseMatrix out(static_cast<Eigen::Index>(idx.size()), points.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = points.row(static_cast<Eigen::Index>(idx[i]));
    return out;
  }

  // Source and target training times: the first and last train timepoints.
  std::pair<double, double> training_pair() const {
    auto tr = times_with(TimeRole::train);
    if (tr.size() < 2) fail(ErrorKind::data, "dataset: need two train timepoints");
    return {tr.front(), tr.back()};
  }

  // Affine map of physical time onto [0, 1] spanned by the training pair.
  double normalized_time(double t) const {
    auto [t0, t1] = training_pair();
    return (t - t0) / (t1 - t0);
  }

  void validate(std::optional<std::size_t> num_classes = std::nullopt) const {
    require(points.rows() == static_cast<Eigen::Index>(labels.size()) &&
                labels.size() == times.size(),
            "dataset: inconsistent column lengths", ErrorKind::data);
    require(points.allFinite(), "dataset: non-finite coordinates", ErrorKind::data);
    if (num_classes)
      for (auto l : labels)
        if (l >= *num_classes)
          fail(ErrorKind::data, "dataset: unknown label " + std::to_string(l));
    for (double t : timepoints()) (void)role_of(t);
  }
};

// Default role assignment: the first and last timepoints train, the rest are
// held out.
inline void assign_default_roles(TimeSeriesDataset& ds) {
  ds.roles.clear();
  auto ts = ds.timepoints();
  for (std::size_t i = 0; i < ts.size(); ++i)
    ds.roles[ts[i]] = (i == 0 || i + 1 == ts.size()) ? TimeRole::train : TimeRole::heldout;
}

inline void set_heldout(TimeSeriesDataset& ds, const std::vector<double>& heldout) {
  for (double t : ds.timepoints()) ds.roles[t] = TimeRole::train;
  for (double t : heldout) {
    auto ts = ds.timepoints();
    if (std::find(ts.begin(), ts.end(), t) == ts.end())
      fail(ErrorKind::data, "dataset: held-out timepoint " + std::to_string(t) + " not present");
    ds.roles[t] = TimeRole::heldout;
  }
}

// ---------------------------------------------------------------------------
// Synthetic five-cluster benchmark.

struct SyntheticConfig {
  std::size_t dim = 2;
  double cluster_std = 0.1;
  std::size_t endpoint_count = 500;
  std::size_t intermediate_count = 25;
  // Vertical offset of the upper and lower intermediate clusters.
  double branch_offset = 0.95;
  // When false, only the lineage-consistent intermediate (class 1) is observed
  // at t = 1 and classes 2, 3 are untimed labeled reference clusters.
  bool distractors_timed = false;

  void validate() const {
    require(dim >= 2, "synthetic: dim must be >= 2", ErrorKind::config);
    require(cluster_std > 0, "synthetic: cluster_std must be > 0", ErrorKind::config);
    require(endpoint_count >= 1 && intermediate_count >= 1, "synthetic: invalid counts",
            ErrorKind::config);
    require(branch_offset > 0, "synthetic: branch_offset must be > 0", ErrorKind::config);
  }
};

// Class 0 at (-1, 0) observed at t = 0, class 4 at (1, 0) at t = 2; classes
// 1, 2, 3 at (0, +h), (0, 0), (0, -h). The straight line from 0 to 4 runs
// through class 2. Lineage: the chain 0->1->4; classes 2 and 3 only have
// self-loops.
inline LineageTree synthetic_lineage() {
  return make_tree({"0", "1", "2", "3", "4"}, {{0, 1}, {1, 4}});
}

inline std::pair<TimeSeriesDataset, LineageTree> gen_synthetic(const SyntheticConfig& cfg,
                                                               std::uint64_t seed) {
  cfg.validate();
  Rng rng = make_rng(seed, "synthetic");
  std::normal_distribution<double> noise(0.0, cfg.cluster_std);
  const double h = cfg.branch_offset;
  struct Cluster {
    std::size_t label;
    double cx, cy;
    double time;
    std::size_t count;
  };
  const double side_time = cfg.distractors_timed ? 1.0 : kUntimed;
  const std::vector<Cluster> clusters = {
      {0, -1.0, 0.0, 0.0, cfg.endpoint_count},     {4, 1.0, 0.0, 2.0, cfg.endpoint_count},
      {1, 0.0, h, 1.0, cfg.intermediate_count},    {2, 0.0, 0.0, side_time, cfg.intermediate_count},
      {3, 0.0, -h, side_time, cfg.intermediate_count}};
  std::size_t total = 0;
  for (const auto& c : clusters) total += c.count;
  TimeSeriesDataset ds;
  ds.points.resize(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(cfg.dim));
  Eigen::Index row = 0;
  for (const auto& c : clusters) {
    for (std::size_t i = 0; i < c.count; ++i, ++row) {
      for (Eigen::Index d = 0; d < ds.points.cols(); ++d) ds.points(row, d) = noise(rng);
      ds.points(row, 0) += c.cx;
      ds.points(row, 1) += c.cy;
      ds.labels.push_back(c.label);
      ds.times.push_back(c.time);
    }
  }
  ds.roles = {{0.0, TimeRole::train}, {1.0, TimeRole::heldout}, {2.0, TimeRole::train}};
  return {std::move(ds), synthetic_lineage()};
}

// ---------------------------------------------------------------------------
// CSV: optional "# roles: t=train,t=heldout" line, header t,label,x_1..x_n,
// one point per row. An empty t field marks an untimed point.

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void save_dataset(const TimeSeriesDataset& ds, std::ostream& os) {
  if (!ds.roles.empty()) {
    os << "# roles:";
    bool first = true;
    for (const auto& [t, r] : ds.roles) {
      os << (first ? " " : ",") << format_double(t) << "=" << (r == TimeRole::train ? "train" : "heldout");
      first = false;
    }
    os << "\n";
  }
  os << "t,label";
  for (std::size_t d = 0; d < ds.dim(); ++d) os << ",x_" << d + 1;
  os << "\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!is_untimed(ds.times[i])) os << format_double(ds.times[i]);
    os << "," << ds.labels[i];
    for (Eigen::Index d = 0; d < ds.points.cols(); ++d)
      os << "," << format_double(ds.points(static_cast<Eigen::Index>(i), d));
    os << "\n";
  }
}

inline void save_dataset(const TimeSeriesDataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::data, "cannot write dataset " + path);
  save_dataset(ds, os);
}

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_number(const std::string& s, const std::string& where) {
  const auto t = trim(s);
  try {
    std::size_t pos = 0;
    double v = std::stod(t, &pos);
    if (pos != t.size()) throw std::invalid_argument(t);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::data, where + ": cannot parse '" + t + "' as a number");
  }
}

}  // namespace detail

inline TimeSeriesDataset load_dataset(std::istream& is,
                                      std::optional<std::size_t> num_classes = std::nullopt) {
  std::string line;
  std::map<double, TimeRole> roles;
  bool have_roles = false;
  std::vector<std::string> header;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    auto t = detail::trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      const std::string key = "# roles:";
      if (t.rfind(key, 0) == 0) {
        have_roles = true;
        for (const auto& item : detail::split(detail::trim(t.substr(key.size())), ',')) {
          auto kv = detail::split(item, '=');
          if (kv.size() != 2) fail(ErrorKind::data, "dataset: malformed roles line");
          const auto role = detail::trim(kv[1]);
          if (role != "train" && role != "heldout")
            fail(ErrorKind::data, "dataset: unknown role '" + role + "'");
          roles[detail::parse_number(kv[0], "roles")] =
              role == "train" ? TimeRole::train : TimeRole::heldout;
        }
      }
      continue;
    }
    header = detail::split(t, ',');
    break;
  }
  if (header.size() < 3 || detail::trim(header[0]) != "t" || detail::trim(header[1]) != "label")
    fail(ErrorKind::data, "dataset: expected header t,label,x_1,...");
  const std::size_t dim = header.size() - 2;
  std::vector<double> coords;
  TimeSeriesDataset ds;
  while (std::getline(is, line)) {
    ++line_no;
    auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::string where = "dataset line " + std::to_string(line_no);
    auto fields = detail::split(t, ',');
    if (fields.size() != header.size())
      fail(ErrorKind::data, where + ": expected " + std::to_string(header.size()) + " fields, got " +
                                std::to_string(fields.size()));
    ds.times.push_back(detail::trim(fields[0]).empty() ? kUntimed
                                                       : detail::parse_number(fields[0], where));
    const double label = detail::parse_number(fields[1], where);
    if (label < 0 || label != std::floor(label))
      fail(ErrorKind::data, where + ": label must be a non-negative integer");
    ds.labels.push_back(static_cast<std::size_t>(label));
    for (std::size_t d = 0; d < dim; ++d) coords.push_back(detail::parse_number(fields[2 + d], where));
  }
  if (ds.labels.empty()) fail(ErrorKind::data, "dataset: no data rows");
  ds.points = Eigen::Map<DenseMatrix>(coords.data(), static_cast<Eigen::Index>(ds.labels.size()),
                                      static_cast<Eigen::Index>(dim));
  if (have_roles)
    ds.roles = std::move(roles);
  else
    assign_default_roles(ds);
  ds.validate(num_classes);
  return ds;
}

inline TimeSeriesDataset load_dataset(const std::string& path,
                                      std::optional<std::size_t> num_classes = std::nullopt) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::data, "cannot open dataset " + path);
  return load_dataset(is, num_classes);
}

}  // namespace ftrj
