#pragma once

#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ftrj/error.hpp"
#include "ftrj/nn/dense.hpp"

namespace ftrj {

// Directed lineage prior over classes. adjacency(i, j) = 1 means class i may
// transition to class j; every class may remain in place (A_ii = 1).
struct LineageTree {
  std::vector<std::string> class_names;
  DenseMatrix adjacency;

  std::size_t num_classes() const { return class_names.size(); }

  bool admissible(std::size_t from, std::size_t to) const {
    return adjacency(static_cast<Eigen::Index>(from), static_cast<Eigen::Index>(to)) == 1.0;
  }
};

// M = 1 - A^T with 1 the all-ones matrix. Column c indicates the classes
// that cannot be reached from c in one step.
struct IllegalDirectionMatrix {
  DenseMatrix m;

  bool is_zero() const { return (m.array() == 0.0).all(); }
};

inline LineageTree validate_tree(LineageTree tree) {
  const auto n = static_cast<Eigen::Index>(tree.class_names.size());
  require(n >= 1, "lineage: need at least one class", ErrorKind::data);
  require(tree.adjacency.rows() == n && tree.adjacency.cols() == n,
          "lineage: adjacency is " + std::to_string(tree.adjacency.rows()) + "x" +
              std::to_string(tree.adjacency.cols()) + " but there are " + std::to_string(n) +
              " class names",
          ErrorKind::data);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double a = tree.adjacency(i, j);
      if (a != 0.0 && a != 1.0)
        fail(ErrorKind::data, "lineage: non-binary entry at (" + std::to_string(i) + "," +
                                  std::to_string(j) + ")");
    }
    if (tree.adjacency(i, i) != 1.0)
      fail(ErrorKind::data, "lineage: missing self-loop on class " + std::to_string(i) + " ('" +
                                tree.class_names[static_cast<std::size_t>(i)] + "')");
  }
  return tree;
}

inline IllegalDirectionMatrix illegal_matrix(const LineageTree& tree) {
  const auto n = static_cast<Eigen::Index>(tree.num_classes());
  return {DenseMatrix::Ones(n, n) - tree.adjacency.transpose()};
}

// Builds a tree from edges; self-loops are added.
inline LineageTree make_tree(std::vector<std::string> names,
                             const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
  const auto n = static_cast<Eigen::Index>(names.size());
  LineageTree t{std::move(names), DenseMatrix::Identity(n, n)};
  for (auto [from, to] : edges) {
    require(from < t.num_classes() && to < t.num_classes(), "lineage: edge index out of range",
            ErrorKind::data);
    t.adjacency(static_cast<Eigen::Index>(from), static_cast<Eigen::Index>(to)) = 1.0;
  }
  return validate_tree(std::move(t));
}

// Reachability closure (grandparent -> grandchild admissible). Off by default.
inline LineageTree transitive_closure(LineageTree tree) {
  const auto n = tree.adjacency.rows();
  for (Eigen::Index k = 0; k < n; ++k)
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (tree.adjacency(i, k) == 1.0 && tree.adjacency(k, j) == 1.0) tree.adjacency(i, j) = 1.0;
  return tree;
}

// {"classes": [...], "edges": [[from, to], ...]}; edges may name classes by
// index or by string.
inline LineageTree tree_from_json(const nlohmann::json& doc) {
  if (!doc.contains("classes") || !doc["classes"].is_array())
    fail(ErrorKind::data, "lineage: missing 'classes' array");
  std::vector<std::string> names;
  for (const auto& c : doc["classes"]) {
    if (!c.is_string()) fail(ErrorKind::data, "lineage: class names must be strings");
    names.push_back(c.get<std::string>());
  }
  auto index_of = [&](const nlohmann::json& v) -> std::size_t {
    if (v.is_number_integer()) {
      const auto i = v.get<long long>();
      if (i < 0 || static_cast<std::size_t>(i) >= names.size())
        fail(ErrorKind::data, "lineage: edge index out of range");
      return static_cast<std::size_t>(i);
    }
    if (v.is_string()) {
      for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == v.get<std::string>()) return i;
      fail(ErrorKind::data, "lineage: unknown class '" + v.get<std::string>() + "'");
    }
    fail(ErrorKind::data, "lineage: edge endpoints must be indices or names");
  };
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  if (doc.contains("edges")) {
    for (const auto& e : doc["edges"]) {
      if (!e.is_array() || e.size() != 2) fail(ErrorKind::data, "lineage: edges are [from, to] pairs");
      edges.emplace_back(index_of(e[0]), index_of(e[1]));
    }
  }
  return make_tree(std::move(names), edges);
}

inline nlohmann::json tree_to_json(const LineageTree& tree) {
  nlohmann::json doc;
  doc["classes"] = tree.class_names;
  doc["edges"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < tree.adjacency.rows(); ++i)
    for (Eigen::Index j = 0; j < tree.adjacency.cols(); ++j)
      if (i != j && tree.adjacency(i, j) == 1.0) doc["edges"].push_back({i, j});
  return doc;
}

inline LineageTree load_tree(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::data, "cannot open lineage file " + path);
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, "lineage: " + std::string(e.what()));
  }
  return tree_from_json(doc);
}

inline void save_tree(const LineageTree& tree, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorKind::data, "cannot write lineage file " + path);
  os << tree_to_json(tree).dump(2) << "\n";
}

// True when every change of class along the sequence is an admissible edge.
inline bool sequence_is_consistent(const LineageTree& tree, const std::vector<std::size_t>& classes) {
  for (std::size_t i = 1; i < classes.size(); ++i)
    if (classes[i] != classes[i - 1] && !tree.admissible(classes[i - 1], classes[i])) return false;
  return true;
}

}  // namespace ftrj
