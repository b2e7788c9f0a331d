#pragma once

#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tsegcn/tensor.hpp"

namespace tsegcn {

/// Undirected skeleton graph over joints 0..n-1. Edges are stored as
/// deduplicated (min,max) pairs; self-loops are rejected and connectivity is
/// validated at construction.
class SkeletonGraph {
 public:
  SkeletonGraph(std::size_t n, std::vector<std::pair<std::size_t, std::size_t>> edges,
                std::vector<std::string> names = {})
      : n_(n), names_(std::move(names)) {
    if (n_ == 0) throw ConfigError("skeleton graph must have at least one joint");
    std::set<std::pair<std::size_t, std::size_t>> dedup;
    for (auto [i, j] : edges) {
      if (i == j) throw ConfigError("self-loop on joint " + std::to_string(i));
      if (i >= n_ || j >= n_)
        throw ConfigError("edge (" + std::to_string(i) + ", " + std::to_string(j) + ") out of range for n=" +
                          std::to_string(n_));
      dedup.emplace(std::min(i, j), std::max(i, j));
    }
    edges_.assign(dedup.begin(), dedup.end());
    adjacency_.assign(n_, {});
    for (auto [i, j] : edges_) {
      adjacency_[i].push_back(j);
      adjacency_[j].push_back(i);
    }
    if (!connected()) throw ConfigError("skeleton graph is disconnected");
  }

  std::size_t n() const { return n_; }
  const std::vector<std::pair<std::size_t, std::size_t>>& edges() const { return edges_; }
  const std::vector<std::size_t>& neighbors(std::size_t i) const { return adjacency_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  bool has_edge(std::size_t i, std::size_t j) const {
    if (i == j) return false;
    auto key = std::make_pair(std::min(i, j), std::max(i, j));
    return std::binary_search(edges_.begin(), edges_.end(), key);
  }

 private:
  bool connected() const {
    std::vector<char> seen(n_, 0);
    std::deque<std::size_t> queue{0};
    seen[0] = 1;
    std::size_t reached = 1;
    while (!queue.empty()) {
      std::size_t v = queue.front();
      queue.pop_front();
      for (std::size_t w : adjacency_[v])
        if (!seen[w]) {
          seen[w] = 1;
          ++reached;
          queue.push_back(w);
        }
    }
    return reached == n_;
  }

  std::size_t n_;
  std::vector<std::pair<std::size_t, std::size_t>> edges_;
  std::vector<std::vector<std::size_t>> adjacency_;
  std::vector<std::string> names_;
};

/// Pairwise hop counts on the skeleton (edge-counting convention:
/// hop(i,i) = 0, hop(i,j) = 1 for physical neighbors).
class HopTable {
 public:
  HopTable(std::size_t n, std::vector<int> table) : n_(n), d_(std::move(table)) {}

  std::size_t n() const { return n_; }
  int at(std::size_t i, std::size_t j) const { return d_[i * n_ + j]; }

  int diameter() const {
    int m = 0;
    for (int v : d_) m = std::max(m, v);
    return m;
  }

  /// Count of unordered pairs (i < j) per hop distance.
  std::map<int, std::size_t> histogram() const {
    std::map<int, std::size_t> h;
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = i + 1; j < n_; ++j) ++h[at(i, j)];
    return h;
  }

 private:
  std::size_t n_;
  std::vector<int> d_;
};

struct NormalizedAdjacency {
  Tensor a_hat;  // n x n

  /// Dominant eigenvalue magnitude by power iteration.
  double spectral_radius(std::size_t iters = 200) const {
    const std::size_t n = a_hat.dim(0);
    std::vector<double> v(n, 1.0 / std::sqrt(static_cast<double>(n))), w(n, 0.0);
    double lambda = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += a_hat.at(i, j) * v[j];
        w[i] = acc;
      }
      double norm = 0.0;
      for (double x : w) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0.0) return 0.0;
      double next = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        v[i] = w[i] / norm;
        next += v[i] * w[i];
      }
      if (std::abs(norm - lambda) < 1e-12) break;
      lambda = norm;
    }
    return lambda;
  }
};

/// A_hat = D^{-1/2} (A + I) D^{-1/2} with D the diagonal degree of A + I.
/// The construction is symmetric entry-by-entry, so the output is symmetric
/// to the last bit.
inline NormalizedAdjacency normalize_adjacency(const SkeletonGraph& g) {
  const std::size_t n = g.n();
  Tensor a({n, n});
  for (std::size_t i = 0; i < n; ++i) a.at(i, i) = 1.0;
  for (auto [i, j] : g.edges()) {
    a.at(i, j) = 1.0;
    a.at(j, i) = 1.0;
  }
  std::vector<double> deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) deg[i] += a.at(i, j);
  NormalizedAdjacency out{Tensor({n, n})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (a.at(i, j) != 0.0) out.a_hat.at(i, j) = 1.0 / std::sqrt(deg[i] * deg[j]);
  return out;
}

/// Shortest-path hop table by boolean adjacency powering: the distance of
/// (i, j) is the smallest h with ((A+I)^h)[i][j] > 0, and 0 on the diagonal.
/// Throws if some pair is still unreached after max_hop powers.
inline HopTable hop_table(const SkeletonGraph& g, std::size_t max_hop) {
  const std::size_t n = g.n();
  std::vector<int> dist(n * n, -1);
  for (std::size_t i = 0; i < n; ++i) dist[i * n + i] = 0;

  // reach = (A+I)^h as a boolean matrix, updated incrementally.
  std::vector<char> reach(n * n, 0), next(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) reach[i * n + i] = 1;
  for (auto [i, j] : g.edges()) {
    reach[i * n + j] = 1;
    reach[j * n + i] = 1;
  }
  std::size_t unresolved = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && reach[i * n + j]) dist[i * n + j] = 1;
  for (int v : dist) unresolved += (v < 0);

  std::size_t h = 1;
  while (unresolved > 0) {
    if (h >= max_hop)
      throw ConfigError("hop_table: graph diameter exceeds max_hop=" + std::to_string(max_hop));
    ++h;
    // next = reach * (A+I) over booleans
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (reach[i * n + j]) {
          next[i * n + j] = 1;
          continue;
        }
        char hit = reach[i * n + j];
        for (std::size_t k = 0; !hit && k < n; ++k)
          if (reach[i * n + k] && (k == j || g.has_edge(k, j))) hit = 1;
        next[i * n + j] = hit;
      }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j && next[i * n + j] && dist[i * n + j] < 0) {
          dist[i * n + j] = static_cast<int>(h);
          --unresolved;
        }
    std::swap(reach, next);
  }
  return HopTable(n, std::move(dist));
}

/// Parse the graph spec text format: `# comment` lines, one `n=<int>`
/// header, then one `<i> <j>` edge per line.
inline SkeletonGraph parse_graph(std::istream& in, const std::string& origin) {
  std::string line;
  std::size_t line_no = 0;
  long long n = -1;
  std::vector<std::pair<std::size_t, std::size_t>> edges;

  auto fail = [&](const std::string& msg, std::size_t at_line) {
    throw ParseError(origin + ":" + std::to_string(at_line) + ": " + msg);
  };

  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    if (n < 0) {
      if (first.rfind("n=", 0) != 0) fail("expected `n=<int>` header, got `" + first + "`", line_no);
      try {
        n = std::stoll(first.substr(2));
      } catch (const std::exception&) {
        fail("invalid joint count `" + first + "`", line_no);
      }
      if (n < 1) fail("joint count must be >= 1", line_no);
      std::string extra;
      if (ls >> extra) fail("unexpected token after header: `" + extra + "`", line_no);
      continue;
    }
    long long i = 0, j = 0;
    std::istringstream es(line);
    if (!(es >> i >> j)) fail("expected edge `<i> <j>`", line_no);
    std::string extra;
    if (es >> extra) fail("unexpected token after edge: `" + extra + "`", line_no);
    if (i < 0 || j < 0 || i >= n || j >= n)
      fail("joint index out of range [0, " + std::to_string(n) + "): " + std::to_string(i) + " " + std::to_string(j),
           line_no);
    if (i == j) fail("self-loop on joint " + std::to_string(i), line_no);
    edges.emplace_back(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  }
  if (n < 0) throw ParseError(origin + ": missing `n=<int>` header");
  try {
    return SkeletonGraph(static_cast<std::size_t>(n), std::move(edges));
  } catch (const ConfigError& e) {
    throw ParseError(origin + ": " + e.what());
  }
}

inline SkeletonGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open graph file: " + path);
  return parse_graph(in, path);
}

/// The Kinect-v2 25-joint tree used by the NTU-style skeletons (0-based).
inline SkeletonGraph builtin_graph_ntu25() {
  return SkeletonGraph(25, {{0, 1},   {1, 20},  {2, 20},  {3, 2},   {4, 20},  {5, 4},   {6, 5},   {7, 6},
                            {8, 20},  {9, 8},   {10, 9},  {11, 10}, {12, 0},  {13, 12}, {14, 13}, {15, 14},
                            {16, 0},  {17, 16}, {18, 17}, {19, 18}, {21, 22}, {22, 7},  {23, 24}, {24, 11}});
}

/// 9-joint toy figure: spine chain with mirrored arm and leg pairs.
/// 0 pelvis, 1 chest, 2 head, 3/5 shoulders (L/R), 4/6 hands (L/R),
/// 7/8 feet (L/R).
inline SkeletonGraph builtin_graph_toy9() {
  return SkeletonGraph(9, {{0, 1}, {1, 2}, {1, 3}, {3, 4}, {1, 5}, {5, 6}, {0, 7}, {0, 8}});
}

/// Resolve a graph argument: the names "ntu25"/"toy9" map to the built-in
/// skeletons, anything else is treated as a file path.
inline SkeletonGraph resolve_graph(const std::string& spec) {
  if (spec == "ntu25") return builtin_graph_ntu25();
  if (spec == "toy9") return builtin_graph_toy9();
  return load_graph(spec);
}

}  // namespace tsegcn
