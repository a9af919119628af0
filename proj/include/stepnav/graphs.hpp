#pragma once

// Directed acyclic graphs used as navigation worlds: Bernoulli and layered
// (hierarchical) generators, simple-path enumeration and sampling, and motif
// libraries joined by ghost edges.

#include <stepnav/error.hpp>
#include <stepnav/rng.hpp>
#include <stepnav/types.hpp>

#include <algorithm>
#include <cstdint>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace stepnav {

enum class DagKind { bernoulli, hierarchical };

inline const char *to_string(DagKind kind) {
  return kind == DagKind::bernoulli ? "bernoulli" : "hierarchical";
}

inline DagKind parse_dag_kind(const std::string &s) {
  if (s == "bernoulli") {
    return DagKind::bernoulli;
  }
  if (s == "hierarchical") {
    return DagKind::hierarchical;
  }
  throw DataError("unknown graph kind '" + s + "'");
}

struct Edge {
  Node from;
  Node to;
  friend bool operator==(const Edge &, const Edge &) = default;
  friend auto operator<=>(const Edge &, const Edge &) = default;
};

struct NodePair {
  Node start;
  Node goal;
  friend bool operator==(const NodePair &, const NodePair &) = default;
  friend auto operator<=>(const NodePair &, const NodePair &) = default;
};

struct Path {
  std::vector<Node> nodes;

  std::size_t edge_count() const { return nodes.empty() ? 0 : nodes.size() - 1; }
  friend bool operator==(const Path &, const Path &) = default;
  friend auto operator<=>(const Path &, const Path &) = default;
};

// Fixed-width bitset over node indices.
class NodeSet {
public:
  NodeSet() = default;
  explicit NodeSet(int n) : words_((static_cast<std::size_t>(n) + 63) / 64, 0) {}

  void set(Node i) { words_[i >> 6] |= (std::uint64_t{1} << (i & 63)); }
  bool test(Node i) const { return (words_[i >> 6] >> (i & 63)) & 1u; }
  NodeSet &operator|=(const NodeSet &o) {
    for (std::size_t w = 0; w < words_.size(); ++w) {
      words_[w] |= o.words_[w];
    }
    return *this;
  }

private:
  std::vector<std::uint64_t> words_;
};

// Immutable DAG over nodes 0..n-1 with edges only from lower to higher index.
// Hierarchical graphs additionally carry a layer index per node and may
// contain isolated nodes (their generator builds the graph from edges).
class Dag {
public:
  Dag(int node_count, DagKind kind, std::vector<Edge> edges,
      std::vector<int> layer_of = {})
      : n_(node_count), kind_(kind), layer_of_(std::move(layer_of)),
        adjacency_(static_cast<std::size_t>(node_count) * node_count, 0),
        children_(node_count), parents_(node_count) {
    if (n_ < 1) {
      throw DataError("graph needs at least one node");
    }
    if (kind_ == DagKind::hierarchical &&
        layer_of_.size() != static_cast<std::size_t>(n_)) {
      throw DataError("hierarchical graph needs a layer for every node");
    }
    if (kind_ == DagKind::bernoulli && !layer_of_.empty()) {
      throw DataError("bernoulli graph carries no layers");
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    for (const Edge &e : edges) {
      if (e.from < 0 || e.to >= n_ || e.from >= e.to) {
        throw DataError("edge " + std::to_string(e.from) + "->" +
                        std::to_string(e.to) + " violates upper-triangular order");
      }
      if (kind_ == DagKind::hierarchical &&
          layer_of_[e.to] != layer_of_[e.from] + 1) {
        throw DataError("hierarchical edge must join consecutive layers");
      }
      adjacency_[index(e.from, e.to)] = 1;
      children_[e.from].push_back(e.to);
      parents_[e.to].push_back(e.from);
    }
    edges_ = std::move(edges);
    descendants_.assign(n_, NodeSet(n_));
    for (Node u = n_ - 1; u >= 0; --u) {
      for (Node c : children_[u]) {
        descendants_[u].set(c);
        descendants_[u] |= descendants_[c];
      }
    }
  }

  int node_count() const { return n_; }
  DagKind kind() const { return kind_; }
  std::size_t edge_count() const { return edges_.size(); }
  const std::vector<Edge> &edges() const { return edges_; }

  bool contains(Node i) const { return i >= 0 && i < n_; }
  bool has_edge(Node i, Node j) const {
    return contains(i) && contains(j) && adjacency_[index(i, j)] != 0;
  }
  const std::vector<Node> &children(Node i) const { return children_[i]; }
  const std::vector<Node> &parents(Node i) const { return parents_[i]; }

  // True when at least one directed path leads from `from` to `to`.
  bool reachable(Node from, Node to) const {
    return from != to && descendants_[from].test(to);
  }

  bool has_layers() const { return !layer_of_.empty(); }
  int layer_of(Node i) const { return layer_of_.at(i); }
  const std::vector<int> &layers() const { return layer_of_; }
  int layer_count() const {
    return layer_of_.empty() ? 0
                             : *std::max_element(layer_of_.begin(), layer_of_.end()) + 1;
  }

  bool is_incident(Node i) const {
    return !children_[i].empty() || !parents_[i].empty();
  }

  // Weak connectivity. With `edge_induced`, only nodes touching an edge take
  // part (isolated nodes are ignored, as when a graph is built edge by edge).
  bool weakly_connected(bool edge_induced = false) const {
    std::vector<int> parent(n_);
    for (int i = 0; i < n_; ++i) {
      parent[i] = i;
    }
    auto find = [&](int x) {
      while (parent[x] != x) {
        parent[x] = parent[parent[x]];
        x = parent[x];
      }
      return x;
    };
    for (const Edge &e : edges_) {
      parent[find(e.from)] = find(e.to);
    }
    int root = -1;
    for (Node i = 0; i < n_; ++i) {
      if (edge_induced && !is_incident(i)) {
        continue;
      }
      const int r = find(i);
      if (root < 0) {
        root = r;
      } else if (r != root) {
        return false;
      }
    }
    return root >= 0;
  }

  friend bool operator==(const Dag &a, const Dag &b) {
    return a.n_ == b.n_ && a.kind_ == b.kind_ && a.edges_ == b.edges_ &&
           a.layer_of_ == b.layer_of_;
  }

private:
  std::size_t index(Node i, Node j) const {
    return static_cast<std::size_t>(i) * n_ + j;
  }

  int n_;
  DagKind kind_;
  std::vector<int> layer_of_;
  std::vector<std::uint8_t> adjacency_;
  std::vector<Edge> edges_;
  std::vector<std::vector<Node>> children_;
  std::vector<std::vector<Node>> parents_;
  std::vector<NodeSet> descendants_;
};

// Checks the kind-specific invariants that generators guarantee.
inline void validate_dag(const Dag &dag) {
  if (dag.kind() == DagKind::bernoulli) {
    for (Node i = 0; i < dag.node_count(); ++i) {
      if (!dag.is_incident(i)) {
        throw DataError("bernoulli graph node " + std::to_string(i) +
                        " has no edge");
      }
    }
    if (!dag.weakly_connected()) {
      throw DataError("bernoulli graph is not weakly connected");
    }
  } else if (!dag.weakly_connected(true)) {
    throw DataError("hierarchical graph is not weakly connected");
  }
}

inline constexpr int kDefaultAttemptCap = 10000;
inline constexpr std::size_t kDefaultPathCap = 10000;

// Strictly upper-triangular Bernoulli(p) edge draw.
inline std::vector<Edge> sample_upper_triangular(int n, double p, Rng &rng) {
  std::vector<Edge> edges;
  for (Node i = 0; i < n; ++i) {
    for (Node j = i + 1; j < n; ++j) {
      if (rng.bernoulli(p)) {
        edges.push_back({i, j});
      }
    }
  }
  return edges;
}

inline Dag generate_bernoulli(int n, double p, std::uint64_t seed,
                              int attempt_cap = kDefaultAttemptCap) {
  if (n < 2) {
    throw ConfigError("bernoulli graph needs n >= 2");
  }
  if (!(p > 0.0 && p <= 1.0)) {
    throw ConfigError("edge probability must lie in (0, 1]");
  }
  Rng rng(seed, Stream::graph);
  for (int attempt = 0; attempt < attempt_cap; ++attempt) {
    Dag dag(n, DagKind::bernoulli, sample_upper_triangular(n, p, rng));
    if (dag.weakly_connected()) {
      return dag;
    }
  }
  throw DataError("no connected bernoulli graph (n=" + std::to_string(n) +
                  ", p=" + std::to_string(p) + ") within " +
                  std::to_string(attempt_cap) + " attempts");
}

inline Dag generate_hierarchical(int layers, int nodes_per_layer, double p,
                                 std::uint64_t seed,
                                 int attempt_cap = kDefaultAttemptCap) {
  if (layers < 2 || nodes_per_layer < 1) {
    throw ConfigError("hierarchical graph needs >= 2 layers of >= 1 node");
  }
  if (!(p > 0.0 && p <= 1.0)) {
    throw ConfigError("edge probability must lie in (0, 1]");
  }
  const int n = layers * nodes_per_layer;
  std::vector<int> layer_of(n);
  for (Node i = 0; i < n; ++i) {
    layer_of[i] = i / nodes_per_layer;
  }
  Rng rng(seed, Stream::graph);
  for (int attempt = 0; attempt < attempt_cap; ++attempt) {
    std::vector<Edge> edges;
    for (int l = 0; l + 1 < layers; ++l) {
      for (int a = 0; a < nodes_per_layer; ++a) {
        for (int b = 0; b < nodes_per_layer; ++b) {
          if (rng.bernoulli(p)) {
            edges.push_back({l * nodes_per_layer + a, (l + 1) * nodes_per_layer + b});
          }
        }
      }
    }
    Dag dag(n, DagKind::hierarchical, std::move(edges), layer_of);
    if (dag.weakly_connected(true)) {
      return dag;
    }
  }
  throw DataError("no connected hierarchical graph (" + std::to_string(layers) +
                  "x" + std::to_string(nodes_per_layer) + ", p=" +
                  std::to_string(p) + ") within " + std::to_string(attempt_cap) +
                  " attempts");
}

inline std::vector<Node> sources(const Dag &dag) {
  std::vector<Node> out;
  for (Node i = 0; i < dag.node_count(); ++i) {
    if (dag.parents(i).empty() && (dag.kind() == DagKind::bernoulli || dag.is_incident(i))) {
      out.push_back(i);
    }
  }
  return out;
}

inline std::vector<Node> sinks(const Dag &dag) {
  std::vector<Node> out;
  for (Node i = 0; i < dag.node_count(); ++i) {
    if (dag.children(i).empty() && (dag.kind() == DagKind::bernoulli || dag.is_incident(i))) {
      out.push_back(i);
    }
  }
  return out;
}

// Number of paths and summed path length from every node to one goal,
// saturating so that counts never overflow.
struct PathsToGoal {
  static constexpr std::uint64_t kSaturated = std::uint64_t{1} << 62;

  Node goal;
  std::vector<std::uint64_t> count;
  std::vector<double> length_sum;
  std::vector<bool> saturated;

  PathsToGoal(const Dag &dag, Node goal_node)
      : goal(goal_node), count(dag.node_count(), 0),
        length_sum(dag.node_count(), 0.0), saturated(dag.node_count(), false) {
    count[goal] = 1;
    for (Node u = goal - 1; u >= 0; --u) {
      if (!dag.reachable(u, goal)) {
        continue;
      }
      std::uint64_t c = 0;
      double s = 0.0;
      bool sat = false;
      for (Node v : dag.children(u)) {
        if (count[v] == 0) {
          continue;
        }
        c += count[v];
        s += length_sum[v] + static_cast<double>(count[v]);
        sat = sat || saturated[v];
        if (c >= kSaturated) {
          c = kSaturated;
          sat = true;
        }
      }
      count[u] = c;
      length_sum[u] = s;
      saturated[u] = sat;
    }
  }
};

namespace detail {

inline void dfs_paths(const Dag &dag, Node goal, std::vector<Node> &stack,
                      std::vector<Path> &out, std::size_t cap) {
  const Node u = stack.back();
  if (u == goal) {
    out.push_back(Path{stack});
    return;
  }
  for (Node v : dag.children(u)) {
    if (out.size() >= cap) {
      return;
    }
    if (v == goal || dag.reachable(v, goal)) {
      stack.push_back(v);
      dfs_paths(dag, goal, stack, out, cap);
      stack.pop_back();
    }
  }
}

// The k-th path (0-based) in lexicographic DFS order, given path counts.
inline Path unrank_path(const Dag &dag, const PathsToGoal &counts, Node start,
                        std::uint64_t k) {
  Path path{{start}};
  Node u = start;
  while (u != counts.goal) {
    for (Node v : dag.children(u)) {
      const std::uint64_t c = counts.count[v];
      if (k < c) {
        u = v;
        break;
      }
      k -= c;
    }
    path.nodes.push_back(u);
  }
  return path;
}

} // namespace detail

// All simple directed paths start -> goal in lexicographic DFS order,
// truncated to the first `cap`.
inline std::vector<Path> enumerate_simple_paths(const Dag &dag, NodePair pair,
                                                std::size_t cap = kDefaultPathCap) {
  std::vector<Path> out;
  if (pair.start == pair.goal || !dag.reachable(pair.start, pair.goal) || cap == 0) {
    return out;
  }
  std::vector<Node> stack{pair.start};
  detail::dfs_paths(dag, pair.goal, stack, out, cap);
  return out;
}

inline std::uint64_t count_simple_paths(const Dag &dag, NodePair pair) {
  if (pair.start == pair.goal || !dag.reachable(pair.start, pair.goal)) {
    return 0;
  }
  return PathsToGoal(dag, pair.goal).count[pair.start];
}

// Uniform draw from the capped enumeration. Implemented by unranking a uniform
// index, which selects exactly the path enumerate_simple_paths would hold at
// that index without materialising the list.
inline std::optional<Path> sample_path(const Dag &dag, NodePair pair, Rng &rng,
                                       std::size_t cap = kDefaultPathCap) {
  if (pair.start == pair.goal || !dag.reachable(pair.start, pair.goal)) {
    return std::nullopt;
  }
  const PathsToGoal counts(dag, pair.goal);
  const std::uint64_t total = std::min<std::uint64_t>(counts.count[pair.start], cap);
  return detail::unrank_path(dag, counts, pair.start, rng.below(total));
}

inline std::optional<Path> sample_path(const Dag &dag, NodePair pair,
                                       std::uint64_t seed,
                                       std::size_t cap = kDefaultPathCap) {
  Rng rng(seed, Stream::paths);
  return sample_path(dag, pair, rng, cap);
}

// Tagged distance: either a finite mean path length or no path at all.
struct Distance {
  std::optional<double> value;

  bool finite() const { return value.has_value(); }
  double operator*() const { return *value; }
  static Distance infinite() { return {}; }
};

// Mean edge count over the capped set of simple paths a -> b.
inline Distance graph_distance(const Dag &dag, Node a, Node b,
                               std::size_t cap = kDefaultPathCap) {
  if (a == b || !dag.reachable(a, b)) {
    return Distance::infinite();
  }
  const PathsToGoal counts(dag, b);
  if (!counts.saturated[a] && counts.count[a] <= cap) {
    return {counts.length_sum[a] / static_cast<double>(counts.count[a])};
  }
  const auto paths = enumerate_simple_paths(dag, {a, b}, cap);
  double sum = 0.0;
  for (const Path &p : paths) {
    sum += static_cast<double>(p.edge_count());
  }
  return {sum / static_cast<double>(paths.size())};
}

// Distances from every node to a single goal; cheaper than repeated calls.
inline std::vector<Distance> distances_to(const Dag &dag, Node goal,
                                          std::size_t cap = kDefaultPathCap) {
  const PathsToGoal counts(dag, goal);
  std::vector<Distance> out(dag.node_count());
  for (Node a = 0; a < dag.node_count(); ++a) {
    if (a == goal || counts.count[a] == 0) {
      continue;
    }
    if (!counts.saturated[a] && counts.count[a] <= cap) {
      out[a] = {counts.length_sum[a] / static_cast<double>(counts.count[a])};
    } else {
      out[a] = graph_distance(dag, a, goal, cap);
    }
  }
  return out;
}

// Breadth-first shortest path length in edges, if any.
inline std::optional<int> shortest_path_length(const Dag &dag, Node a, Node b) {
  if (a == b) {
    return 0;
  }
  std::vector<int> dist(dag.node_count(), -1);
  std::vector<Node> frontier{a};
  dist[a] = 0;
  for (std::size_t head = 0; head < frontier.size(); ++head) {
    const Node u = frontier[head];
    for (Node v : dag.children(u)) {
      if (dist[v] < 0) {
        dist[v] = dist[u] + 1;
        if (v == b) {
          return dist[v];
        }
        frontier.push_back(v);
      }
    }
  }
  return std::nullopt;
}

inline bool is_path_of(const Dag &dag, const Path &path) {
  if (path.nodes.empty()) {
    return false;
  }
  for (std::size_t i = 0; i + 1 < path.nodes.size(); ++i) {
    if (!dag.has_edge(path.nodes[i], path.nodes[i + 1])) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Motifs

struct MotifSet {
  std::vector<Dag> motifs;
  int nodes_per_motif = 0;

  int count() const { return static_cast<int>(motifs.size()); }
  int total_nodes() const { return count() * nodes_per_motif; }
  Node global(int motif, Node local) const { return motif * nodes_per_motif + local; }
  int motif_of(Node global_node) const { return global_node / nodes_per_motif; }
  Node local_of(Node global_node) const { return global_node % nodes_per_motif; }
};

struct GhostEdge {
  Node from_node;
  Node to_node;
  int motif_a;
  int motif_b;
  friend bool operator==(const GhostEdge &, const GhostEdge &) = default;
};

struct MotifChain {
  std::vector<int> order;
  std::vector<GhostEdge> ghost_edges;

  std::size_t length() const { return order.size(); }
};

inline MotifSet build_motif_set(int n, int nodes_per_motif, double p,
                                std::uint64_t seed) {
  if (n < 1) {
    throw ConfigError("motif set needs at least one motif");
  }
  MotifSet set;
  set.nodes_per_motif = nodes_per_motif;
  for (int k = 0; k < n; ++k) {
    set.motifs.push_back(
        generate_bernoulli(nodes_per_motif, p, derive_seed(seed, Stream::motifs, k)));
  }
  return set;
}

inline MotifChain build_chain(const MotifSet &set, const std::vector<int> &order,
                              Rng &rng) {
  if (order.size() < 2 || order.size() > static_cast<std::size_t>(set.count())) {
    throw ConfigError("motif chain length must lie in [2, motif count]");
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] < 0 || order[i] >= set.count()) {
      throw ConfigError("motif id out of range");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (order[i] == order[j]) {
        throw ConfigError("motif ids within a chain must be distinct");
      }
    }
  }
  MotifChain chain{order, {}};
  for (std::size_t k = 0; k + 1 < order.size(); ++k) {
    const int a = order[k];
    const int b = order[k + 1];
    const auto out_of_a = sinks(set.motifs[a]);
    const auto into_b = sources(set.motifs[b]);
    if (out_of_a.empty() || into_b.empty()) {
      throw DataError("motif without sink or source cannot be chained");
    }
    const Node from = out_of_a[rng.below(out_of_a.size())];
    const Node to = into_b[rng.below(into_b.size())];
    chain.ghost_edges.push_back({set.global(a, from), set.global(b, to), a, b});
  }
  return chain;
}

inline MotifChain build_chain(const MotifSet &set, const std::vector<int> &order,
                              std::uint64_t seed) {
  Rng rng(seed, Stream::motifs);
  return build_chain(set, order, rng);
}

// ---------------------------------------------------------------------------
// Graph file: `dag <kind> <n>` header, `i j` edge lines, `layer i l` lines.

inline void write_graph(std::ostream &os, const Dag &dag) {
  os << "dag " << to_string(dag.kind()) << ' ' << dag.node_count() << '\n';
  for (const Edge &e : dag.edges()) {
    os << e.from << ' ' << e.to << '\n';
  }
  if (dag.has_layers()) {
    for (Node i = 0; i < dag.node_count(); ++i) {
      os << "layer " << i << ' ' << dag.layer_of(i) << '\n';
    }
  }
}

inline Dag read_graph(std::istream &is) {
  std::string line;
  if (!std::getline(is, line)) {
    throw DataError("empty graph file");
  }
  std::istringstream header(line);
  std::string tag, kind_name;
  int n = 0;
  if (!(header >> tag >> kind_name >> n) || tag != "dag" || n < 1) {
    throw DataError("malformed graph header '" + line + "'");
  }
  const DagKind kind = parse_dag_kind(kind_name);
  std::vector<Edge> edges;
  std::vector<int> layers;
  if (kind == DagKind::hierarchical) {
    layers.assign(n, -1);
  }
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    std::istringstream ls(line);
    if (line.rfind("layer", 0) == 0) {
      std::string word;
      int i = 0, l = 0;
      if (!(ls >> word >> i >> l) || i < 0 || i >= n || layers.empty()) {
        throw DataError("malformed layer line " + std::to_string(lineno));
      }
      layers[i] = l;
    } else {
      int i = 0, j = 0;
      if (!(ls >> i >> j)) {
        throw DataError("malformed edge line " + std::to_string(lineno));
      }
      edges.push_back({i, j});
    }
  }
  for (int l : layers) {
    if (l < 0) {
      throw DataError("hierarchical graph file misses layer lines");
    }
  }
  return Dag(n, kind, std::move(edges), std::move(layers));
}

} // namespace stepnav
