#pragma once

// Mechanistic readouts: attention maps with role tags, the goal+current
// simplified predictor of the attention-only model, edit-distance path
// comparison and the embedding/distance regression.

#include <stepnav/corpus.hpp>
#include <stepnav/error.hpp>
#include <stepnav/graphs.hpp>
#include <stepnav/model.hpp>
#include <stepnav/sampler.hpp>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace stepnav {

struct AttentionSnapshot {
  int position = 0;             // query position (the current token)
  std::vector<double> weights;  // over positions 0..position
  int goal_position = -1;
  int current_position = -1;
  std::vector<int> ghost_positions;

  double mass_on(int pos) const {
    return pos >= 0 && pos < static_cast<int>(weights.size()) ? weights[pos] : 0.0;
  }
  double goal_current_mass() const {
    return mass_on(goal_position) + (current_position != goal_position ? mass_on(current_position) : 0.0);
  }
  double ghost_mass() const {
    double m = 0.0;
    for (int p : ghost_positions) {
      m += mass_on(p);
    }
    return m;
  }
};

// One snapshot per query position from prompt_length - 1 to the end of
// `tokens`: the attention row of (layer, head) at the position whose token is
// the current node. The goal role is the goal-node token that follows the last
// `goal` marker of the prompt; ghost positions are where ghost-edge tokens
// occur in the sequence.
template <typename S>
std::vector<AttentionSnapshot> attention_maps(const ModelParams<S> &p, const ModelConfig &c,
                                              std::span<const Token> tokens, int prompt_length,
                                              int layer = 0, int head = 0,
                                              std::span<const Token> ghost_tokens = {}) {
  if (static_cast<int>(tokens.size()) > c.context_len) {
    throw DataError("attention map input exceeds context length");
  }
  if (prompt_length < 1 || prompt_length > static_cast<int>(tokens.size())) {
    throw DataError("prompt length outside the sequence");
  }
  if (layer < 0 || layer >= c.n_layers || head < 0 || head >= c.n_heads) {
    throw ConfigError("attention layer/head out of range");
  }
  const auto tr = forward(p, c, tokens);
  const auto A = tr.attention(layer, head, 0, c.n_heads);
  int goal_pos = -1;
  for (int i = prompt_length - 1; i >= 0; --i) {
    if (tokens[i] == Vocab::goal) {
      goal_pos = i + 1;
      break;
    }
  }
  std::vector<int> ghost_pos;
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    if (std::find(ghost_tokens.begin(), ghost_tokens.end(), tokens[i]) != ghost_tokens.end()) {
      ghost_pos.push_back(i);
    }
  }
  std::vector<AttentionSnapshot> out;
  for (int t = prompt_length - 1; t < static_cast<int>(tokens.size()); ++t) {
    AttentionSnapshot snap;
    snap.position = t;
    snap.current_position = t;
    snap.goal_position = goal_pos;
    for (int j = 0; j <= t; ++j) {
      snap.weights.push_back(static_cast<double>(A(t, j)));
    }
    for (int g : ghost_pos) {
      if (g <= t) {
        snap.ghost_positions.push_back(g);
      }
    }
    out.push_back(std::move(snap));
  }
  return out;
}

// next = argmax over node tokens of <wte[n], v(goal) + v(current)>, with
// v(x) = W_V LN(wte[x]). Positional rows are left out.
class SimplifiedPredictor {
public:
  template <typename S>
  SimplifiedPredictor(const ModelParams<S> &p, const ModelConfig &c, int node_count)
      : node_count_(node_count) {
    if (!c.attention_only()) {
      throw ConfigError("simplified predictor needs an attn_only_1l model");
    }
    const ModelParams<double> pd = p.template cast<double>();
    Matrix<double> h;
    detail::LayerNormCache<double> cache;
    detail::layernorm_forward(pd.wte, pd.blocks[0].ln1_g, pd.blocks[0].ln1_b, c.ln_epsilon, h, cache);
    values_ = h * pd.blocks[0].wv.transpose();
    readout_ = pd.output_embedding();
  }

  // Tables have one row per vocabulary entry.
  const Matrix<double> &values() const { return values_; }
  const Matrix<double> &readout() const { return readout_; }
  RowVector<double> value(Node n) const { return values_.row(Vocab::kFirstNode + n); }

  double score(Node candidate, Node goal, Node current) const {
    return readout_.row(Vocab::kFirstNode + candidate).dot(value(goal) + value(current));
  }

  Node next(Node goal, Node current) const {
    const RowVector<double> v = value(goal) + value(current);
    Node best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (Node n = 0; n < node_count_; ++n) {
      const double s = readout_.row(Vocab::kFirstNode + n).dot(v);
      if (s > best_score) {
        best_score = s;
        best = n;
      }
    }
    return best;
  }

  // Iterates from the start until the goal is produced or `cap` steps.
  Path path(NodePair pair, int cap) const {
    Path out{{pair.start}};
    Node cur = pair.start;
    for (int k = 0; k < cap && cur != pair.goal; ++k) {
      cur = next(pair.goal, cur);
      out.nodes.push_back(cur);
    }
    return out;
  }

  int node_count() const { return node_count_; }

private:
  int node_count_;
  Matrix<double> values_;
  Matrix<double> readout_;
};

inline bool path_reaches(const Dag &dag, const Path &p, Node goal) {
  return p.nodes.size() > 1 && p.nodes.back() == goal && is_path_of(dag, p);
}

template <typename T> std::size_t levenshtein(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) {
    prev[j] = j;
  }
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

template <typename T> std::size_t levenshtein(const std::vector<T> &a, const std::vector<T> &b) {
  return levenshtein(std::span<const T>(a), std::span<const T>(b));
}

struct PathComparison {
  NodePair pair{0, 0};
  Path full;
  Path simplified;
  std::size_t edit_distance = 0;
};

struct PathSimilarity {
  std::vector<PathComparison> rows;
  double full_accuracy = 0.0;       // valid path to the goal
  double simplified_accuracy = 0.0;
  double identical_fraction = 0.0;

  std::vector<std::size_t> distribution() const {
    std::vector<std::size_t> hist;
    for (const auto &r : rows) {
      if (r.edit_distance >= hist.size()) {
        hist.resize(r.edit_distance + 1, 0);
      }
      hist[r.edit_distance]++;
    }
    return hist;
  }
};

// Greedy model paths against simplified-rule paths on the same pairs. The
// simplified rule runs for at most as many steps as the model may emit.
template <typename S>
PathSimilarity path_similarity(const ModelParams<S> &p, const ModelConfig &c,
                               const SimplifiedPredictor &pred, const Dag &dag,
                               std::span<const NodePair> pairs) {
  PathSimilarity out;
  if (pairs.empty()) {
    return out;
  }
  const auto gens = generate_paths(p, c, dag, pairs, SampleConfig{});
  const int cap = c.context_len - 3;
  std::size_t full_ok = 0, simp_ok = 0, same = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    PathComparison row;
    row.pair = pairs[i];
    row.full = gens[i].check.path;
    row.simplified = pred.path(pairs[i], cap);
    row.edit_distance = levenshtein(row.full.nodes, row.simplified.nodes);
    full_ok += gens[i].check.verdict == Verdict::valid_path ? 1 : 0;
    simp_ok += path_reaches(dag, row.simplified, pairs[i].goal) ? 1 : 0;
    same += row.edit_distance == 0 ? 1 : 0;
    out.rows.push_back(std::move(row));
  }
  const double n = static_cast<double>(pairs.size());
  out.full_accuracy = full_ok / n;
  out.simplified_accuracy = simp_ok / n;
  out.identical_fraction = same / n;
  return out;
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double pearson = 0.0;
  std::size_t points = 0;
};

inline LinearFit ordinary_least_squares(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw DataError("regression inputs differ in length");
  }
  if (x.size() < 3) {
    throw InsufficientDataError("regression needs at least 3 points");
  }
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) {
    throw InsufficientDataError("regressor is constant");
  }
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.pearson = syy > 0.0 ? sxy / std::sqrt(sxx * syy) : 0.0;
  f.points = x.size();
  return f;
}

struct RegressionPoint {
  Node candidate;
  Node goal;
  double distance;
  double inner_product;
};

struct DistanceRegression {
  std::vector<RegressionPoint> points;
  LinearFit fit;
};

inline constexpr std::size_t kRegressionPointCap = 20000;

// Regresses <wte[X], v(X_g)> on graph_distance(X, X_g) over every node X with
// a finite distance to the goal of each sampled pair (distinct (X, goal), in
// pair order, capped).
inline DistanceRegression distance_regression(const SimplifiedPredictor &pred, const Dag &dag,
                                              std::span<const NodePair> pairs,
                                              std::size_t cap = kRegressionPointCap) {
  DistanceRegression out;
  std::set<Node> goals_done;
  for (NodePair pr : pairs) {
    if (out.points.size() >= cap) {
      break;
    }
    if (!goals_done.insert(pr.goal).second) {
      continue;
    }
    const auto d = distances_to(dag, pr.goal);
    const RowVector<double> vg = pred.value(pr.goal);
    for (Node a = 0; a < dag.node_count() && out.points.size() < cap; ++a) {
      if (!d[a].finite()) {
        continue;
      }
      const double ip = pred.readout().row(Vocab::kFirstNode + a).dot(vg);
      out.points.push_back({a, pr.goal, *d[a], ip});
    }
  }
  std::vector<double> x, y;
  for (const auto &pt : out.points) {
    x.push_back(pt.distance);
    y.push_back(pt.inner_product);
  }
  out.fit = ordinary_least_squares(x, y);
  return out;
}

inline std::string join_path(const Path &p) {
  std::string s;
  for (std::size_t i = 0; i < p.nodes.size(); ++i) {
    s += (i ? " " : "") + std::to_string(p.nodes[i]);
  }
  return s;
}

inline void write_path_similarity_csv(std::ostream &os, const PathSimilarity &ps) {
  os << "pair_id,start,goal,full_path,simplified_path,edit_distance\n";
  for (std::size_t i = 0; i < ps.rows.size(); ++i) {
    const auto &r = ps.rows[i];
    os << i << ',' << r.pair.start << ',' << r.pair.goal << ',' << join_path(r.full) << ','
       << join_path(r.simplified) << ',' << r.edit_distance << '\n';
  }
}

inline void write_regression_csv(std::ostream &os, const DistanceRegression &dr) {
  os.precision(17);
  os << "candidate,goal,inner_product,distance\n";
  for (const auto &pt : dr.points) {
    os << pt.candidate << ',' << pt.goal << ',' << pt.inner_product << ',' << pt.distance << '\n';
  }
}

} // namespace stepnav
