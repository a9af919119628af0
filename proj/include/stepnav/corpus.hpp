#pragma once

// Token-level episodes for graph navigation: vocabulary, stepwise/direct
// encodings, dataset construction with pair-level splits, token corruption,
// and in-context exemplar episodes over motif chains.

#include <stepnav/error.hpp>
#include <stepnav/graphs.hpp>
#include <stepnav/rng.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace stepnav {

enum class Mode { stepwise, direct };

inline const char *to_string(Mode m) { return m == Mode::stepwise ? "stepwise" : "direct"; }

inline Mode parse_mode(const std::string &s) {
  if (s == "stepwise") {
    return Mode::stepwise;
  }
  if (s == "direct") {
    return Mode::direct;
  }
  throw ConfigError("unknown mode '" + s + "'");
}

// Special tokens take the lowest ids; node Xi has id kFirstNode + i.
class Vocab {
public:
  static constexpr Token pad = 0;
  static constexpr Token goal = 1;
  static constexpr Token end = 2;
  static constexpr Token p0 = 3;
  static constexpr Token p1 = 4;
  static constexpr Token kFirstNode = 5;

  explicit Vocab(int node_count) : node_count_(node_count) {
    if (node_count < 1) {
      throw ConfigError("vocabulary needs at least one node");
    }
  }

  int size() const { return kFirstNode + node_count_; }
  int node_count() const { return node_count_; }

  Token node(Node i) const { return kFirstNode + i; }
  bool is_node(Token t) const { return t >= kFirstNode && t < size(); }
  Node node_of(Token t) const { return t - kFirstNode; }
  bool is_special(Token t) const { return t >= 0 && t < kFirstNode; }

  std::string str(Token t) const {
    static constexpr const char *kNames[] = {"pad", "goal", "end", "p0", "p1"};
    if (is_special(t)) {
      return kNames[t];
    }
    if (is_node(t)) {
      return "X" + std::to_string(node_of(t));
    }
    throw DataError("token id " + std::to_string(t) + " outside vocabulary");
  }

  Token id(const std::string &s) const {
    static const std::map<std::string, Token> kSpecial = {
        {"pad", pad}, {"goal", goal}, {"end", end}, {"p0", p0}, {"p1", p1}};
    if (auto it = kSpecial.find(s); it != kSpecial.end()) {
      return it->second;
    }
    if (s.size() >= 2 && s[0] == 'X') {
      std::size_t used = 0;
      int i = -1;
      try {
        i = std::stoi(s.substr(1), &used);
      } catch (const std::exception &) {
        i = -1;
      }
      if (used + 1 == s.size() && i >= 0 && i < node_count_) {
        return node(i);
      }
    }
    throw DataError("unknown token '" + s + "'");
  }

  std::string decode(const std::vector<Token> &tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) {
        out += ' ';
      }
      out += str(tokens[i]);
    }
    return out;
  }

  std::vector<Token> encode(const std::string &text) const {
    std::istringstream is(text);
    std::vector<Token> out;
    std::string word;
    while (is >> word) {
      out.push_back(id(word));
    }
    return out;
  }

  friend bool operator==(const Vocab &, const Vocab &) = default;

private:
  int node_count_;
};

struct EpisodeMeta {
  NodePair pair{0, 0};
  Mode mode = Mode::stepwise;
  bool positive = true;
  int chain_id = -1;
  // Number of leading tokens that form the prompt when the episode is used for
  // generation (the model continues from here).
  int prompt_length = 3;
};

// Token ids right-padded to the context length; `length` counts non-pad ids.
struct Sequence {
  std::vector<Token> tokens;
  int length = 0;
  EpisodeMeta meta;

  std::vector<Token> content() const {
    return {tokens.begin(), tokens.begin() + length};
  }
};

inline Sequence pad_sequence(std::vector<Token> content, int context_len,
                             EpisodeMeta meta) {
  if (static_cast<int>(content.size()) > context_len) {
    throw DataError("episode of " + std::to_string(content.size()) +
                    " tokens exceeds context length " + std::to_string(context_len));
  }
  Sequence s;
  s.length = static_cast<int>(content.size());
  s.tokens = std::move(content);
  s.tokens.resize(context_len, Vocab::pad);
  s.meta = meta;
  return s;
}

// Prompt shared by every single-graph episode: `goal X_g X_s`.
inline std::vector<Token> pair_prompt(const Vocab &vocab, NodePair pair) {
  return {Vocab::goal, vocab.node(pair.goal), vocab.node(pair.start)};
}

// Layouts:
//   stepwise positive: goal X_g X_s ... X_g p1 end
//   direct positive:   goal X_g X_s p1 end
//   negative:          goal X_g X_s p0 end
inline Sequence encode_episode(const std::optional<Path> &path, NodePair pair,
                               Mode mode, const Vocab &vocab, int context_len) {
  std::vector<Token> t = pair_prompt(vocab, pair);
  EpisodeMeta meta{pair, mode, path.has_value()};
  if (!path) {
    t.push_back(Vocab::p0);
  } else {
    const auto &nodes = path->nodes;
    if (nodes.size() < 2 || nodes.front() != pair.start || nodes.back() != pair.goal) {
      throw DataError("path does not join the episode's start and goal");
    }
    if (mode == Mode::stepwise) {
      for (std::size_t i = 1; i < nodes.size(); ++i) {
        t.push_back(vocab.node(nodes[i]));
      }
    }
    t.push_back(Vocab::p1);
  }
  t.push_back(Vocab::end);
  return pad_sequence(std::move(t), context_len, meta);
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetSpec {
  Mode mode = Mode::stepwise;
  double train_fraction = 0.20;
  double negative_ratio = 1.0;
  std::optional<int> delta;
  // Hierarchical graphs: keep only negatives whose goal lies in a later layer
  // than the start (pairs ordered against the layers are trivially negative).
  bool forward_negatives = false;
  double corruption_rate = 0.0;
  int context_len = 32;
  std::size_t path_cap = kDefaultPathCap;
  std::uint64_t seed = 0;
};

struct Dataset {
  Mode mode = Mode::stepwise;
  Vocab vocab{1};
  int context_len = 32;
  std::vector<Sequence> train;
  std::vector<NodePair> train_positive_pairs;
  std::vector<NodePair> train_negative_pairs;
  std::vector<NodePair> eval_positive;
  std::vector<NodePair> eval_negative;
};

inline int layer_gap(const Dag &dag, NodePair pair) {
  return std::abs(dag.layer_of(pair.goal) - dag.layer_of(pair.start));
}

inline Dataset build_dataset(const DatasetSpec &spec, const Dag &dag) {
  if (spec.train_fraction < 0.0 || spec.train_fraction > 1.0) {
    throw ConfigError("train fraction must lie in [0, 1]");
  }
  if (spec.negative_ratio < 0.0) {
    throw ConfigError("negative ratio must be non-negative");
  }
  if (spec.delta && *spec.delta < 1) {
    throw ConfigError("delta must be at least 1");
  }
  if (spec.delta && dag.kind() != DagKind::hierarchical) {
    throw ConfigError("delta threshold requires a hierarchical graph");
  }
  const int n = dag.node_count();
  Dataset ds;
  ds.mode = spec.mode;
  ds.vocab = Vocab(n);
  ds.context_len = spec.context_len;

  auto train_allowed = [&](NodePair p) { return !spec.delta || layer_gap(dag, p) < *spec.delta; };
  auto eval_allowed = [&](NodePair p) { return !spec.delta || layer_gap(dag, p) >= *spec.delta; };

  std::vector<NodePair> connected;
  std::vector<NodePair> unconnected;
  for (Node s = 0; s < n; ++s) {
    for (Node g = 0; g < n; ++g) {
      if (s == g) {
        continue;
      }
      if (dag.reachable(s, g)) {
        if (!dag.has_edge(s, g)) {
          connected.push_back({s, g});
        }
      } else if (!spec.forward_negatives || dag.layer_of(g) > dag.layer_of(s)) {
        unconnected.push_back({s, g});
      }
    }
  }

  Rng rng(spec.seed, Stream::dataset);
  auto add_positive = [&](NodePair pair, const std::vector<Path> &paths) {
    if (spec.mode == Mode::stepwise) {
      for (const Path &p : paths) {
        if (static_cast<int>(p.nodes.size()) + 4 > spec.context_len) {
          continue;
        }
        ds.train.push_back(encode_episode(p, pair, spec.mode, ds.vocab, spec.context_len));
      }
    } else {
      ds.train.push_back(encode_episode(paths.front(), pair, spec.mode, ds.vocab,
                                        spec.context_len));
    }
    ds.train_positive_pairs.push_back(pair);
  };

  for (const Edge &e : dag.edges()) {
    add_positive({e.from, e.to}, {Path{{e.from, e.to}}});
  }

  std::vector<NodePair> candidates;
  for (NodePair p : connected) {
    if (train_allowed(p)) {
      candidates.push_back(p);
    }
  }
  rng.shuffle(std::span(candidates));
  const auto take = static_cast<std::size_t>(
      std::llround(spec.train_fraction * static_cast<double>(candidates.size())));
  std::set<NodePair> chosen(candidates.begin(), candidates.begin() + take);
  for (NodePair p : connected) {
    if (chosen.contains(p)) {
      add_positive(p, enumerate_simple_paths(dag, p, spec.path_cap));
    } else if (eval_allowed(p)) {
      ds.eval_positive.push_back(p);
    }
  }

  std::vector<NodePair> negatives;
  for (NodePair p : unconnected) {
    if (train_allowed(p)) {
      negatives.push_back(p);
    }
  }
  rng.shuffle(std::span(negatives));
  const auto neg_take = std::min<std::size_t>(
      negatives.size(),
      static_cast<std::size_t>(std::llround(
          spec.negative_ratio * static_cast<double>(ds.train_positive_pairs.size()))));
  std::set<NodePair> neg_chosen(negatives.begin(), negatives.begin() + neg_take);
  for (NodePair p : unconnected) {
    if (neg_chosen.contains(p)) {
      ds.train.push_back(
          encode_episode(std::nullopt, p, spec.mode, ds.vocab, spec.context_len));
      ds.train_negative_pairs.push_back(p);
    } else if (eval_allowed(p)) {
      ds.eval_negative.push_back(p);
    }
  }
  return ds;
}

// Replaces exactly round(rate * M) of the M non-pad training positions. Each
// chosen token is redrawn uniformly from the non-pad vocabulary minus its
// current value, so every chosen position changes.
inline Dataset corrupt(Dataset ds, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate > 1.0) {
    throw ConfigError("corruption rate must lie in [0, 1]");
  }
  std::vector<std::pair<std::uint32_t, std::uint32_t>> positions;
  for (std::size_t s = 0; s < ds.train.size(); ++s) {
    for (int i = 0; i < ds.train[s].length; ++i) {
      positions.emplace_back(static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(i));
    }
  }
  const auto count = static_cast<std::size_t>(
      std::llround(rate * static_cast<double>(positions.size())));
  Rng rng(seed, Stream::corruption);
  const int choices = ds.vocab.size() - 1;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t j = k + rng.below(positions.size() - k);
    std::swap(positions[k], positions[j]);
    Token &tok = ds.train[positions[k].first].tokens[positions[k].second];
    // Draw from {1..V-1} \ {tok}.
    Token r = 1 + static_cast<Token>(rng.below(static_cast<std::uint64_t>(choices - 1)));
    if (r >= tok) {
      ++r;
    }
    tok = r;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Motif exemplars

inline constexpr int kExemplarResampleCap = 1000;

// Path inside one motif between two global node ids, if any.
inline std::optional<Path> sample_motif_path(const MotifSet &set, int motif,
                                             Node from_global, Node to_global,
                                             Rng &rng) {
  const Node a = set.local_of(from_global);
  const Node b = set.local_of(to_global);
  if (a == b) {
    return Path{{from_global}};
  }
  auto local = sample_path(set.motifs[motif], {a, b}, rng);
  if (!local) {
    return std::nullopt;
  }
  for (Node &x : local->nodes) {
    x = set.global(motif, x);
  }
  return local;
}

// `goal X_g X_s ... X_sink(a) X_source(b) ... X_g` for one ghost edge, with
// X_s a source of motif a and X_g a sink of motif b.
inline std::vector<Token> build_exemplar(const MotifSet &set, const GhostEdge &ghost,
                                         Rng &rng, const Vocab &vocab) {
  const auto srcs = sources(set.motifs[ghost.motif_a]);
  const auto snks = sinks(set.motifs[ghost.motif_b]);
  for (int attempt = 0; attempt < kExemplarResampleCap; ++attempt) {
    const Node xs = set.global(ghost.motif_a, srcs[rng.below(srcs.size())]);
    const Node xg = set.global(ghost.motif_b, snks[rng.below(snks.size())]);
    auto first = sample_motif_path(set, ghost.motif_a, xs, ghost.from_node, rng);
    auto second = sample_motif_path(set, ghost.motif_b, ghost.to_node, xg, rng);
    if (!first || !second) {
      continue;
    }
    std::vector<Token> t{Vocab::goal, vocab.node(xg)};
    for (Node x : first->nodes) {
      t.push_back(vocab.node(x));
    }
    for (Node x : second->nodes) {
      t.push_back(vocab.node(x));
    }
    return t;
  }
  throw DataError("no exemplar path through ghost edge within resample cap");
}

struct ContextEpisode {
  Sequence sequence;
  NodePair pair{0, 0};
  // Full final path from X_s to X_g (global node ids).
  Path final_path;
};

// Samples the final through-path of a chain: X_s in the first motif, X_g in
// the last, crossing every ghost edge.
inline std::optional<Path> sample_chain_path(const MotifSet &set, const MotifChain &chain,
                                             Node xs, Node xg, Rng &rng) {
  Path full;
  Node cur = xs;
  for (std::size_t k = 0; k < chain.order.size(); ++k) {
    const Node target =
        k + 1 < chain.order.size() ? chain.ghost_edges[k].from_node : xg;
    auto seg = sample_motif_path(set, chain.order[k], cur, target, rng);
    if (!seg) {
      return std::nullopt;
    }
    full.nodes.insert(full.nodes.end(), seg->nodes.begin(), seg->nodes.end());
    if (k + 1 < chain.order.size()) {
      cur = chain.ghost_edges[k].to_node;
    }
  }
  return full;
}

// Exemplars (one per ghost edge, in the given order) then the
// final episode `goal X_g X_s ... X_g end`.
inline ContextEpisode build_context_episode(const MotifSet &set, const MotifChain &chain,
                                            const std::vector<GhostEdge> &exemplar_edges,
                                            Rng &rng, const Vocab &vocab,
                                            int context_len) {
  std::vector<Token> t;
  for (const GhostEdge &g : exemplar_edges) {
    const auto ex = build_exemplar(set, g, rng, vocab);
    t.insert(t.end(), ex.begin(), ex.end());
  }
  const auto srcs = sources(set.motifs[chain.order.front()]);
  const auto snks = sinks(set.motifs[chain.order.back()]);
  for (int attempt = 0; attempt < kExemplarResampleCap; ++attempt) {
    const Node xs = set.global(chain.order.front(), srcs[rng.below(srcs.size())]);
    const Node xg = set.global(chain.order.back(), snks[rng.below(snks.size())]);
    auto path = sample_chain_path(set, chain, xs, xg, rng);
    if (!path) {
      continue;
    }
    ContextEpisode ep;
    ep.pair = {xs, xg};
    t.push_back(Vocab::goal);
    t.push_back(vocab.node(xg));
    const int prompt_length = static_cast<int>(t.size()) + 1;
    for (Node x : path->nodes) {
      t.push_back(vocab.node(x));
    }
    t.push_back(Vocab::end);
    EpisodeMeta meta{ep.pair, Mode::stepwise, true, -1, prompt_length};
    ep.sequence = pad_sequence(std::move(t), context_len, meta);
    ep.final_path = std::move(*path);
    return ep;
  }
  throw DataError("no through-path for motif chain within resample cap");
}

inline ContextEpisode build_context_episode(const MotifSet &set, const MotifChain &chain,
                                            Rng &rng, const Vocab &vocab,
                                            int context_len) {
  return build_context_episode(set, chain, chain.ghost_edges, rng, vocab, context_len);
}

// Unordered motif pairs {i < j}, split into train and test sets.
struct MotifOrderSplit {
  std::vector<std::pair<int, int>> train;
  std::vector<std::pair<int, int>> test;

  bool is_train(int a, int b) const {
    const auto key = std::minmax(a, b);
    return std::find(train.begin(), train.end(), std::pair<int, int>(key)) != train.end();
  }
};

inline MotifOrderSplit split_motif_orders(int motif_count, double train_fraction,
                                          std::uint64_t seed) {
  std::vector<std::pair<int, int>> all;
  for (int i = 0; i < motif_count; ++i) {
    for (int j = i + 1; j < motif_count; ++j) {
      all.emplace_back(i, j);
    }
  }
  Rng rng(seed, Stream::motifs, 0xA11);
  rng.shuffle(std::span(all));
  const auto take = static_cast<std::size_t>(
      std::llround(train_fraction * static_cast<double>(all.size())));
  MotifOrderSplit split;
  split.train.assign(all.begin(), all.begin() + take);
  split.test.assign(all.begin() + take, all.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

inline MotifOrderSplit split_motif_orders(const MotifSet &set, std::uint64_t seed,
                                          double train_fraction = 35.0 / 45.0) {
  return split_motif_orders(set.count(), train_fraction, seed);
}

// ---------------------------------------------------------------------------
// Dataset files: one unpadded sequence per line; metadata lists eval pairs.

inline void write_sequences(std::ostream &os, const Dataset &ds) {
  for (const Sequence &s : ds.train) {
    os << ds.vocab.decode(s.content()) << '\n';
  }
}

inline std::vector<Sequence> read_sequences(std::istream &is, const Vocab &vocab,
                                            int context_len) {
  std::vector<Sequence> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) {
      continue;
    }
    auto tokens = vocab.encode(line);
    EpisodeMeta meta;
    if (tokens.size() >= 3 && vocab.is_node(tokens[1]) && vocab.is_node(tokens[2])) {
      meta.pair = {vocab.node_of(tokens[2]), vocab.node_of(tokens[1])};
      meta.positive = std::find(tokens.begin(), tokens.end(), Vocab::p1) != tokens.end();
    }
    out.push_back(pad_sequence(std::move(tokens), context_len, meta));
  }
  return out;
}

inline void write_vocab(std::ostream &os, const Vocab &vocab) {
  for (Token t = 0; t < vocab.size(); ++t) {
    os << vocab.str(t) << ' ' << t << '\n';
  }
}

inline Vocab read_vocab(std::istream &is) {
  std::string name;
  Token id = 0;
  int nodes = 0;
  Token expected = 0;
  while (is >> name >> id) {
    if (id != expected++) {
      throw DataError("vocabulary ids must be dense and ordered");
    }
    if (id >= Vocab::kFirstNode) {
      ++nodes;
    }
  }
  Vocab v(nodes);
  return v;
}

inline void write_eval_pairs(std::ostream &os, const Dataset &ds) {
  os << "positive " << ds.eval_positive.size() << '\n';
  for (NodePair p : ds.eval_positive) {
    os << p.start << ' ' << p.goal << '\n';
  }
  os << "negative " << ds.eval_negative.size() << '\n';
  for (NodePair p : ds.eval_negative) {
    os << p.start << ' ' << p.goal << '\n';
  }
}

inline std::pair<std::vector<NodePair>, std::vector<NodePair>>
read_eval_pairs(std::istream &is) {
  std::pair<std::vector<NodePair>, std::vector<NodePair>> out;
  for (auto *section : {&out.first, &out.second}) {
    std::string tag;
    std::size_t count = 0;
    if (!(is >> tag >> count)) {
      throw DataError("malformed eval pair metadata");
    }
    for (std::size_t i = 0; i < count; ++i) {
      NodePair p{};
      if (!(is >> p.start >> p.goal)) {
        throw DataError("truncated eval pair metadata");
      }
      section->push_back(p);
    }
  }
  return out;
}

} // namespace stepnav
