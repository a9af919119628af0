#pragma once

// Autoregressive generation with temperature, plus path validation and
// path/no-path classification readout.

#include <stepnav/corpus.hpp>
#include <stepnav/graphs.hpp>
#include <stepnav/model.hpp>
#include <stepnav/rng.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace stepnav {

struct SampleConfig {
  double temperature = 0.0;
  int max_new_tokens = -1; // -1: up to the context length
  std::uint64_t seed = 0;
};

enum class Verdict { valid_path, misstep, planning_failure, no_answer };
enum class Flag { p0, p1, absent };

inline const char *to_string(Verdict v) {
  switch (v) {
  case Verdict::valid_path: return "valid_path";
  case Verdict::misstep: return "misstep";
  case Verdict::planning_failure: return "planning_failure";
  case Verdict::no_answer: return "no_answer";
  }
  return "?";
}

inline const char *to_string(Flag f) {
  switch (f) {
  case Flag::p0: return "p0";
  case Flag::p1: return "p1";
  case Flag::absent: return "absent";
  }
  return "?";
}

struct PathCheck {
  Verdict verdict = Verdict::no_answer;
  Path path;             // start node followed by emitted nodes
  bool misstep = false;  // some bigram is not an edge, or a token is not a node
  bool reaches_goal = false;
  bool terminated = false;
  bool revisit = false;
};

struct GenerationResult {
  std::vector<Token> prompt;
  std::vector<Token> emitted;
  PathCheck check;
  Flag flag = Flag::absent;
  double temperature = 0.0;
  std::uint64_t seed = 0;
};

inline bool is_terminator(Token t) {
  return t == Vocab::end || t == Vocab::p0 || t == Vocab::p1;
}

// Emitted tokens are read up to the first terminator (end/p0/p1). A misstep is
// any non-node token or non-edge bigram in start + emitted nodes; otherwise a
// missing terminator is no_answer, a wrong final node is a planning failure.
template <typename EdgeFn>
PathCheck check_path(std::span<const Token> emitted, const Vocab &vocab, NodePair pair,
                     EdgeFn &&has_edge) {
  PathCheck out;
  out.path.nodes.push_back(pair.start);
  for (Token t : emitted) {
    if (is_terminator(t)) {
      out.terminated = true;
      break;
    }
    if (!vocab.is_node(t)) {
      out.misstep = true;
      continue;
    }
    const Node n = vocab.node_of(t);
    if (!has_edge(out.path.nodes.back(), n)) {
      out.misstep = true;
    }
    out.path.nodes.push_back(n);
  }
  std::set<Node> seen(out.path.nodes.begin(), out.path.nodes.end());
  out.revisit = seen.size() != out.path.nodes.size();
  out.reaches_goal = out.path.nodes.size() > 1 && out.path.nodes.back() == pair.goal;
  if (out.misstep) {
    out.verdict = Verdict::misstep;
  } else if (!out.terminated) {
    out.verdict = Verdict::no_answer;
  } else if (!out.reaches_goal) {
    out.verdict = Verdict::planning_failure;
  } else {
    out.verdict = Verdict::valid_path;
  }
  return out;
}

inline PathCheck validate(std::span<const Token> emitted, const Dag &dag, NodePair pair,
                          const Vocab &vocab) {
  return check_path(emitted, vocab, pair,
                    [&](Node a, Node b) { return dag.has_edge(a, b); });
}

inline Flag first_flag(std::span<const Token> emitted) {
  for (Token t : emitted) {
    if (t == Vocab::p0) {
      return Flag::p0;
    }
    if (t == Vocab::p1) {
      return Flag::p1;
    }
  }
  return Flag::absent;
}

// Lowest-id argmax, or a draw from softmax(logits / temperature).
template <typename Row> Token sample_token(const Row &logits, double temperature, Rng &rng) {
  const Eigen::Index V = logits.size();
  if (temperature <= 0.0) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < V; ++i) {
      if (logits(i) > logits(best)) {
        best = i;
      }
    }
    return static_cast<Token>(best);
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < V; ++i) {
    mx = std::max(mx, static_cast<double>(logits(i)) / temperature);
  }
  thread_local std::vector<double> w;
  w.resize(V);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < V; ++i) {
    w[i] = std::exp(static_cast<double>(logits(i)) / temperature - mx);
    sum += w[i];
  }
  double u = rng.uniform() * sum;
  for (Eigen::Index i = 0; i < V; ++i) {
    u -= w[i];
    if (u < 0.0) {
      return static_cast<Token>(i);
    }
  }
  // Rounding left mass unassigned; return the last token with weight.
  for (Eigen::Index i = V - 1; i >= 0; --i) {
    if (w[i] > 0.0) {
      return static_cast<Token>(i);
    }
  }
  return 0;
}

// Incremental (key/value cached) evaluation of many sequences at once. Each row
// advances one token per call at its own position.
template <typename S> class Decoder {
public:
  Decoder(const ModelParams<S> &p, const ModelConfig &c, int rows)
      : p_(p), c_(c), rows_(rows), k_(c.n_layers), v_(c.n_layers) {
    for (int l = 0; l < c.n_layers; ++l) {
      k_[l].setZero(static_cast<Eigen::Index>(rows) * c.context_len, c.d_embd);
      v_[l].setZero(static_cast<Eigen::Index>(rows) * c.context_len, c.d_embd);
    }
  }

  // Feeds token[i] at position pos[i] for each listed row; returns logits
  // (one row per entry).
  const Matrix<S> &step(std::span<const int> rows, std::span<const Token> tokens,
                        std::span<const int> positions) {
    const int d = c_.d_embd, H = c_.n_heads, dh = c_.head_dim();
    const auto A = static_cast<Eigen::Index>(rows.size());
    const S scale = c_.attn_scale ? S(1) / std::sqrt(static_cast<S>(dh)) : S(1);
    x_.resize(A, d);
    for (Eigen::Index i = 0; i < A; ++i) {
      if (positions[i] >= c_.context_len) {
        throw DataError("generation exceeds context length");
      }
      x_.row(i) = p_.wte.row(tokens[i]) + p_.wpe.row(positions[i]);
    }
    for (int l = 0; l < c_.n_layers; ++l) {
      const auto &bp = p_.blocks[l];
      detail::layernorm_forward(x_, bp.ln1_g, bp.ln1_b, c_.ln_epsilon, a_, ln_);
      q_.noalias() = a_ * bp.wq.transpose();
      kk_.noalias() = a_ * bp.wk.transpose();
      vv_.noalias() = a_ * bp.wv.transpose();
      y_.setZero(A, d);
      for (Eigen::Index i = 0; i < A; ++i) {
        const Eigen::Index base = static_cast<Eigen::Index>(rows[i]) * c_.context_len;
        const int pos = positions[i];
        k_[l].row(base + pos) = kk_.row(i);
        v_[l].row(base + pos) = vv_.row(i);
        for (int h = 0; h < H; ++h) {
          scores_.resize(pos + 1);
          S mx = -std::numeric_limits<S>::infinity();
          for (int j = 0; j <= pos; ++j) {
            scores_(j) = q_.row(i).segment(h * dh, dh).dot(k_[l].row(base + j).segment(h * dh, dh)) * scale;
            mx = std::max(mx, scores_(j));
          }
          S sum = 0;
          for (int j = 0; j <= pos; ++j) {
            scores_(j) = std::exp(scores_(j) - mx);
            sum += scores_(j);
          }
          for (int j = 0; j <= pos; ++j) {
            y_.row(i).segment(h * dh, dh) += (scores_(j) / sum) * v_[l].row(base + j).segment(h * dh, dh);
          }
        }
      }
      if (c_.attention_only()) {
        x_ = a_ + y_;
        continue;
      }
      x_.noalias() += y_ * bp.wo.transpose();
      detail::layernorm_forward(x_, bp.ln2_g, bp.ln2_b, c_.ln_epsilon, a2_, ln_);
      h_.noalias() = a2_ * bp.w1.transpose();
      h_ = h_.unaryExpr([](S v) { return detail::gelu(v); });
      x_.noalias() += h_ * bp.w2.transpose();
    }
    if (!c_.attention_only()) {
      detail::layernorm_forward(x_, p_.lnf_g, p_.lnf_b, c_.ln_epsilon, a_, ln_);
      logits_.noalias() = a_ * p_.output_embedding().transpose();
    } else {
      logits_.noalias() = x_ * p_.output_embedding().transpose();
    }
    return logits_;
  }

private:
  const ModelParams<S> &p_;
  const ModelConfig &c_;
  int rows_;
  std::vector<Matrix<S>> k_, v_;
  Matrix<S> x_, a_, a2_, q_, kk_, vv_, y_, h_, logits_;
  Eigen::Matrix<S, Eigen::Dynamic, 1> scores_;
  detail::LayerNormCache<S> ln_;
};

struct GenerationRequest {
  std::vector<Token> prompt;
  std::uint64_t seed = 0;
};

// Continues every prompt until a terminator (end/p0/p1), the token cap, or
// the context end. Rows are independent: row i samples with its own seed.
template <typename S>
std::vector<std::vector<Token>> generate_tokens(const ModelParams<S> &p, const ModelConfig &c,
                                                std::span<const GenerationRequest> requests,
                                                double temperature, int max_new_tokens = -1,
                                                int chunk = 256) {
  std::vector<std::vector<Token>> out(requests.size());
  for (std::size_t begin = 0; begin < requests.size(); begin += chunk) {
    const std::size_t end = std::min(requests.size(), begin + chunk);
    const int rows = static_cast<int>(end - begin);
    Decoder<S> dec(p, c, rows);
    std::vector<Rng> rngs;
    std::vector<int> fed(rows, 0);
    std::vector<int> budget(rows);
    std::vector<bool> done(rows, false);
    std::vector<Token> next(rows);
    for (int r = 0; r < rows; ++r) {
      const auto &req = requests[begin + r];
      if (req.prompt.empty() || static_cast<int>(req.prompt.size()) > c.context_len) {
        throw DataError("prompt does not fit the context");
      }
      rngs.emplace_back(req.seed, Stream::sampling);
      const int room = c.context_len - static_cast<int>(req.prompt.size());
      budget[r] = max_new_tokens < 0 ? room : std::min(room, max_new_tokens);
      next[r] = req.prompt[0];
      done[r] = budget[r] <= 0;
    }
    std::vector<int> active, positions;
    std::vector<Token> tokens;
    while (true) {
      active.clear();
      positions.clear();
      tokens.clear();
      for (int r = 0; r < rows; ++r) {
        if (!done[r]) {
          active.push_back(r);
          positions.push_back(fed[r]);
          tokens.push_back(next[r]);
        }
      }
      if (active.empty()) {
        break;
      }
      const Matrix<S> &logits = dec.step(active, tokens, positions);
      for (std::size_t i = 0; i < active.size(); ++i) {
        const int r = active[i];
        const auto &prompt = requests[begin + r].prompt;
        ++fed[r];
        if (fed[r] < static_cast<int>(prompt.size())) {
          next[r] = prompt[fed[r]];
          continue;
        }
        const Token t = sample_token(logits.row(static_cast<Eigen::Index>(i)), temperature, rngs[r]);
        auto &emitted = out[begin + r];
        emitted.push_back(t);
        next[r] = t;
        if (is_terminator(t) || static_cast<int>(emitted.size()) >= budget[r]) {
          done[r] = true;
        }
      }
    }
  }
  return out;
}

// Generates one navigation attempt per pair and validates it against `dag`.
// Row i draws from the stream derived from (seed, i).
template <typename S>
std::vector<GenerationResult> generate_paths(const ModelParams<S> &p, const ModelConfig &c,
                                             const Dag &dag, std::span<const NodePair> pairs,
                                             const SampleConfig &sc) {
  const Vocab vocab(dag.node_count());
  std::vector<GenerationRequest> reqs;
  reqs.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    reqs.push_back({pair_prompt(vocab, pairs[i]), derive_seed(sc.seed, Stream::sampling, i)});
  }
  const auto emitted = generate_tokens(p, c, reqs, sc.temperature, sc.max_new_tokens);
  std::vector<GenerationResult> out(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto &g = out[i];
    g.prompt = reqs[i].prompt;
    g.emitted = emitted[i];
    g.check = validate(g.emitted, dag, pairs[i], vocab);
    g.flag = first_flag(g.emitted);
    g.temperature = sc.temperature;
    g.seed = reqs[i].seed;
  }
  return out;
}

template <typename S>
GenerationResult generate(const ModelParams<S> &p, const ModelConfig &c, const Dag &dag,
                          NodePair pair, const SampleConfig &sc) {
  return generate_paths(p, c, dag, std::span<const NodePair>(&pair, 1), sc).front();
}

// Greedy path/no-path readout: the first flag token emitted.
template <typename S>
std::vector<Flag> classify_pairs(const ModelParams<S> &p, const ModelConfig &c, const Vocab &vocab,
                                 std::span<const NodePair> pairs) {
  std::vector<GenerationRequest> reqs;
  for (NodePair pr : pairs) {
    reqs.push_back({pair_prompt(vocab, pr), 0});
  }
  const auto emitted = generate_tokens(p, c, reqs, 0.0);
  std::vector<Flag> out;
  for (const auto &e : emitted) {
    out.push_back(first_flag(e));
  }
  return out;
}

template <typename S>
Flag classify_pair(const ModelParams<S> &p, const ModelConfig &c, const Vocab &vocab,
                   NodePair pair) {
  return classify_pairs(p, c, vocab, std::span<const NodePair>(&pair, 1)).front();
}

// Accuracy over labelled pairs; an absent flag counts as wrong.
inline double flag_accuracy(std::span<const Flag> flags, const std::vector<bool> &labels) {
  if (flags.empty()) {
    return 0.0;
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    const Flag want = labels[i] ? Flag::p1 : Flag::p0;
    correct += flags[i] == want ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(flags.size());
}

// One JSON-lines record per generation.
inline void write_generation_dump(std::ostream &os, const Vocab &vocab,
                                  std::span<const GenerationResult> gens) {
  for (const auto &g : gens) {
    nlohmann::json j;
    j["prompt"] = vocab.decode(g.prompt);
    j["tokens"] = vocab.decode(g.emitted);
    j["verdict"] = to_string(g.check.verdict);
    j["flag"] = to_string(g.flag);
    j["misstep"] = g.check.misstep;
    j["reaches_goal"] = g.check.reaches_goal;
    j["revisit"] = g.check.revisit;
    j["temperature"] = g.temperature;
    j["seed"] = g.seed;
    os << j.dump() << '\n';
  }
}

} // namespace stepnav
