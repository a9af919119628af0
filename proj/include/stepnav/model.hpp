#pragma once

// Decoder-only transformer with hand-written reverse mode.
//
// Two variants share one parameter layout:
//   full          nanoGPT-style blocks: x += attn(ln1(x)); x += mlp(ln2(x));
//                 final LayerNorm; tied unembedding.
//   attn_only_1l  x = ln(wte[tok] + wpe[pos]); x = x + softmax(q k^T) v;
//                 logits = x wte^T. No output projection, MLP or final LN.
//
// Activations are row-major (batch * time) x channels. Linear layers store
// weights as (out x in) and compute y = x W^T. No biases anywhere.

#include <stepnav/error.hpp>
#include <stepnav/rng.hpp>
#include <stepnav/types.hpp>

#include <Eigen/Core>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace stepnav {

enum class Variant { full, attn_only_1l };

inline const char *to_string(Variant v) {
  return v == Variant::full ? "full" : "attn_only_1l";
}

inline Variant parse_variant(const std::string &s) {
  if (s == "full") {
    return Variant::full;
  }
  if (s == "attn_only_1l") {
    return Variant::attn_only_1l;
  }
  throw ConfigError("unknown model variant '" + s + "'");
}

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_embd = 64;
  int context_len = 32;
  int vocab_size = 0;
  Variant variant = Variant::full;
  bool tie_weights = true;
  double loss_beta = 1.0;
  double ln_epsilon = 1e-5;
  bool attn_scale = true;

  int head_dim() const { return d_embd / n_heads; }
  bool attention_only() const { return variant == Variant::attn_only_1l; }

  void validate() const {
    if (vocab_size < 1 || d_embd < 1 || context_len < 1 || n_layers < 1 || n_heads < 1) {
      throw ConfigError("model sizes must be positive");
    }
    if (d_embd % n_heads != 0) {
      throw ConfigError("d_embd must be divisible by n_heads");
    }
    if (attention_only() && (n_layers != 1 || n_heads != 1)) {
      throw ConfigError("attn_only_1l requires n_layers=1 and n_heads=1");
    }
    if (!(loss_beta > 0.0)) {
      throw ConfigError("loss_beta must be positive");
    }
  }

  // Canonical variant settings: attn_only_1l pins one layer and one head.
  ModelConfig normalized() const {
    ModelConfig c = *this;
    if (c.attention_only()) {
      c.n_layers = 1;
      c.n_heads = 1;
    }
    return c;
  }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "n_layers=" << n_layers << '\n'
       << "n_heads=" << n_heads << '\n'
       << "d_embd=" << d_embd << '\n'
       << "context_len=" << context_len << '\n'
       << "vocab_size=" << vocab_size << '\n'
       << "variant=" << to_string(variant) << '\n'
       << "tie_weights=" << (tie_weights ? 1 : 0) << '\n'
       << "loss_beta=" << loss_beta << '\n'
       << "ln_epsilon=" << ln_epsilon << '\n'
       << "attn_scale=" << (attn_scale ? 1 : 0) << '\n';
    return os.str();
  }

  static ModelConfig from_text(const std::string &text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        continue;
      }
      const std::string k = line.substr(0, eq);
      const std::string v = line.substr(eq + 1);
      if (k == "n_layers") c.n_layers = std::stoi(v);
      else if (k == "n_heads") c.n_heads = std::stoi(v);
      else if (k == "d_embd") c.d_embd = std::stoi(v);
      else if (k == "context_len") c.context_len = std::stoi(v);
      else if (k == "vocab_size") c.vocab_size = std::stoi(v);
      else if (k == "variant") c.variant = parse_variant(v);
      else if (k == "tie_weights") c.tie_weights = v == "1";
      else if (k == "loss_beta") c.loss_beta = std::stod(v);
      else if (k == "ln_epsilon") c.ln_epsilon = std::stod(v);
      else if (k == "attn_scale") c.attn_scale = v == "1";
    }
    return c;
  }

  friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S> using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;

template <typename S> struct BlockParams {
  RowVector<S> ln1_g, ln1_b;
  Matrix<S> wq, wk, wv, wo;
  RowVector<S> ln2_g, ln2_b;
  Matrix<S> w1, w2;
};

template <typename S> struct ModelParams {
  Matrix<S> wte;     // vocab x d
  Matrix<S> wpe;     // context x d
  Matrix<S> unembed; // vocab x d, only when untied
  std::vector<BlockParams<S>> blocks;
  RowVector<S> lnf_g, lnf_b;

  // Calls fn(name, tensor) for every tensor in a fixed order. Empty tensors
  // (unused by the variant) are skipped.
  template <typename Self, typename F> static void visit_impl(Self &self, F &&fn) {
    auto call = [&](const std::string &name, auto &t) {
      if (t.size() > 0) {
        fn(name, t);
      }
    };
    call("wte", self.wte);
    call("wpe", self.wpe);
    call("unembed", self.unembed);
    for (std::size_t l = 0; l < self.blocks.size(); ++l) {
      auto &b = self.blocks[l];
      const std::string p = "h" + std::to_string(l) + ".";
      call(p + "ln1_g", b.ln1_g);
      call(p + "ln1_b", b.ln1_b);
      call(p + "wq", b.wq);
      call(p + "wk", b.wk);
      call(p + "wv", b.wv);
      call(p + "wo", b.wo);
      call(p + "ln2_g", b.ln2_g);
      call(p + "ln2_b", b.ln2_b);
      call(p + "w1", b.w1);
      call(p + "w2", b.w2);
    }
    call("lnf_g", self.lnf_g);
    call("lnf_b", self.lnf_b);
  }
  template <typename F> void visit(F &&fn) { visit_impl(*this, std::forward<F>(fn)); }
  template <typename F> void visit(F &&fn) const { visit_impl(*this, std::forward<F>(fn)); }

  // Unembedding matrix (aliases wte when weights are tied).
  const Matrix<S> &output_embedding() const { return unembed.size() > 0 ? unembed : wte; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string &, const auto &t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  template <typename T> ModelParams<T> cast() const {
    ModelParams<T> out;
    out.wte = wte.template cast<T>();
    out.wpe = wpe.template cast<T>();
    out.unembed = unembed.template cast<T>();
    for (const auto &b : blocks) {
      BlockParams<T> c;
      c.ln1_g = b.ln1_g.template cast<T>();
      c.ln1_b = b.ln1_b.template cast<T>();
      c.wq = b.wq.template cast<T>();
      c.wk = b.wk.template cast<T>();
      c.wv = b.wv.template cast<T>();
      c.wo = b.wo.template cast<T>();
      c.ln2_g = b.ln2_g.template cast<T>();
      c.ln2_b = b.ln2_b.template cast<T>();
      c.w1 = b.w1.template cast<T>();
      c.w2 = b.w2.template cast<T>();
      out.blocks.push_back(std::move(c));
    }
    out.lnf_g = lnf_g.template cast<T>();
    out.lnf_b = lnf_b.template cast<T>();
    return out;
  }

  friend bool operator==(const ModelParams &a, const ModelParams &b) {
    auto flatten = [](const ModelParams &p) {
      std::vector<std::pair<std::string, std::vector<S>>> out;
      p.visit([&](const std::string &name, const auto &t) {
        out.emplace_back(name, std::vector<S>(t.data(), t.data() + t.size()));
      });
      return out;
    };
    return flatten(a) == flatten(b);
  }
};

// Closed-form parameter count for a configuration.
inline std::size_t expected_parameter_count(const ModelConfig &c) {
  const std::size_t d = c.d_embd, V = c.vocab_size, C = c.context_len;
  std::size_t n = V * d + C * d + (c.tie_weights ? 0 : V * d);
  if (c.attention_only()) {
    return n + 2 * d + 3 * d * d;
  }
  n += c.n_layers * (2 * d + 4 * d * d + 2 * d + 8 * d * d);
  return n + 2 * d;
}

template <typename S> ModelParams<S> zeros_like(const ModelParams<S> &p) {
  ModelParams<S> z = p;
  z.visit([](const std::string &, auto &t) { t.setZero(); });
  return z;
}

template <typename S = float>
ModelParams<S> init_params(const ModelConfig &config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed, Stream::init);
  const int d = config.d_embd;
  auto normal = [&](int rows, int cols) {
    Matrix<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<S>(rng.normal(0.0, 0.02));
    }
    return m;
  };
  auto ones = [&] { return RowVector<S>::Ones(d); };
  auto zeros = [&] { return RowVector<S>::Zero(d); };

  ModelParams<S> p;
  p.wte = normal(config.vocab_size, d);
  p.wpe = normal(config.context_len, d);
  if (!config.tie_weights) {
    p.unembed = normal(config.vocab_size, d);
  }
  for (int l = 0; l < config.n_layers; ++l) {
    BlockParams<S> b;
    b.ln1_g = ones();
    b.ln1_b = zeros();
    b.wq = normal(d, d);
    b.wk = normal(d, d);
    b.wv = normal(d, d);
    if (!config.attention_only()) {
      b.wo = normal(d, d);
      b.ln2_g = ones();
      b.ln2_b = zeros();
      b.w1 = normal(4 * d, d);
      b.w2 = normal(d, 4 * d);
    }
    p.blocks.push_back(std::move(b));
  }
  if (!config.attention_only()) {
    p.lnf_g = ones();
    p.lnf_b = zeros();
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward with cached activations

namespace detail {

template <typename S> struct LayerNormCache {
  Matrix<S> xhat;
  Eigen::Matrix<S, Eigen::Dynamic, 1> rstd;
};

template <typename S>
void layernorm_forward(const Matrix<S> &x, const RowVector<S> &g, const RowVector<S> &b,
                       double eps, Matrix<S> &out, LayerNormCache<S> &cache) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  cache.xhat.resize(rows, d);
  cache.rstd.resize(rows);
  out.resize(rows, d);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const S mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean);
    const S var = centered.square().mean();
    const S rstd = S(1) / std::sqrt(var + static_cast<S>(eps));
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = centered * rstd;
    out.row(r) = cache.xhat.row(r).cwiseProduct(g) + b;
  }
}

// Accumulates into dx; adds parameter gradients into dg/db.
template <typename S>
void layernorm_backward(const Matrix<S> &dout, const LayerNormCache<S> &cache,
                        const RowVector<S> &g, Matrix<S> &dx, RowVector<S> &dg,
                        RowVector<S> &db) {
  const Eigen::Index rows = dout.rows();
  const S inv_d = S(1) / static_cast<S>(dout.cols());
  dg += (dout.cwiseProduct(cache.xhat)).colwise().sum();
  db += dout.colwise().sum();
  for (Eigen::Index r = 0; r < rows; ++r) {
    const RowVector<S> dxhat = dout.row(r).cwiseProduct(g);
    const S mean_dxhat = dxhat.sum() * inv_d;
    const S mean_dxhat_xhat = dxhat.dot(cache.xhat.row(r)) * inv_d;
    dx.row(r).array() += cache.rstd(r) * (dxhat.array() - mean_dxhat -
                                          cache.xhat.row(r).array() * mean_dxhat_xhat);
  }
}

template <typename S> S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * static_cast<S>(std::numbers::sqrt2 / 2)));
}

template <typename S> S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x * static_cast<S>(std::numbers::sqrt2 / 2)));
  const S pdf = std::exp(S(-0.5) * x * x) * static_cast<S>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

} // namespace detail

template <typename S> struct BlockCache {
  Matrix<S> x_in;
  detail::LayerNormCache<S> ln1;
  Matrix<S> a;    // ln1 output
  Matrix<S> q, k, v;
  Matrix<S> att;  // (B*H*T) x T attention probabilities
  Matrix<S> y;    // attention output before projection
  Matrix<S> x_mid;
  detail::LayerNormCache<S> ln2;
  Matrix<S> a2;
  Matrix<S> h;    // MLP pre-activation
  Matrix<S> gh;   // gelu(h)
};

template <typename S> struct ForwardTrace {
  int batch = 0;
  int time = 0;
  std::vector<Token> tokens;
  std::vector<BlockCache<S>> blocks;
  Matrix<S> x_out;
  detail::LayerNormCache<S> lnf;
  Matrix<S> final_act; // input to the unembedding
  Matrix<S> logits;    // (B*T) x V

  // Attention weights for layer l, head h, sequence b: a T x T block.
  auto attention(int layer, int head, int b, int n_heads) const {
    return blocks[layer].att.block(
        (static_cast<Eigen::Index>(b) * n_heads + head) * time, 0, time, time);
  }
};

template <typename S>
void forward(const ModelParams<S> &p, const ModelConfig &c, std::span<const Token> tokens,
             int batch, int time, ForwardTrace<S> &tr) {
  if (time > c.context_len || time < 1) {
    throw DataError("sequence length " + std::to_string(time) +
                    " exceeds context length " + std::to_string(c.context_len));
  }
  if (tokens.size() != static_cast<std::size_t>(batch) * time) {
    throw DataError("token buffer does not match batch shape");
  }
  const int d = c.d_embd, H = c.n_heads, dh = c.head_dim();
  const Eigen::Index BT = static_cast<Eigen::Index>(batch) * time;
  const S scale = c.attn_scale ? S(1) / std::sqrt(static_cast<S>(dh)) : S(1);
  tr.batch = batch;
  tr.time = time;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.blocks.resize(c.n_layers);

  Matrix<S> x(BT, d);
  for (Eigen::Index r = 0; r < BT; ++r) {
    const Token t = tokens[r];
    if (t < 0 || t >= c.vocab_size) {
      throw DataError("token id " + std::to_string(t) + " outside vocabulary");
    }
    x.row(r) = p.wte.row(t) + p.wpe.row(r % time);
  }

  for (int l = 0; l < c.n_layers; ++l) {
    const auto &bp = p.blocks[l];
    auto &bc = tr.blocks[l];
    bc.x_in = x;
    detail::layernorm_forward(bc.x_in, bp.ln1_g, bp.ln1_b, c.ln_epsilon, bc.a, bc.ln1);
    bc.q.noalias() = bc.a * bp.wq.transpose();
    bc.k.noalias() = bc.a * bp.wk.transpose();
    bc.v.noalias() = bc.a * bp.wv.transpose();
    bc.att.setZero(static_cast<Eigen::Index>(batch) * H * time, time);
    bc.y.setZero(BT, d);
    Matrix<S> scores(time, time);
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto Q = bc.q.block(b * time, h * dh, time, dh);
        const auto K = bc.k.block(b * time, h * dh, time, dh);
        const auto V = bc.v.block(b * time, h * dh, time, dh);
        scores.noalias() = Q * K.transpose();
        auto P = bc.att.block((static_cast<Eigen::Index>(b) * H + h) * time, 0, time, time);
        for (int i = 0; i < time; ++i) {
          S mx = -std::numeric_limits<S>::infinity();
          for (int j = 0; j <= i; ++j) {
            mx = std::max(mx, scores(i, j) * scale);
          }
          S sum = 0;
          for (int j = 0; j <= i; ++j) {
            const S e = std::exp(scores(i, j) * scale - mx);
            P(i, j) = e;
            sum += e;
          }
          const S inv = S(1) / sum;
          for (int j = 0; j <= i; ++j) {
            P(i, j) *= inv;
          }
        }
        bc.y.block(b * time, h * dh, time, dh).noalias() = P * V;
      }
    }
    if (c.attention_only()) {
      bc.x_mid = bc.a + bc.y;
      x = bc.x_mid;
      continue;
    }
    bc.x_mid = bc.x_in;
    bc.x_mid.noalias() += bc.y * bp.wo.transpose();
    detail::layernorm_forward(bc.x_mid, bp.ln2_g, bp.ln2_b, c.ln_epsilon, bc.a2, bc.ln2);
    bc.h.noalias() = bc.a2 * bp.w1.transpose();
    bc.gh = bc.h.unaryExpr([](S v) { return detail::gelu(v); });
    x = bc.x_mid;
    x.noalias() += bc.gh * bp.w2.transpose();
  }
  tr.x_out = std::move(x);
  if (c.attention_only()) {
    tr.final_act = tr.x_out;
  } else {
    detail::layernorm_forward(tr.x_out, p.lnf_g, p.lnf_b, c.ln_epsilon, tr.final_act, tr.lnf);
  }
  tr.logits.noalias() = tr.final_act * p.output_embedding().transpose();
}

template <typename S>
ForwardTrace<S> forward(const ModelParams<S> &p, const ModelConfig &c,
                        std::span<const Token> tokens) {
  ForwardTrace<S> tr;
  forward(p, c, tokens, 1, static_cast<int>(tokens.size()), tr);
  return tr;
}

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
  double loss = 0.0;
  std::size_t counted = 0;
};

// Mean over unmasked rows of -log softmax(beta * logits)[target]; writes
// dL/dlogits into dlogits. Rows with target < 0 are masked.
template <typename S>
LossResult cross_entropy(const Matrix<S> &logits, std::span<const int> targets, double beta,
                         Matrix<S> &dlogits) {
  const Eigen::Index rows = logits.rows(), V = logits.cols();
  dlogits.setZero(rows, V);
  std::size_t counted = 0;
  for (int t : targets) {
    counted += t >= 0 ? 1 : 0;
  }
  if (counted == 0) {
    throw DataError("loss undefined: every target position is padding");
  }
  const S b = static_cast<S>(beta);
  const S inv_n = S(1) / static_cast<S>(counted);
  double total = 0.0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0) {
      continue;
    }
    const auto z = (logits.row(r).array() * b).eval();
    const S mx = z.maxCoeff();
    const auto e = (z - mx).exp().eval();
    const S sum = e.sum();
    const S logsum = std::log(sum) + mx;
    total += static_cast<double>(logsum - z(t));
    dlogits.row(r) = (e / sum) * (b * inv_n);
    dlogits(r, t) -= b * inv_n;
  }
  return {total / static_cast<double>(counted), counted};
}

// Next-token targets for a padded batch: target[b,t] = tokens[b,t+1], masked
// (-1) when that token is padding or past the end.
inline std::vector<int> shifted_targets(std::span<const Token> tokens, int batch, int time,
                                        Token pad_token) {
  std::vector<int> targets(static_cast<std::size_t>(batch) * time, -1);
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t + 1 < time; ++t) {
      const Token next = tokens[static_cast<std::size_t>(b) * time + t + 1];
      if (next != pad_token) {
        targets[static_cast<std::size_t>(b) * time + t] = next;
      }
    }
  }
  return targets;
}

// ---------------------------------------------------------------------------
// Backward

template <typename S>
void backward(const ModelParams<S> &p, const ModelConfig &c, const ForwardTrace<S> &tr,
              const Matrix<S> &dlogits, ModelParams<S> &grads) {
  const int d = c.d_embd, H = c.n_heads, dh = c.head_dim();
  const int batch = tr.batch, time = tr.time;
  const Eigen::Index BT = static_cast<Eigen::Index>(batch) * time;
  const S scale = c.attn_scale ? S(1) / std::sqrt(static_cast<S>(dh)) : S(1);

  Matrix<S> &dunembed = grads.unembed.size() > 0 ? grads.unembed : grads.wte;
  dunembed.noalias() += dlogits.transpose() * tr.final_act;
  Matrix<S> dx(BT, d);
  dx.noalias() = dlogits * p.output_embedding();
  if (!c.attention_only()) {
    Matrix<S> dfinal = std::move(dx);
    dx.setZero(BT, d);
    detail::layernorm_backward(dfinal, tr.lnf, p.lnf_g, dx, grads.lnf_g, grads.lnf_b);
  }

  Matrix<S> dy, dq, dk, dv, da, dtmp, dscores(time, time), dP(time, time);
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto &bp = p.blocks[l];
    const auto &bc = tr.blocks[l];
    auto &bg = grads.blocks[l];

    // dx holds dL/d(block output).
    if (c.attention_only()) {
      // out = a + y
      dy = dx;
      da = dx;
    } else {
      // out = x_mid + gelu(ln2(x_mid) w1^T) w2^T
      bg.w2.noalias() += dx.transpose() * bc.gh;
      Matrix<S> dgh(BT, 4 * d);
      dgh.noalias() = dx * bp.w2;
      Matrix<S> dh = dgh.cwiseProduct(bc.h.unaryExpr([](S v) { return detail::gelu_grad(v); }));
      bg.w1.noalias() += dh.transpose() * bc.a2;
      Matrix<S> da2(BT, d);
      da2.noalias() = dh * bp.w1;
      Matrix<S> dxmid = dx;
      detail::layernorm_backward(da2, bc.ln2, bp.ln2_g, dxmid, bg.ln2_g, bg.ln2_b);
      // x_mid = x_in + y wo^T
      bg.wo.noalias() += dxmid.transpose() * bc.y;
      dy.noalias() = dxmid * bp.wo;
      dx = std::move(dxmid); // residual path into x_in
      da.setZero(BT, d);
    }

    dq.setZero(BT, d);
    dk.setZero(BT, d);
    dv.setZero(BT, d);
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto Q = bc.q.block(b * time, h * dh, time, dh);
        const auto K = bc.k.block(b * time, h * dh, time, dh);
        const auto V = bc.v.block(b * time, h * dh, time, dh);
        const auto P = bc.att.block((static_cast<Eigen::Index>(b) * H + h) * time, 0, time, time);
        const auto dY = dy.block(b * time, h * dh, time, dh);
        dP.noalias() = dY * V.transpose();
        dv.block(b * time, h * dh, time, dh).noalias() += P.transpose() * dY;
        for (int i = 0; i < time; ++i) {
          S dot = 0;
          for (int j = 0; j <= i; ++j) {
            dot += dP(i, j) * P(i, j);
          }
          for (int j = 0; j < time; ++j) {
            dscores(i, j) = j <= i ? P(i, j) * (dP(i, j) - dot) * scale : S(0);
          }
        }
        dq.block(b * time, h * dh, time, dh).noalias() += dscores * K;
        dk.block(b * time, h * dh, time, dh).noalias() += dscores.transpose() * Q;
      }
    }
    bg.wq.noalias() += dq.transpose() * bc.a;
    bg.wk.noalias() += dk.transpose() * bc.a;
    bg.wv.noalias() += dv.transpose() * bc.a;
    da.noalias() += dq * bp.wq;
    da.noalias() += dk * bp.wk;
    da.noalias() += dv * bp.wv;
    if (c.attention_only()) {
      dx.setZero(BT, d);
    }
    detail::layernorm_backward(da, bc.ln1, bp.ln1_g, dx, bg.ln1_g, bg.ln1_b);
  }

  for (Eigen::Index r = 0; r < BT; ++r) {
    grads.wte.row(tr.tokens[r]) += dx.row(r);
    grads.wpe.row(r % time) += dx.row(r);
  }
}

// One forward/backward pass over a padded batch; gradients accumulate into
// `grads`. Returns the mean loss over unmasked targets.
template <typename S>
LossResult loss_and_gradients(const ModelParams<S> &p, const ModelConfig &c,
                              std::span<const Token> tokens, int batch, int time,
                              Token pad_token, ModelParams<S> &grads, ForwardTrace<S> &tr,
                              Matrix<S> &dlogits) {
  forward(p, c, tokens, batch, time, tr);
  const auto targets = shifted_targets(tokens, batch, time, pad_token);
  const LossResult lr = cross_entropy(tr.logits, targets, c.loss_beta, dlogits);
  backward(p, c, tr, dlogits, grads);
  return lr;
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   "STEPNAV\0" | u32 version | u32 len, config text | u32 tensor count |
//   per tensor: u32 name len, name, u32 rank, u64 dims[rank], f64 data
// All integers and floats little-endian.

inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'E', 'P', 'N', 'A', 'V', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T> void put_le(std::ostream &os, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U u = std::bit_cast<U>(value);
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
  }
  os.write(bytes, sizeof(U));
}

template <typename T> T get_le(std::istream &is) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char *>(bytes), sizeof(U))) {
    throw DataError("truncated checkpoint");
  }
  U u = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    u |= static_cast<U>(bytes[i]) << (8 * i);
  }
  return std::bit_cast<T>(u);
}

} // namespace detail

// A named collection of row-major tensors plus an ascii header.
struct TensorFile {
  struct Tensor {
    std::vector<std::uint64_t> dims;
    std::vector<double> data;
  };
  std::string header;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor *find(const std::string &name) const {
    for (const auto &[n, t] : tensors) {
      if (n == name) {
        return &t;
      }
    }
    return nullptr;
  }
};

inline void write_tensor_file(std::ostream &os, const TensorFile &f) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(f.header.size()));
  os.write(f.header.data(), static_cast<std::streamsize>(f.header.size()));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(f.tensors.size()));
  for (const auto &[name, t] : f.tensors) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.dims.size()));
    for (auto dim : t.dims) {
      detail::put_le<std::uint64_t>(os, dim);
    }
    for (double v : t.data) {
      detail::put_le<double>(os, v);
    }
  }
}

inline TensorFile read_tensor_file(std::istream &is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw DataError("not a checkpoint file (bad magic)");
  }
  if (detail::get_le<std::uint32_t>(is) != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version");
  }
  TensorFile f;
  const auto hlen = detail::get_le<std::uint32_t>(is);
  f.header.resize(hlen);
  if (!is.read(f.header.data(), hlen)) {
    throw DataError("truncated checkpoint header");
  }
  const auto count = detail::get_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = detail::get_le<std::uint32_t>(is);
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) {
      throw DataError("truncated tensor name");
    }
    TensorFile::Tensor t;
    const auto rank = detail::get_le<std::uint32_t>(is);
    std::uint64_t total = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(detail::get_le<std::uint64_t>(is));
      total *= t.dims.back();
    }
    t.data.resize(total);
    for (auto &v : t.data) {
      v = detail::get_le<double>(is);
    }
    f.tensors.emplace_back(std::move(name), std::move(t));
  }
  return f;
}

template <typename S>
void append_tensors(TensorFile &f, const std::string &prefix, const ModelParams<S> &p) {
  p.visit([&](const std::string &name, const auto &t) {
    TensorFile::Tensor out;
    out.dims = {static_cast<std::uint64_t>(t.rows()), static_cast<std::uint64_t>(t.cols())};
    out.data.assign(t.data(), t.data() + t.size());
    f.tensors.emplace_back(prefix + name, std::move(out));
  });
}

// Fills every tensor of `p` (already shaped) from the file.
template <typename S>
void load_tensors(const TensorFile &f, const std::string &prefix, ModelParams<S> &p) {
  p.visit([&](const std::string &name, auto &t) {
    const auto *src = f.find(prefix + name);
    if (!src || src->dims.size() != 2 ||
        src->dims[0] != static_cast<std::uint64_t>(t.rows()) ||
        src->dims[1] != static_cast<std::uint64_t>(t.cols())) {
      throw DataError("checkpoint tensor '" + prefix + name + "' missing or misshapen");
    }
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      t.data()[i] = static_cast<S>(src->data[i]);
    }
  });
}

struct Checkpoint {
  ModelConfig config;
  ModelParams<float> params;
};

template <typename S>
void save_model(std::ostream &os, const ModelConfig &c, const ModelParams<S> &p) {
  TensorFile f;
  f.header = c.to_text();
  append_tensors(f, "", p);
  write_tensor_file(os, f);
}

template <typename S = float> std::pair<ModelConfig, ModelParams<S>> load_model(std::istream &is) {
  const TensorFile f = read_tensor_file(is);
  ModelConfig c = ModelConfig::from_text(f.header);
  ModelParams<S> p = init_params<S>(c, 0);
  load_tensors(f, "", p);
  return {c, std::move(p)};
}

} // namespace stepnav
