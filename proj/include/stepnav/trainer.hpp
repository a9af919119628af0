#pragma once

// Adam training loop with seeded batch sampling, in-training probes and
// resumable checkpoints.

#include <stepnav/corpus.hpp>
#include <stepnav/error.hpp>
#include <stepnav/model.hpp>
#include <stepnav/rng.hpp>
#include <stepnav/sampler.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

namespace stepnav {

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  int steps = 10000;
  int eval_interval = 100;
  std::uint64_t seed = 0;
  int checkpoint_interval = 0; // 0: only the final checkpoint
  // Draw an episode group (same pair, polarity and chain) first, then one of
  // its sequences. Off: every sequence is equally likely.
  bool pair_balanced = true;

  void validate() const {
    if (!(lr > 0.0) || batch_size < 1 || !(eps > 0.0) || steps < 0 || eval_interval < 1 ||
        checkpoint_interval < 0) {
      throw ConfigError("training settings must be positive");
    }
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw ConfigError("adam betas must lie in (0, 1)");
    }
  }
};

template <typename S> struct AdamState {
  ModelParams<S> m, v;
  long step = 0;

  static AdamState zeros(const ModelParams<S> &p) { return {zeros_like(p), zeros_like(p), 0}; }
};

// Standard Adam with bias correction. Throws NumericError (leaving params and
// state untouched) when any gradient entry is not finite.
template <typename S>
void adam_step(ModelParams<S> &params, const ModelParams<S> &grads, AdamState<S> &state,
               const TrainConfig &cfg) {
  grads.visit([](const std::string &name, const auto &g) {
    if (!g.allFinite()) {
      throw NumericError("non-finite gradient in " + name);
    }
  });
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S step_size = static_cast<S>(cfg.lr / bc1);
  const S inv_bc2 = static_cast<S>(1.0 / bc2);
  const S eps = static_cast<S>(cfg.eps);

  std::vector<S *> gp, mp, vp;
  std::vector<Eigen::Index> sizes;
  grads.visit([&](const std::string &, const auto &t) { gp.push_back(const_cast<S *>(t.data())); });
  state.m.visit([&](const std::string &, auto &t) { mp.push_back(t.data()); });
  state.v.visit([&](const std::string &, auto &t) { vp.push_back(t.data()); });
  std::size_t k = 0;
  params.visit([&](const std::string &, auto &t) {
    const S *g = gp[k];
    S *m = mp[k];
    S *v = vp[k];
    S *x = t.data();
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      m[i] = b1 * m[i] + (S(1) - b1) * g[i];
      v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
      x[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
    ++k;
  });
}

struct MetricRecord {
  int step = 0;
  double loss = 0.0;
  double acc = 0.0;
  double misstep_rate = 0.0;
  double planfail_rate = 0.0;
  double wallclock_ms = 0.0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"loss", loss},
            {"acc", acc},
            {"misstep_rate", misstep_rate},
            {"planfail_rate", planfail_rate},
            {"wallclock_ms", wallclock_ms}};
  }
  std::string to_kv() const {
    std::ostringstream os;
    os.precision(10);
    os << "step=" << step << " loss=" << loss << " acc=" << acc
       << " misstep_rate=" << misstep_rate << " planfail_rate=" << planfail_rate
       << " wallclock_ms=" << wallclock_ms;
    return os.str();
  }
};

// Fixed held-out pairs scored during training. Classification accuracy uses
// every labelled pair; missteps and planning failures use greedy generations
// from the positive pairs.
struct ProbeSet {
  const Dag *dag = nullptr;
  std::vector<NodePair> pairs;
  std::vector<bool> labels;

  bool empty() const { return pairs.empty(); }
};

inline constexpr std::size_t kDefaultProbeSize = 256;

// Half positive, half negative held-out pairs (fewer if the pools are small).
inline ProbeSet make_probe_set(const Dag &dag, const Dataset &ds, std::uint64_t seed,
                               std::size_t size = kDefaultProbeSize) {
  ProbeSet probe;
  probe.dag = &dag;
  Rng rng(seed, Stream::evaluation, 1);
  auto take = [&](std::vector<NodePair> pool, std::size_t want, bool label) {
    rng.shuffle(std::span(pool));
    for (std::size_t i = 0; i < std::min(want, pool.size()); ++i) {
      probe.pairs.push_back(pool[i]);
      probe.labels.push_back(label);
    }
  };
  take(ds.eval_positive, size / 2, true);
  take(ds.eval_negative, size - size / 2, false);
  return probe;
}

struct ProbeScores {
  double acc = 0.0;
  double misstep_rate = 0.0;
  double planfail_rate = 0.0;
};

template <typename S>
ProbeScores score_probe(const ModelParams<S> &p, const ModelConfig &c, const ProbeSet &probe) {
  ProbeScores out;
  if (probe.empty()) {
    return out;
  }
  const Vocab vocab(probe.dag->node_count());
  std::vector<GenerationRequest> reqs;
  for (NodePair pr : probe.pairs) {
    reqs.push_back({pair_prompt(vocab, pr), 0});
  }
  const auto emitted = generate_tokens(p, c, reqs, 0.0);
  std::size_t correct = 0, positives = 0, missteps = 0, planfails = 0;
  for (std::size_t i = 0; i < emitted.size(); ++i) {
    const Flag f = first_flag(emitted[i]);
    correct += (f == (probe.labels[i] ? Flag::p1 : Flag::p0)) ? 1 : 0;
    if (probe.labels[i]) {
      ++positives;
      const PathCheck chk = validate(emitted[i], *probe.dag, probe.pairs[i], vocab);
      missteps += chk.misstep ? 1 : 0;
      planfails += (!chk.terminated || !chk.reaches_goal) ? 1 : 0;
    }
  }
  out.acc = static_cast<double>(correct) / static_cast<double>(emitted.size());
  if (positives > 0) {
    out.misstep_rate = static_cast<double>(missteps) / static_cast<double>(positives);
    out.planfail_rate = static_cast<double>(planfails) / static_cast<double>(positives);
  }
  return out;
}

// Batch b of a run: batch_size indices drawn with replacement from a stream
// keyed by (seed, step), so any step can be regenerated on resume.
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, long step, std::size_t n,
                                              int batch_size) {
  Rng rng(seed, Stream::training, static_cast<std::uint64_t>(step));
  std::vector<std::size_t> idx(batch_size);
  for (auto &i : idx) {
    i = static_cast<std::size_t>(rng.below(n));
  }
  return idx;
}

// Same stream, drawing a group uniformly and then a member uniformly.
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, long step,
                                              const std::vector<std::vector<std::size_t>> &groups,
                                              int batch_size) {
  Rng rng(seed, Stream::training, static_cast<std::uint64_t>(step));
  std::vector<std::size_t> idx(batch_size);
  for (auto &i : idx) {
    const auto &g = groups[rng.below(groups.size())];
    i = g.size() == 1 ? g.front() : g[rng.below(g.size())];
  }
  return idx;
}

// Sequences sharing (pair, polarity, chain id), in order of first appearance.
inline std::vector<std::vector<std::size_t>> episode_groups(const std::vector<Sequence> &data) {
  std::map<std::tuple<Node, Node, bool, int>, std::size_t> slot;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const EpisodeMeta &m = data[i].meta;
    const auto [it, fresh] =
        slot.try_emplace({m.pair.start, m.pair.goal, m.positive, m.chain_id}, groups.size());
    if (fresh) {
      groups.emplace_back();
    }
    groups[it->second].push_back(i);
  }
  return groups;
}

// Packs sequences into a (B x T) buffer, T = longest non-pad length.
inline int pack_batch(const std::vector<Sequence> &data, std::span<const std::size_t> idx,
                      std::vector<Token> &out) {
  int T = 1;
  for (std::size_t i : idx) {
    T = std::max(T, data[i].length);
  }
  out.assign(idx.size() * static_cast<std::size_t>(T), Vocab::pad);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto &s = data[idx[b]];
    std::copy(s.tokens.begin(), s.tokens.begin() + T, out.begin() + b * T);
  }
  return T;
}

struct TrainState {
  ModelConfig model;
  ModelParams<float> params;
  AdamState<float> adam;
};

// Checkpoint with optimizer state: params under "param.", moments under
// "adam_m." / "adam_v.", the step in the header.
inline void save_train_state(const std::filesystem::path &path, const TrainState &st) {
  TensorFile f;
  f.header = st.model.to_text() + "adam_step=" + std::to_string(st.adam.step) + "\n";
  append_tensors(f, "param.", st.params);
  append_tensors(f, "adam_m.", st.adam.m);
  append_tensors(f, "adam_v.", st.adam.v);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) {
      throw DataError("cannot write checkpoint " + tmp);
    }
    write_tensor_file(os, f);
  }
  std::filesystem::rename(tmp, path);
}

inline TrainState load_train_state(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw DataError("cannot open checkpoint " + path.string());
  }
  const TensorFile f = read_tensor_file(is);
  TrainState st;
  st.model = ModelConfig::from_text(f.header);
  st.params = init_params<float>(st.model, 0);
  load_tensors(f, "param.", st.params);
  st.adam = AdamState<float>::zeros(st.params);
  if (f.find("adam_m.wte")) {
    load_tensors(f, "adam_m.", st.adam.m);
    load_tensors(f, "adam_v.", st.adam.v);
  }
  const auto pos = f.header.find("adam_step=");
  if (pos != std::string::npos) {
    st.adam.step = std::stol(f.header.substr(pos + 10));
  }
  return st;
}

struct TrainHooks {
  std::ostream *kv_log = nullptr;
  std::ostream *jsonl_log = nullptr;
  std::optional<std::filesystem::path> checkpoint; // written at intervals and at the end
  std::function<void(const MetricRecord &)> on_record;
};

struct TrainResult {
  TrainState state;
  std::vector<MetricRecord> metrics;
};

// Trains from `start` (fresh or resumed) until cfg.steps updates. A record is
// taken at every multiple of eval_interval and at the final step; its loss is
// measured on that step's batch before the update.
inline TrainResult train(TrainState start, const TrainConfig &cfg,
                         const std::vector<Sequence> &data, const ProbeSet &probe,
                         const TrainHooks &hooks = {}) {
  cfg.validate();
  start.model.validate();
  if (data.empty()) {
    throw InsufficientDataError("training set is empty");
  }
  for (const auto &s : data) {
    if (s.length > start.model.context_len) {
      throw DataError("training sequence longer than the model context");
    }
  }
  TrainResult res{std::move(start), {}};
  auto &st = res.state;
  const ModelConfig &c = st.model;
  auto grads = zeros_like(st.params);
  ForwardTrace<float> tr;
  Matrix<float> dlogits;
  std::vector<Token> buf;
  const auto groups = cfg.pair_balanced ? episode_groups(data) : std::vector<std::vector<std::size_t>>{};
  const auto t0 = std::chrono::steady_clock::now();

  auto step_loss = [&](long step, bool with_grad) {
    const auto idx = cfg.pair_balanced ? batch_indices(cfg.seed, step, groups, cfg.batch_size)
                                       : batch_indices(cfg.seed, step, data.size(), cfg.batch_size);
    const int T = pack_batch(data, idx, buf);
    if (!with_grad) {
      forward(st.params, c, buf, cfg.batch_size, T, tr);
      const auto targets = shifted_targets(buf, cfg.batch_size, T, Vocab::pad);
      return cross_entropy(tr.logits, targets, c.loss_beta, dlogits).loss;
    }
    grads.visit([](const std::string &, auto &t) { t.setZero(); });
    return loss_and_gradients(st.params, c, buf, cfg.batch_size, T, Vocab::pad, grads, tr, dlogits)
        .loss;
  };

  auto record = [&](long step, double loss) {
    MetricRecord r;
    r.step = static_cast<int>(step);
    r.loss = loss;
    const ProbeScores ps = score_probe(st.params, c, probe);
    r.acc = ps.acc;
    r.misstep_rate = ps.misstep_rate;
    r.planfail_rate = ps.planfail_rate;
    r.wallclock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.push_back(r);
    if (hooks.kv_log) {
      *hooks.kv_log << r.to_kv() << '\n';
    }
    if (hooks.jsonl_log) {
      *hooks.jsonl_log << r.to_json().dump() << '\n';
    }
    if (hooks.on_record) {
      hooks.on_record(r);
    }
  };

  for (long step = st.adam.step; step <= cfg.steps; ++step) {
    const bool is_record = step % cfg.eval_interval == 0 || step == cfg.steps;
    if (step == cfg.steps) {
      if (is_record && (res.metrics.empty() || res.metrics.back().step != step)) {
        record(step, step_loss(step, false));
      }
      break;
    }
    const double loss = step_loss(step, true);
    if (!std::isfinite(loss)) {
      throw NumericError("training loss diverged at step " + std::to_string(step));
    }
    if (is_record) {
      record(step, loss);
    }
    adam_step(st.params, grads, st.adam, cfg);
    if (hooks.checkpoint && cfg.checkpoint_interval > 0 &&
        st.adam.step % cfg.checkpoint_interval == 0) {
      save_train_state(*hooks.checkpoint, st);
    }
  }
  if (hooks.checkpoint) {
    save_train_state(*hooks.checkpoint, st);
  }
  return res;
}

inline TrainResult train(const ModelConfig &model, const TrainConfig &cfg,
                         const std::vector<Sequence> &data, const ProbeSet &probe,
                         const TrainHooks &hooks = {}) {
  TrainState st;
  st.model = model;
  st.params = init_params<float>(model, derive_seed(cfg.seed, Stream::init));
  st.adam = AdamState<float>::zeros(st.params);
  return train(std::move(st), cfg, data, probe, hooks);
}

} // namespace stepnav
