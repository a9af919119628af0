#pragma once

// Experiment registry. Each experiment resolves trained models through a
// ModelStore (so models are shared between experiments run in one process),
// takes its measurements, and returns a Report.

#include <stepnav/config.hpp>
#include <stepnav/corpus.hpp>
#include <stepnav/graphs.hpp>
#include <stepnav/mechinterp.hpp>
#include <stepnav/model.hpp>
#include <stepnav/report.hpp>
#include <stepnav/sampler.hpp>
#include <stepnav/trainer.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace stepnav {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Trained models

struct GraphRun {
  std::string key;
  Config config;
  Dag dag{1, DagKind::bernoulli, {}};
  Dataset ds;
  ProbeSet probe;
  ModelConfig model;
  TrainResult result;
  std::uint64_t dataset_hash = 0;
  double train_ms = 0.0;
};

struct MotifRun {
  std::string key;
  Config config;
  MotifSet set;
  MotifOrderSplit split;
  Dataset ds;
  ModelConfig model;
  TrainResult result;
  std::uint64_t dataset_hash = 0;
  double train_ms = 0.0;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// Resolved `key=value` lines of the sections a model depends on.
inline std::string section_text(const Config &cfg, std::initializer_list<const char *> prefixes) {
  std::istringstream is(cfg.to_text());
  std::ostringstream os;
  std::string line;
  while (std::getline(is, line)) {
    for (const char *p : prefixes) {
      if (line.rfind(p, 0) == 0) {
        os << line << '\n';
        break;
      }
    }
  }
  return os.str();
}

inline std::string dataset_text(const Dataset &ds) {
  std::ostringstream os;
  write_sequences(os, ds);
  return os.str();
}

inline std::string graph_run_key(const Config &cfg) {
  return hex64(Config::fnv1a(section_text(cfg, {"graph.", "dataset.", "model.", "training."})));
}

inline std::string motif_run_key(const Config &cfg) {
  return hex64(Config::fnv1a(section_text(cfg, {"motif.", "dataset.seed", "model.", "training."})));
}

// Random chain of K distinct motifs whose consecutive unordered pairs all
// satisfy `allowed`.
template <typename Allowed>
std::vector<int> sample_motif_order(int motif_count, int k, Rng &rng, Allowed &&allowed) {
  for (int attempt = 0; attempt < kExemplarResampleCap; ++attempt) {
    std::vector<int> order{static_cast<int>(rng.below(static_cast<std::uint64_t>(motif_count)))};
    while (static_cast<int>(order.size()) < k) {
      std::vector<int> options;
      for (int m = 0; m < motif_count; ++m) {
        if (std::find(order.begin(), order.end(), m) == order.end() && allowed(order.back(), m)) {
          options.push_back(m);
        }
      }
      if (options.empty()) {
        break;
      }
      order.push_back(options[rng.below(options.size())]);
    }
    if (static_cast<int>(order.size()) == k) {
      return order;
    }
  }
  throw DataError("no motif order of length " + std::to_string(k) + " within resample cap");
}

// Caches trained models by the hash of the config sections they depend on.
// With an artifact directory, each model also gets models/<key>/ holding its
// config, graph, training data, metrics and checkpoint; a completed directory
// is reloaded instead of retrained.
class ModelStore {
public:
  explicit ModelStore(std::optional<fs::path> dir = std::nullopt, std::ostream *log = nullptr)
      : dir_(std::move(dir)), log_(log) {}

  std::ostream *log() const { return log_; }
  std::size_t trainings() const { return trainings_; }

  // Graph, dataset and probe without training (throws if nothing to evaluate).
  static void prepare(GraphRun &run, const Config &cfg) {
    run.dag = cfg.make_graph();
    const DatasetSpec spec = cfg.dataset_spec();
    run.ds = build_dataset(spec, run.dag);
    if (spec.corruption_rate > 0.0) {
      run.ds = corrupt(std::move(run.ds), spec.corruption_rate,
                       derive_seed(spec.seed, Stream::corruption));
    }
    if (run.ds.train.empty()) {
      throw InsufficientDataError("no training episodes");
    }
    if (run.ds.eval_positive.empty()) {
      throw InsufficientDataError("no held-out connected pairs");
    }
    run.probe = make_probe_set(run.dag, run.ds,
                               derive_seed(cfg.integer("training.seed"), Stream::evaluation),
                               static_cast<std::size_t>(cfg.integer("training.probe_size")));
    run.model = cfg.model_config(run.ds.vocab.size(), run.ds.context_len);
    run.dataset_hash = Config::fnv1a(dataset_text(run.ds));
  }

  const GraphRun &graph_run(const Config &cfg) {
    const std::string key = graph_run_key(cfg);
    if (auto it = graphs_.find(key); it != graphs_.end()) {
      return *it->second;
    }
    auto run = std::make_unique<GraphRun>();
    run->key = key;
    run->config = cfg;
    prepare(*run, cfg);
    const TrainConfig tc = cfg.train_config();
    fit(run->key, run->ds, run->model, tc, run->probe, run->result, run->train_ms, [&](const fs::path &d) {
      std::ofstream(d / "graph.txt") << [&] {
        std::ostringstream os;
        write_graph(os, run->dag);
        return os.str();
      }();
      std::ofstream ep(d / "eval_pairs.txt");
      write_eval_pairs(ep, run->ds);
    });
    if (log_) {
      *log_ << "  model " << key << " graph=" << cfg.text("graph.kind")
            << " mode=" << cfg.text("dataset.mode") << " variant=" << cfg.text("model.variant")
            << " seed=" << cfg.text("training.seed") << " final_acc=" << final_acc(run->result)
            << '\n';
    }
    return *graphs_.emplace(key, std::move(run)).first->second;
  }

  const MotifRun &motif_run(const Config &cfg) {
    const std::string key = motif_run_key(cfg);
    if (auto it = motifs_.find(key); it != motifs_.end()) {
      return *it->second;
    }
    auto run = std::make_unique<MotifRun>();
    run->key = key;
    run->config = cfg;
    run->set = build_motif_set(cfg.i("motif.count"), cfg.i("motif.nodes"), cfg.real("motif.p"),
                               static_cast<std::uint64_t>(cfg.integer("motif.seed")));
    run->split = split_motif_orders(cfg.i("motif.count"), cfg.real("motif.train_order_fraction"),
                                    static_cast<std::uint64_t>(cfg.integer("motif.seed")));
    const int kmin = cfg.i("motif.chain_min");
    const int kmax = cfg.i("motif.chain_max");
    if (kmin < 2 || kmax < kmin || kmax > run->set.count()) {
      throw ConfigError("motif chain lengths must satisfy 2 <= chain_min <= chain_max <= count");
    }
    const int ctx = cfg.i("motif.context_len");
    run->ds.mode = Mode::stepwise;
    run->ds.vocab = Vocab(run->set.total_nodes());
    run->ds.context_len = ctx;
    Rng rng(static_cast<std::uint64_t>(cfg.integer("dataset.seed")), Stream::motifs, 1);
    const auto episodes = cfg.integer("motif.train_episodes");
    for (long long e = 0; e < episodes; ++e) {
      const int k = kmin + static_cast<int>(rng.below(static_cast<std::uint64_t>(kmax - kmin + 1)));
      const auto order = sample_motif_order(run->set.count(), k, rng,
                                            [&](int a, int b) { return run->split.is_train(a, b); });
      const MotifChain chain = build_chain(run->set, order, rng);
      auto ep = build_context_episode(run->set, chain, rng, run->ds.vocab, ctx);
      ep.sequence.meta.chain_id = static_cast<int>(e);
      run->ds.train.push_back(std::move(ep.sequence));
    }
    run->model = cfg.model_config(run->ds.vocab.size(), ctx);
    run->dataset_hash = Config::fnv1a(dataset_text(run->ds));
    const ProbeSet none;
    fit(key, run->ds, run->model, cfg.train_config(), none, run->result, run->train_ms,
        [](const fs::path &) {});
    if (log_) {
      *log_ << "  motif model " << key << " seed=" << cfg.text("training.seed")
            << " final_loss=" << (run->result.metrics.empty() ? 0.0 : run->result.metrics.back().loss)
            << '\n';
    }
    return *motifs_.emplace(key, std::move(run)).first->second;
  }

private:
  static double final_acc(const TrainResult &r) {
    return r.metrics.empty() ? 0.0 : r.metrics.back().acc;
  }

  template <typename Extra>
  void fit(const std::string &key, const Dataset &ds, const ModelConfig &model,
           const TrainConfig &tc, const ProbeSet &probe, TrainResult &out, double &ms,
           Extra &&write_extra) {
    const auto t0 = std::chrono::steady_clock::now();
    std::optional<fs::path> d;
    if (dir_) {
      d = *dir_ / "models" / key;
      if (fs::exists(*d / "done") && reload(*d, model, out)) {
        ms = 0.0;
        return;
      }
      fs::create_directories(*d);
      std::ofstream(*d / "model_config.txt") << model.to_text();
      std::ofstream(*d / "train.txt") << dataset_text(ds);
      write_extra(*d);
    }
    ++trainings_;
    std::ofstream jsonl;
    TrainHooks hooks;
    if (d) {
      jsonl.open(*d / "metrics.jsonl");
      hooks.jsonl_log = &jsonl;
      hooks.checkpoint = *d / "model.ckpt";
    }
    out = train(model, tc, ds.train, probe, hooks);
    ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (d) {
      jsonl.close();
      std::ofstream(*d / "done") << "ok\n";
    }
  }

  static bool reload(const fs::path &d, const ModelConfig &model, TrainResult &out) {
    try {
      out.state = load_train_state(d / "model.ckpt");
      if (!(out.state.model == model)) {
        return false;
      }
      out.metrics.clear();
      std::ifstream is(d / "metrics.jsonl");
      std::string line;
      while (std::getline(is, line)) {
        const auto j = nlohmann::json::parse(line);
        MetricRecord r;
        r.step = j.at("step").get<int>();
        r.loss = j.at("loss").get<double>();
        r.acc = j.at("acc").get<double>();
        r.misstep_rate = j.at("misstep_rate").get<double>();
        r.planfail_rate = j.at("planfail_rate").get<double>();
        r.wallclock_ms = j.at("wallclock_ms").get<double>();
        out.metrics.push_back(r);
      }
      return true;
    } catch (const std::exception &) {
      return false;
    }
  }

  std::optional<fs::path> dir_;
  std::ostream *log_;
  std::size_t trainings_ = 0;
  std::map<std::string, std::unique_ptr<GraphRun>> graphs_;
  std::map<std::string, std::unique_ptr<MotifRun>> motifs_;
};

// ---------------------------------------------------------------------------
// Shared measurements

inline Config seeded(Config c, int seed) {
  const std::string s = std::to_string(seed);
  c.set("dataset.seed", s);
  c.set("training.seed", s);
  c.set("sampling.seed", s);
  return c;
}

inline Config with(Config c, std::initializer_list<std::pair<const char *, std::string>> kv) {
  for (const auto &[k, v] : kv) {
    c.set(k, v);
  }
  return c;
}

inline std::string num_key(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline double mean_of(const std::vector<double> &v) {
  if (v.empty()) {
    return std::nan("");
  }
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

struct PairAccuracy {
  double accuracy = 0.0;
  double positive = 0.0;
  double negative = 0.0;
  std::size_t pairs = 0;
};

// Greedy path/no-path accuracy on a balanced held-out set.
inline ProbeSet eval_set(const GraphRun &run, std::size_t size) {
  return make_probe_set(run.dag, run.ds,
                        derive_seed(run.config.integer("training.seed"), Stream::evaluation, 2),
                        size);
}

inline PairAccuracy balanced_accuracy(const GraphRun &run, std::size_t size) {
  const ProbeSet ev = eval_set(run, size);
  const auto flags =
      classify_pairs(run.result.state.params, run.model, run.ds.vocab, std::span(ev.pairs));
  PairAccuracy out;
  out.pairs = ev.pairs.size();
  std::size_t pos = 0, neg = 0, pos_ok = 0, neg_ok = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (ev.labels[i]) {
      ++pos;
      pos_ok += flags[i] == Flag::p1 ? 1 : 0;
    } else {
      ++neg;
      neg_ok += flags[i] == Flag::p0 ? 1 : 0;
    }
  }
  out.accuracy = flags.empty() ? 0.0 : static_cast<double>(pos_ok + neg_ok) / flags.size();
  out.positive = pos ? static_cast<double>(pos_ok) / pos : std::nan("");
  out.negative = neg ? static_cast<double>(neg_ok) / neg : std::nan("");
  return out;
}

// Held-out connected pairs in a seeded order, at most `count`.
inline std::vector<NodePair> heldout_positives(const GraphRun &run, std::size_t count,
                                               std::uint64_t index) {
  std::vector<NodePair> pool = run.ds.eval_positive;
  Rng rng(static_cast<std::uint64_t>(run.config.integer("training.seed")), Stream::evaluation,
          index);
  rng.shuffle(std::span(pool));
  pool.resize(std::min(count, pool.size()));
  return pool;
}

inline double valid_path_rate(const GraphRun &run, std::span<const NodePair> pairs) {
  if (pairs.empty()) {
    return std::nan("");
  }
  const auto gens =
      generate_paths(run.result.state.params, run.model, run.dag, pairs, SampleConfig{});
  std::size_t ok = 0;
  for (const auto &g : gens) {
    ok += g.check.verdict == Verdict::valid_path ? 1 : 0;
  }
  return static_cast<double>(ok) / static_cast<double>(gens.size());
}

// Node path of a stepwise positive training sequence.
inline std::optional<Path> training_path(const Sequence &s, const Vocab &vocab) {
  if (!s.meta.positive || s.meta.mode != Mode::stepwise || s.length < 5) {
    return std::nullopt;
  }
  Path p{{s.meta.pair.start}};
  for (int i = 3; i < s.length; ++i) {
    const Token t = s.tokens[i];
    if (!vocab.is_node(t)) {
      break;
    }
    p.nodes.push_back(vocab.node_of(t));
  }
  return p;
}

inline std::set<std::vector<Node>> training_subpaths(const Dataset &ds) {
  std::set<std::vector<Node>> out;
  for (const auto &s : ds.train) {
    const auto p = training_path(s, ds.vocab);
    if (!p) {
      continue;
    }
    const auto &n = p->nodes;
    for (std::size_t i = 0; i < n.size(); ++i) {
      for (std::size_t j = i + 2; j <= n.size(); ++j) {
        out.insert(std::vector<Node>(n.begin() + i, n.begin() + j));
      }
    }
  }
  return out;
}

// Fewest contiguous pieces, each a sub-path of some training path, that
// cover `p`. Extending greedily is optimal because the set is closed under
// taking sub-paths.
inline int stitch_segments(const Path &p, const std::set<std::vector<Node>> &subpaths) {
  const auto &n = p.nodes;
  int segments = 0;
  std::size_t i = 0;
  while (i + 1 < n.size()) {
    std::size_t j = i + 1;
    while (j + 1 < n.size() &&
           subpaths.contains(std::vector<Node>(n.begin() + i, n.begin() + j + 2))) {
      ++j;
    }
    ++segments;
    i = j;
  }
  return segments;
}

// Exact mean edge count over all simple paths start -> goal.
inline double mean_path_length(const Dag &dag, NodePair pair) {
  const PathsToGoal counts(dag, pair.goal);
  if (counts.count[pair.start] == 0) {
    return std::nan("");
  }
  return counts.length_sum[pair.start] / static_cast<double>(counts.count[pair.start]);
}

inline Report start_report(const std::string &name, const Config &cfg) {
  Report r;
  r.name = name;
  r.config = cfg.to_json();
  for (int s : cfg.ints("experiment.seeds")) {
    r.seeds.push_back(s);
  }
  if (r.seeds.empty()) {
    throw ConfigError("experiment.seeds is empty");
  }
  r.provenance["models"] = nlohmann::json::array();
  r.provenance["timing"] = nlohmann::json::object();
  return r;
}

inline void note_model(Report &r, const GraphRun &run) {
  r.provenance["models"].push_back({{"key", run.key},
                                    {"dataset_hash", hex64(run.dataset_hash)},
                                    {"train_sequences", run.ds.train.size()},
                                    {"graph", run.config.text("graph.kind")},
                                    {"mode", run.config.text("dataset.mode")},
                                    {"seed", run.config.integer("training.seed")}});
  r.provenance["timing"][run.key] = run.train_ms;
}

inline void note_model(Report &r, const MotifRun &run) {
  r.provenance["models"].push_back({{"key", run.key},
                                    {"dataset_hash", hex64(run.dataset_hash)},
                                    {"train_sequences", run.ds.train.size()},
                                    {"seed", run.config.integer("training.seed")}});
  r.provenance["timing"][run.key] = run.train_ms;
}

inline const nlohmann::json kModeCodes = {{"0", "stepwise"}, {"1", "direct"}};

inline double mode_code(Mode m) { return m == Mode::stepwise ? 0.0 : 1.0; }

// One stepwise/direct comparison: trains both modes per seed on `base`.
struct GapCell {
  std::vector<double> stepwise;
  std::vector<double> direct;
  double gap() const { return mean_of(stepwise) - mean_of(direct); }
};

inline GapCell run_gap_cell(Report &r, Table &rows, const std::vector<double> &prefix,
                            const Config &base, ModelStore &store, Table *curves = nullptr) {
  GapCell cell;
  const auto n_eval = static_cast<std::size_t>(base.integer("experiment.eval_pairs"));
  for (Mode m : {Mode::stepwise, Mode::direct}) {
    for (long long seed : r.seeds) {
      const Config c = with(seeded(base, static_cast<int>(seed)), {{"dataset.mode", to_string(m)}});
      const GraphRun &run = store.graph_run(c);
      note_model(r, run);
      const PairAccuracy a = balanced_accuracy(run, n_eval);
      (m == Mode::stepwise ? cell.stepwise : cell.direct).push_back(a.accuracy);
      std::vector<double> row = prefix;
      row.insert(row.end(), {mode_code(m), static_cast<double>(seed), a.accuracy, a.positive,
                             a.negative, static_cast<double>(run.ds.train.size())});
      rows.add(row);
      if (curves) {
        for (const auto &rec : run.result.metrics) {
          std::vector<double> cr = prefix;
          cr.insert(cr.end(), {mode_code(m), static_cast<double>(seed), static_cast<double>(rec.step),
                               rec.loss, rec.acc});
          curves->add(cr);
        }
      }
    }
  }
  return cell;
}

// ---------------------------------------------------------------------------
// Experiments

inline Report stepwise_gap(const Config &cfg, ModelStore &store) {
  Report r = start_report("stepwise_gap", cfg);
  r.table.columns = {"graph", "mode", "seed", "accuracy", "acc_positive", "acc_negative",
                     "train_sequences"};
  Table curves{{"graph", "mode", "seed", "step", "loss", "probe_acc"}, {}};
  r.codes["graph"] = {{"0", "bernoulli"}, {"1", "hierarchical"}};
  r.codes["mode"] = kModeCodes;
  for (const auto &kind : cfg.words("experiment.graph_kinds")) {
    const DagKind k = parse_dag_kind(kind);
    const double code = k == DagKind::bernoulli ? 0.0 : 1.0;
    const GapCell cell =
        run_gap_cell(r, r.table, {code}, with(cfg, {{"graph.kind", kind}}), store, &curves);
    r.summary[kind + ".stepwise"] = mean_of(cell.stepwise);
    r.summary[kind + ".direct"] = mean_of(cell.direct);
    r.summary[kind + ".gap"] = cell.gap();
  }
  r.tables["curves"] = std::move(curves);
  return r;
}

inline Report delta_sweep(const Config &cfg, ModelStore &store) {
  Report r = start_report("delta_sweep", cfg);
  r.table.columns = {"delta", "mode", "seed", "accuracy", "acc_positive", "acc_negative",
                     "train_sequences"};
  r.codes["mode"] = kModeCodes;
  Table stitch{{"delta", "seed", "valid_paths", "mean_segments", "multi_segment_fraction"}, {}};
  Table gaps{{"delta", "stepwise", "direct", "gap"}, {}};
  const auto n_eval = static_cast<std::size_t>(cfg.integer("experiment.eval_pairs"));
  std::vector<int> feasible;
  std::map<int, double> gap_of;
  for (int delta : cfg.ints("experiment.deltas")) {
    const Config base =
        with(cfg, {{"graph.kind", "hierarchical"}, {"dataset.delta", std::to_string(delta)}});
    try {
      GraphRun probe_only;
      ModelStore::prepare(probe_only, seeded(base, static_cast<int>(r.seeds.front())));
    } catch (const InsufficientDataError &) {
      if (store.log()) {
        *store.log() << "  delta=" << delta << " infeasible, skipped\n";
      }
      continue;
    }
    feasible.push_back(delta);
    const GapCell cell = run_gap_cell(r, r.table, {static_cast<double>(delta)}, base, store);
    gap_of[delta] = cell.gap();
    gaps.add({static_cast<double>(delta), mean_of(cell.stepwise), mean_of(cell.direct), cell.gap()});
    r.summary["delta." + std::to_string(delta) + ".gap"] = cell.gap();
    for (long long seed : r.seeds) {
      const GraphRun &run = store.graph_run(
          with(seeded(base, static_cast<int>(seed)), {{"dataset.mode", "stepwise"}}));
      const auto subpaths = training_subpaths(run.ds);
      const ProbeSet ev = eval_set(run, n_eval);
      std::vector<NodePair> pos;
      for (std::size_t i = 0; i < ev.pairs.size(); ++i) {
        if (ev.labels[i]) {
          pos.push_back(ev.pairs[i]);
        }
      }
      const auto gens = generate_paths(run.result.state.params, run.model, run.dag,
                                       std::span<const NodePair>(pos), SampleConfig{});
      std::vector<double> segs;
      for (const auto &g : gens) {
        if (g.check.verdict == Verdict::valid_path) {
          segs.push_back(stitch_segments(g.check.path, subpaths));
        }
      }
      const double multi =
          segs.empty() ? std::nan("")
                       : static_cast<double>(std::count_if(segs.begin(), segs.end(),
                                                           [](double s) { return s > 1; })) /
                             segs.size();
      stitch.add({static_cast<double>(delta), static_cast<double>(seed),
                  static_cast<double>(segs.size()), mean_of(segs), multi});
    }
  }
  if (feasible.empty()) {
    throw InsufficientDataError("no feasible delta in the sweep");
  }
  r.summary["smallest_delta"] = feasible.front();
  r.summary["largest_delta"] = feasible.back();
  r.summary["gap_smallest"] = gap_of[feasible.front()];
  r.summary["gap_largest"] = gap_of[feasible.back()];
  r.tables["gaps"] = std::move(gaps);
  r.tables["stitching"] = std::move(stitch);
  return r;
}

// Stepwise model of the first seed; the pair is the held-out connected pair
// with the most simple paths among those the model solves greedily.
inline Report temperature_sweep(const Config &cfg, ModelStore &store) {
  Report r = start_report("temperature_sweep", cfg);
  r.seeds.resize(1);
  const GraphRun &run = store.graph_run(
      with(seeded(cfg, static_cast<int>(r.seeds.front())), {{"dataset.mode", "stepwise"}}));
  note_model(r, run);
  const auto &pool = run.ds.eval_positive;
  const auto gens = generate_paths(run.result.state.params, run.model, run.dag,
                                   std::span<const NodePair>(pool), SampleConfig{});
  std::optional<NodePair> chosen;
  std::uint64_t best = 0;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (gens[i].check.verdict != Verdict::valid_path) {
      continue;
    }
    const std::uint64_t n = count_simple_paths(run.dag, pool[i]);
    if (!chosen || n > best || (n == best && pool[i] < *chosen)) {
      chosen = pool[i];
      best = n;
    }
  }
  if (!chosen) {
    throw InsufficientDataError("the model solves no held-out pair");
  }
  const NodePair pair = *chosen;
  r.summary["start"] = pair.start;
  r.summary["goal"] = pair.goal;
  r.summary["ground_truth_paths"] = static_cast<double>(best);
  r.table.columns = {"temperature", "accuracy", "diversity", "unique_valid",
                     "ground_truth_diversity"};
  const int samples = cfg.i("experiment.samples");
  const Vocab &vocab = run.ds.vocab;
  const auto base_seed = static_cast<std::uint64_t>(cfg.integer("sampling.seed"));
  std::vector<double> temps = cfg.reals("experiment.temperatures");
  for (std::size_t ti = 0; ti < temps.size(); ++ti) {
    std::vector<GenerationRequest> reqs(samples);
    for (int i = 0; i < samples; ++i) {
      reqs[i] = {pair_prompt(vocab, pair), derive_seed(base_seed, Stream::sampling,
                                                       ti * 1000003ull + static_cast<std::uint64_t>(i))};
    }
    const auto emitted = generate_tokens(run.result.state.params, run.model,
                                         std::span<const GenerationRequest>(reqs), temps[ti],
                                         cfg.i("sampling.max_new_tokens"));
    std::set<std::vector<Node>> unique, unique_valid;
    std::size_t valid = 0;
    for (const auto &e : emitted) {
      const PathCheck chk = validate(e, run.dag, pair, vocab);
      unique.insert(chk.path.nodes);
      if (chk.verdict == Verdict::valid_path) {
        ++valid;
        unique_valid.insert(chk.path.nodes);
      }
    }
    r.table.add({temps[ti], static_cast<double>(valid) / samples,
                 static_cast<double>(unique.size()), static_cast<double>(unique_valid.size()),
                 static_cast<double>(best)});
  }
  return r;
}

inline Report short_path_bias(const Config &cfg, ModelStore &store) {
  Report r = start_report("short_path_bias", cfg);
  r.table.columns = {"seed", "start", "goal", "ground_truth_length", "generated_length",
                     "valid_fraction"};
  Table per_seed{{"seed", "pairs", "ground_truth_mean", "generated_mean"}, {}};
  const auto n_pairs = static_cast<std::size_t>(cfg.integer("experiment.eval_pairs"));
  const int k = cfg.i("experiment.low_temperature_samples");
  const double temp = cfg.real("experiment.low_temperature");
  int shorter = 0;
  for (long long seed : r.seeds) {
    const GraphRun &run =
        store.graph_run(with(seeded(cfg, static_cast<int>(seed)), {{"dataset.mode", "stepwise"}}));
    note_model(r, run);
    const auto pairs = heldout_positives(run, n_pairs, 3);
    std::vector<GenerationRequest> reqs;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      for (int j = 0; j < k; ++j) {
        reqs.push_back({pair_prompt(run.ds.vocab, pairs[i]),
                        derive_seed(static_cast<std::uint64_t>(seed), Stream::sampling,
                                    i * static_cast<std::uint64_t>(k) + j)});
      }
    }
    const auto emitted = generate_tokens(run.result.state.params, run.model,
                                         std::span<const GenerationRequest>(reqs), temp);
    std::vector<double> gt_all, gen_all;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      std::vector<double> lens;
      for (int j = 0; j < k; ++j) {
        const PathCheck chk = validate(emitted[i * k + j], run.dag, pairs[i], run.ds.vocab);
        if (chk.verdict == Verdict::valid_path) {
          lens.push_back(static_cast<double>(chk.path.edge_count()));
        }
      }
      const double gt = mean_path_length(run.dag, pairs[i]);
      const double gen = mean_of(lens);
      r.table.add({static_cast<double>(seed), static_cast<double>(pairs[i].start),
                   static_cast<double>(pairs[i].goal), gt, gen,
                   static_cast<double>(lens.size()) / k});
      if (!lens.empty()) {
        gt_all.push_back(gt);
        gen_all.push_back(gen);
      }
    }
    per_seed.add({static_cast<double>(seed), static_cast<double>(gt_all.size()), mean_of(gt_all),
                  mean_of(gen_all)});
    r.summary["seed." + std::to_string(seed) + ".pairs"] = gt_all.size();
    r.summary["seed." + std::to_string(seed) + ".ground_truth_mean"] = mean_of(gt_all);
    r.summary["seed." + std::to_string(seed) + ".generated_mean"] = mean_of(gen_all);
    shorter += mean_of(gen_all) < mean_of(gt_all) ? 1 : 0;
  }
  r.summary["seeds_shorter"] = shorter;
  r.tables["per_seed"] = std::move(per_seed);
  return r;
}

inline Report failure_dynamics(const Config &cfg, ModelStore &store) {
  Report r = start_report("failure_dynamics", cfg);
  r.table.columns = {"seed", "step", "misstep_rate", "planfail_rate", "loss", "probe_acc"};
  Table crossings{{"seed", "misstep_step", "planfail_step"}, {}};
  int ordered = 0;
  for (long long seed : r.seeds) {
    const GraphRun &run =
        store.graph_run(with(seeded(cfg, static_cast<int>(seed)), {{"dataset.mode", "stepwise"}}));
    note_model(r, run);
    double miss = std::numeric_limits<double>::infinity();
    double plan = std::numeric_limits<double>::infinity();
    for (const auto &m : run.result.metrics) {
      r.table.add({static_cast<double>(seed), static_cast<double>(m.step), m.misstep_rate,
                   m.planfail_rate, m.loss, m.acc});
      if (m.misstep_rate < 0.1 && std::isinf(miss)) {
        miss = m.step;
      }
      if (m.planfail_rate < 0.1 && std::isinf(plan)) {
        plan = m.step;
      }
    }
    crossings.add({static_cast<double>(seed), miss, plan});
    ordered += (std::isfinite(miss) && miss < plan) ? 1 : 0;
  }
  r.summary["seeds_ordered"] = ordered;
  r.tables["crossings"] = std::move(crossings);
  return r;
}

// The mechanistic runs: one attention-only layer on stepwise data, with the
// optional mechinterp.* training overrides.
inline Config attention_only(const Config &cfg) {
  Config c = with(cfg, {{"model.variant", "attn_only_1l"},
                        {"model.n_layers", "1"},
                        {"model.n_heads", "1"},
                        {"dataset.mode", "stepwise"}});
  if (c.real("mechinterp.lr") < 0.0 || c.integer("mechinterp.steps") < 0) {
    throw ConfigError("mechinterp overrides must be non-negative");
  }
  if (c.real("mechinterp.lr") > 0.0) {
    c.set("training.lr", c.text("mechinterp.lr"));
  }
  if (c.integer("mechinterp.steps") > 0) {
    c.set("training.steps", c.text("mechinterp.steps"));
  }
  return c;
}

// Full model vs the two-token value rule, with path similarity, on the
// attention-only model; also one attention map for the first pair.
inline Report simplified_algorithm(const Config &cfg, ModelStore &store) {
  Report r = start_report("simplified_algorithm", cfg);
  r.table.columns = {"seed", "full_accuracy", "simplified_accuracy", "identical_fraction",
                     "mean_edit_distance"};
  Table dist{{"seed", "edit_distance", "count"}, {}};
  Table attn{{"step", "position", "weight", "role"}, {}};
  r.codes["role"] = {{"0", "other"}, {"1", "goal"}, {"2", "current"}, {"3", "goal_and_current"}};
  const auto n_eval = static_cast<std::size_t>(cfg.integer("experiment.eval_pairs"));
  const auto n_sim = static_cast<std::size_t>(cfg.integer("experiment.similarity_pairs"));
  std::vector<double> full, simp, ident;
  for (long long seed : r.seeds) {
    const GraphRun &run = store.graph_run(attention_only(seeded(cfg, static_cast<int>(seed))));
    note_model(r, run);
    const auto &p = run.result.state.params;
    const SimplifiedPredictor pred(p, run.model, run.dag.node_count());
    const auto acc_pairs = heldout_positives(run, n_eval, 4);
    const auto sim_pairs = heldout_positives(run, n_sim, 5);
    const PathSimilarity acc = path_similarity(p, run.model, pred, run.dag, std::span(acc_pairs));
    const PathSimilarity sim = path_similarity(p, run.model, pred, run.dag, std::span(sim_pairs));
    double ed = 0.0;
    for (const auto &row : sim.rows) {
      ed += static_cast<double>(row.edit_distance);
    }
    ed = sim.rows.empty() ? std::nan("") : ed / sim.rows.size();
    r.table.add({static_cast<double>(seed), acc.full_accuracy, acc.simplified_accuracy,
                 sim.identical_fraction, ed});
    full.push_back(acc.full_accuracy);
    simp.push_back(acc.simplified_accuracy);
    ident.push_back(sim.identical_fraction);
    const auto hist = sim.distribution();
    for (std::size_t d = 0; d < hist.size(); ++d) {
      dist.add({static_cast<double>(seed), static_cast<double>(d), static_cast<double>(hist[d])});
    }
    if (seed == r.seeds.front() && !acc_pairs.empty()) {
      const NodePair pr = acc_pairs.front();
      const auto g = generate(p, run.model, run.dag, pr, SampleConfig{});
      std::vector<Token> tokens = g.prompt;
      for (Token t : g.emitted) {
        if (static_cast<int>(tokens.size()) >= run.model.context_len) {
          break;
        }
        tokens.push_back(t);
      }
      const auto maps = attention_maps(p, run.model, std::span<const Token>(tokens), 3);
      for (std::size_t s = 0; s < maps.size(); ++s) {
        for (std::size_t pos = 0; pos < maps[s].weights.size(); ++pos) {
          const int ip = static_cast<int>(pos);
          const int role = (ip == maps[s].goal_position ? 1 : 0) + (ip == maps[s].current_position ? 2 : 0);
          attn.add({static_cast<double>(s), static_cast<double>(pos), maps[s].weights[pos],
                    static_cast<double>(role)});
        }
      }
      r.summary["attention_start"] = pr.start;
      r.summary["attention_goal"] = pr.goal;
    }
  }
  r.summary["full_accuracy"] = mean_of(full);
  r.summary["simplified_accuracy"] = mean_of(simp);
  r.summary["identical_fraction"] = mean_of(ident);
  r.tables["edit_distance"] = std::move(dist);
  r.tables["attention"] = std::move(attn);
  return r;
}

inline Report distance_regression_report(const Config &cfg, ModelStore &store) {
  Report r = start_report("distance_regression", cfg);
  r.table.columns = {"seed", "goal", "node", "distance", "inner_product"};
  Table fits{{"seed", "slope", "intercept", "pearson", "points"}, {}};
  const auto n_pairs = static_cast<std::size_t>(cfg.integer("experiment.regression_pairs"));
  std::vector<double> slopes, rs;
  for (long long seed : r.seeds) {
    const GraphRun &run = store.graph_run(attention_only(seeded(cfg, static_cast<int>(seed))));
    note_model(r, run);
    const SimplifiedPredictor pred(run.result.state.params, run.model, run.dag.node_count());
    const auto pairs = heldout_positives(run, n_pairs, 6);
    const DistanceRegression reg = distance_regression(pred, run.dag, std::span(pairs));
    for (const auto &pt : reg.points) {
      r.table.add({static_cast<double>(seed), static_cast<double>(pt.goal),
                   static_cast<double>(pt.candidate), pt.distance, pt.inner_product});
    }
    fits.add({static_cast<double>(seed), reg.fit.slope, reg.fit.intercept, reg.fit.pearson,
              static_cast<double>(reg.fit.points)});
    slopes.push_back(reg.fit.slope);
    rs.push_back(reg.fit.pearson);
  }
  r.summary["slope"] = mean_of(slopes);
  r.summary["pearson"] = mean_of(rs);
  r.tables["fits"] = std::move(fits);
  return r;
}

// Greedy continuation of a motif-chain prompt. Success: the path terminates
// with `end` at the goal and crosses every ghost edge as adjacent nodes.
struct SteeringOutcome {
  bool reaches_goal = false;
  bool ghosts_present = false;
  std::vector<Node> nodes;  // start followed by emitted nodes
  bool success() const { return reaches_goal && ghosts_present; }
};

inline std::vector<SteeringOutcome>
steer(const MotifRun &run, const std::vector<ContextEpisode> &eps,
      const std::vector<std::vector<GhostEdge>> &required) {
  std::vector<GenerationRequest> reqs;
  for (const auto &ep : eps) {
    const auto content = ep.sequence.content();
    const int pl = ep.sequence.meta.prompt_length;
    if (pl > run.model.context_len) {
      throw DataError("motif prompt exceeds the model context");
    }
    reqs.push_back({std::vector<Token>(content.begin(), content.begin() + pl), 0});
  }
  const auto emitted = generate_tokens(run.result.state.params, run.model,
                                       std::span<const GenerationRequest>(reqs), 0.0);
  std::vector<SteeringOutcome> out;
  const Vocab &vocab = run.ds.vocab;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    SteeringOutcome o;
    o.nodes.push_back(eps[i].pair.start);
    bool ended = false;
    for (Token t : emitted[i]) {
      if (t == Vocab::end) {
        ended = true;
        break;
      }
      if (!vocab.is_node(t)) {
        break;
      }
      o.nodes.push_back(vocab.node_of(t));
    }
    o.reaches_goal = ended && o.nodes.size() > 1 && o.nodes.back() == eps[i].pair.goal;
    o.ghosts_present = true;
    for (const GhostEdge &g : required[i]) {
      bool found = false;
      for (std::size_t k = 0; k + 1 < o.nodes.size() && !found; ++k) {
        found = o.nodes[k] == g.from_node && o.nodes[k + 1] == g.to_node;
      }
      o.ghosts_present = o.ghosts_present && found;
    }
    out.push_back(std::move(o));
  }
  return out;
}

// Episodes are built without a length limit; only the prompt must fit.
inline constexpr int kUnboundedContext = 1 << 20;

inline Report motif_generalization(const Config &cfg, ModelStore &store) {
  Report r = start_report("motif_generalization", cfg);
  r.table.columns = {"seed", "n", "held_out", "trials", "success", "reaches_goal",
                     "ghosts_present"};
  const int trials = cfg.i("experiment.motif_trials");
  const int max_train_n = cfg.i("motif.chain_max") - 2;
  r.summary["max_train_n"] = max_train_n;
  std::map<std::pair<int, bool>, std::vector<double>> success;
  for (long long seed : r.seeds) {
    const MotifRun &run = store.motif_run(seeded(cfg, static_cast<int>(seed)));
    note_model(r, run);
    for (int n : cfg.ints("experiment.n_intermediate")) {
      const int k = n + 2;
      if (k > run.set.count()) {
        throw ConfigError("chain of " + std::to_string(k) + " motifs exceeds the motif count");
      }
      for (bool held_out : {true, false}) {
        Rng rng(static_cast<std::uint64_t>(seed), Stream::evaluation,
                0x4d00 + static_cast<std::uint64_t>(n) * 2 + (held_out ? 1 : 0));
        std::vector<ContextEpisode> eps;
        std::vector<std::vector<GhostEdge>> req;
        for (int t = 0; t < trials; ++t) {
          std::vector<int> order;
          for (int attempt = 0;; ++attempt) {
            if (attempt >= kExemplarResampleCap) {
              throw DataError("no motif order matching the split");
            }
            order = sample_motif_order(run.set.count(), k, rng, [](int, int) { return true; });
            bool any_test = false;
            for (std::size_t j = 0; j + 1 < order.size(); ++j) {
              any_test = any_test || !run.split.is_train(order[j], order[j + 1]);
            }
            if (any_test == held_out) {
              break;
            }
          }
          const MotifChain chain = build_chain(run.set, order, rng);
          eps.push_back(build_context_episode(run.set, chain, rng, run.ds.vocab, kUnboundedContext));
          req.push_back(chain.ghost_edges);
        }
        const auto outcomes = steer(run, eps, req);
        double ok = 0, goal = 0, ghosts = 0;
        for (const auto &o : outcomes) {
          ok += o.success();
          goal += o.reaches_goal;
          ghosts += o.ghosts_present;
        }
        const double nt = static_cast<double>(outcomes.size());
        r.table.add({static_cast<double>(seed), static_cast<double>(n), held_out ? 1.0 : 0.0, nt,
                     ok / nt, goal / nt, ghosts / nt});
        success[{n, held_out}].push_back(ok / nt);
      }
    }
  }
  for (const auto &[key, v] : success) {
    r.summary[std::string(key.second ? "held_out" : "train_order") + ".n" +
              std::to_string(key.first)] = mean_of(v);
  }
  return r;
}

inline Report conflict_primacy(const Config &cfg, ModelStore &store) {
  Report r = start_report("conflict_primacy", cfg);
  r.table.columns = {"seed", "swapped", "trials", "first_chain", "second_chain", "neither",
                     "reaches_goal"};
  const int trials = cfg.i("experiment.conflict_trials");
  double first_total = 0, second_total = 0, count = 0;
  for (long long seed : r.seeds) {
    const MotifRun &run = store.motif_run(seeded(cfg, static_cast<int>(seed)));
    note_model(r, run);
    if (run.set.count() < 4) {
      throw ConfigError("conflict trials need at least 4 motifs");
    }
    for (bool swapped : {false, true}) {
      Rng rng(static_cast<std::uint64_t>(seed), Stream::evaluation, 0xC0F1);
      std::vector<ContextEpisode> eps;
      std::vector<std::vector<GhostEdge>> none;
      std::vector<std::pair<int, int>> inter;  // intermediates of the first / second chain in context
      for (int t = 0; t < trials; ++t) {
        const auto m = sample_motif_order(run.set.count(), 4, rng, [](int, int) { return true; });
        const MotifChain a = build_chain(run.set, {m[0], m[1], m[3]}, rng);
        const MotifChain b = build_chain(run.set, {m[0], m[2], m[3]}, rng);
        const MotifChain &first = swapped ? b : a;
        const MotifChain &second = swapped ? a : b;
        const std::vector<GhostEdge> edges{first.ghost_edges[0], first.ghost_edges[1],
                                           second.ghost_edges[0], second.ghost_edges[1]};
        eps.push_back(build_context_episode(run.set, first, edges, rng, run.ds.vocab,
                                            kUnboundedContext));
        none.emplace_back();
        inter.emplace_back(first.order[1], second.order[1]);
      }
      const auto outcomes = steer(run, eps, none);
      double f = 0, s = 0, neither = 0, goal = 0;
      for (std::size_t i = 0; i < outcomes.size(); ++i) {
        bool via_first = false, via_second = false;
        for (Node x : outcomes[i].nodes) {
          via_first = via_first || run.set.motif_of(x) == inter[i].first;
          via_second = via_second || run.set.motif_of(x) == inter[i].second;
        }
        f += via_first && !via_second;
        s += via_second && !via_first;
        neither += via_first == via_second;
        goal += outcomes[i].reaches_goal;
      }
      const double nt = static_cast<double>(outcomes.size());
      r.table.add({static_cast<double>(seed), swapped ? 1.0 : 0.0, nt, f / nt, s / nt,
                   neither / nt, goal / nt});
      first_total += f;
      second_total += s;
      count += nt;
    }
  }
  r.summary["trials"] = count;
  r.summary["first_fraction"] = first_total / count;
  r.summary["second_fraction"] = second_total / count;
  r.summary["primacy"] = (first_total - second_total) / count;
  return r;
}

inline Report robustness_sweeps(const Config &cfg, ModelStore &store) {
  Report r = start_report("robustness_sweeps", cfg);
  r.table.columns = {"sweep", "value", "mode", "seed", "accuracy", "acc_positive", "acc_negative",
                     "train_sequences"};
  r.codes["sweep"] = {{"0", "corruption"}, {"1", "density"}};
  r.codes["mode"] = kModeCodes;
  Table gaps{{"sweep", "value", "stepwise", "direct", "gap"}, {}};
  Table embed{{"d_embd", "seed", "path_accuracy"}, {}};
  const Config hier = with(cfg, {{"graph.kind", "hierarchical"}});
  const auto parts = cfg.words("experiment.sweeps");
  auto wants = [&](const char *p) { return std::find(parts.begin(), parts.end(), p) != parts.end(); };
  if (wants("corruption")) {
    for (double rate : cfg.reals("experiment.corruption_rates")) {
      const GapCell cell = run_gap_cell(r, r.table, {0.0, rate},
                                        with(hier, {{"dataset.corruption_rate", num_key(rate)}}), store);
      gaps.add({0.0, rate, mean_of(cell.stepwise), mean_of(cell.direct), cell.gap()});
      r.summary["corruption." + num_key(rate) + ".gap"] = cell.gap();
    }
  }
  if (wants("density")) {
    for (double p : cfg.reals("experiment.densities")) {
      const GapCell cell =
          run_gap_cell(r, r.table, {1.0, p}, with(hier, {{"graph.p", num_key(p)}}), store);
      gaps.add({1.0, p, mean_of(cell.stepwise), mean_of(cell.direct), cell.gap()});
      r.summary["density." + num_key(p) + ".gap"] = cell.gap();
    }
  }
  if (wants("embedding")) {
    const auto n_eval = static_cast<std::size_t>(cfg.integer("experiment.eval_pairs"));
    for (int d : cfg.ints("experiment.dims")) {
      std::vector<double> accs;
      for (long long seed : r.seeds) {
        const GraphRun &run = store.graph_run(
            with(attention_only(seeded(cfg, static_cast<int>(seed))), {{"model.d_embd", std::to_string(d)}}));
        note_model(r, run);
        const auto pairs = heldout_positives(run, n_eval, 7);
        const double a = valid_path_rate(run, std::span<const NodePair>(pairs));
        embed.add({static_cast<double>(d), static_cast<double>(seed), a});
        accs.push_back(a);
      }
      r.summary["embedding." + std::to_string(d) + ".accuracy"] = mean_of(accs);
    }
  }
  r.tables["gaps"] = std::move(gaps);
  r.tables["embedding"] = std::move(embed);
  return r;
}

// ---------------------------------------------------------------------------
// Registry

using ExperimentFn = std::function<Report(const Config &, ModelStore &)>;

struct ExperimentInfo {
  std::string name;
  std::string description;
  ExperimentFn run;
};

inline const std::vector<ExperimentInfo> &experiments() {
  static const std::vector<ExperimentInfo> list = {
      {"stepwise_gap", "stepwise vs direct held-out accuracy on each graph kind", stepwise_gap},
      {"delta_sweep", "gap vs layer-gap threshold, with stitching segment counts", delta_sweep},
      {"temperature_sweep", "accuracy and path diversity vs sampling temperature",
       temperature_sweep},
      {"short_path_bias", "generated vs ground-truth path length on held-out pairs",
       short_path_bias},
      {"failure_dynamics", "misstep and planning-failure rates over training", failure_dynamics},
      {"simplified_algorithm", "attention-only model vs the two-token value rule",
       simplified_algorithm},
      {"distance_regression", "value-readout inner product vs graph distance",
       distance_regression_report},
      {"motif_generalization", "steering success vs number of intermediate motifs",
       motif_generalization},
      {"conflict_primacy", "routing choice when two chains conflict in context", conflict_primacy},
      {"robustness_sweeps", "gap under corruption and density; embedding-size sweep",
       robustness_sweeps},
  };
  return list;
}

inline const ExperimentInfo &find_experiment(const std::string &name) {
  for (const auto &e : experiments()) {
    if (e.name == name) {
      return e;
    }
  }
  throw ConfigError("unknown experiment '" + name + "'");
}

inline Report run_experiment(const std::string &name, const Config &cfg, ModelStore &store) {
  const auto t0 = std::chrono::steady_clock::now();
  Report r = find_experiment(name).run(cfg, store);
  r.provenance["timing"]["total_ms"] =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// Report JSON without wall-clock fields, for exact comparisons between runs.
inline nlohmann::json comparable(const Report &r) {
  nlohmann::json j = to_json(r);
  j["provenance"].erase("timing");
  return j;
}

} // namespace stepnav
