// stepnav: command-line front end for graph generation, datasets, training,
// sampling and the experiment registry.

#include <stepnav/config.hpp>
#include <stepnav/evalsuite.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <string>
#include <vector>

using namespace stepnav;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out_root;
  bool quiet = false;
};

Config resolve(const Common &c) {
  Config cfg = c.config_file.empty() ? Config{} : Config::from_file(c.config_file);
  for (const auto &o : c.overrides) {
    cfg.set_assignment(o);
  }
  return cfg;
}

fs::path output_root(const Common &c) {
  if (!c.out_root.empty()) {
    return c.out_root;
  }
  if (const char *env = std::getenv("STEPNAV_OUTPUT_ROOT"); env && *env) {
    return env;
  }
  return "runs";
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  const auto us = std::chrono::duration_cast<std::chrono::microseconds>(now.time_since_epoch()).count() % 1000000;
  return std::string(buf) + "-" + std::to_string(us);
}

// <root>/<command>-<config hash>-<timestamp>, holding the resolved config.
fs::path make_run_dir(const Common &c, const std::string &command, const Config &cfg) {
  const fs::path dir = output_root(c) / (command + "-" + hex64(cfg.hash()) + "-" + timestamp());
  fs::create_directories(dir);
  std::ofstream(dir / "config.txt") << cfg.to_text();
  if (!c.quiet) {
    std::cerr << "# resolved config\n" << cfg.to_text() << "# run dir " << dir.string() << '\n';
  }
  return dir;
}

void write_text(const fs::path &p, const std::string &s) {
  std::ofstream os(p);
  if (!os) {
    throw DataError("cannot write " + p.string());
  }
  os << s;
}

std::string graph_text(const Dag &dag) {
  std::ostringstream os;
  write_graph(os, dag);
  return os.str();
}

void write_dataset_files(const fs::path &dir, const GraphRun &run) {
  write_text(dir / "graph.txt", graph_text(run.dag));
  write_text(dir / "train.txt", dataset_text(run.ds));
  {
    std::ofstream os(dir / "vocab.txt");
    write_vocab(os, run.ds.vocab);
  }
  {
    std::ofstream os(dir / "eval_pairs.txt");
    write_eval_pairs(os, run.ds);
  }
  nlohmann::json prov = {{"graph_seed", run.config.integer("graph.seed")},
                         {"dataset_seed", run.config.integer("dataset.seed")},
                         {"dataset_hash", hex64(run.dataset_hash)},
                         {"train_sequences", run.ds.train.size()},
                         {"train_positive_pairs", run.ds.train_positive_pairs.size()},
                         {"train_negative_pairs", run.ds.train_negative_pairs.size()},
                         {"eval_positive", run.ds.eval_positive.size()},
                         {"eval_negative", run.ds.eval_negative.size()}};
  write_text(dir / "provenance.json", prov.dump(2) + "\n");
}

// A train run directory: resolved config plus checkpoint.
struct LoadedRun {
  Config cfg;
  GraphRun run;
};

LoadedRun load_run(const fs::path &dir) {
  LoadedRun lr{Config::from_file((dir / "config.txt").string()), {}};
  lr.run.config = lr.cfg;
  ModelStore::prepare(lr.run, lr.cfg);
  const fs::path ckpt = dir / "model.ckpt";
  if (!fs::exists(ckpt)) {
    throw DataError("no checkpoint in " + dir.string());
  }
  lr.run.result.state = load_train_state(ckpt);
  if (!(lr.run.result.state.model == lr.run.model)) {
    throw DataError("checkpoint does not match the run config");
  }
  return lr;
}

int cmd_gen_graph(const Common &c) {
  const Config cfg = resolve(c);
  const Dag dag = cfg.make_graph();
  const fs::path dir = make_run_dir(c, "gen-graph", cfg);
  write_text(dir / "graph.txt", graph_text(dag));
  nlohmann::json prov = {{"graph_seed", cfg.integer("graph.seed")},
                         {"kind", cfg.text("graph.kind")},
                         {"nodes", dag.node_count()},
                         {"edges", dag.edge_count()},
                         {"graph_hash", hex64(Config::fnv1a(graph_text(dag)))}};
  write_text(dir / "provenance.json", prov.dump(2) + "\n");
  std::cout << dir.string() << '\n';
  return 0;
}

int cmd_build_data(const Common &c) {
  const Config cfg = resolve(c);
  GraphRun run;
  run.config = cfg;
  ModelStore::prepare(run, cfg);
  const fs::path dir = make_run_dir(c, "build-data", cfg);
  write_dataset_files(dir, run);
  std::cout << dir.string() << '\n';
  return 0;
}

int cmd_train(const Common &c, const std::string &resume) {
  LoadedRun lr{resolve(c), {}};
  GraphRun &run = lr.run;
  run.config = lr.cfg;
  ModelStore::prepare(run, lr.cfg);
  const fs::path dir = make_run_dir(c, "train", lr.cfg);
  write_dataset_files(dir, run);
  std::ofstream jsonl(dir / "metrics.jsonl");
  std::ofstream kv(dir / "metrics.log");
  TrainHooks hooks;
  hooks.jsonl_log = &jsonl;
  hooks.kv_log = &kv;
  hooks.checkpoint = dir / "model.ckpt";
  if (!c.quiet) {
    hooks.on_record = [](const MetricRecord &r) { std::cerr << r.to_kv() << '\n'; };
  }
  const TrainConfig tc = lr.cfg.train_config();
  if (resume.empty()) {
    run.result = train(run.model, tc, run.ds.train, run.probe, hooks);
  } else {
    TrainState st = load_train_state(resume);
    if (!(st.model == run.model)) {
      throw DataError("resume checkpoint does not match the config");
    }
    run.result = train(std::move(st), tc, run.ds.train, run.probe, hooks);
  }
  std::cout << dir.string() << '\n';
  return 0;
}

int cmd_sample(const Common &c, const std::string &run_dir) {
  LoadedRun lr = load_run(run_dir);
  for (const auto &o : c.overrides) {
    if (o.rfind("sampling.", 0) != 0) {
      throw ConfigError("sample only accepts sampling.* overrides, got '" + o + "'");
    }
    lr.cfg.set_assignment(o);
  }
  const SampleConfig sc = lr.cfg.sample_config();
  const auto n = static_cast<std::size_t>(lr.cfg.integer("sampling.pairs"));
  std::vector<NodePair> pairs = heldout_positives(lr.run, n, 8);
  const auto gens = generate_paths(lr.run.result.state.params, lr.run.model, lr.run.dag,
                                   std::span<const NodePair>(pairs), sc);
  const fs::path dir = make_run_dir(c, "sample", lr.cfg);
  std::ofstream os(dir / "generations.jsonl");
  write_generation_dump(os, lr.run.ds.vocab, std::span<const GenerationResult>(gens));
  std::map<std::string, int> counts;
  for (const auto &g : gens) {
    counts[to_string(g.check.verdict)]++;
  }
  nlohmann::json summary = {{"pairs", gens.size()}, {"verdicts", counts}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << dir.string() << '\n' << summary.dump() << '\n';
  return 0;
}

int cmd_eval(const Common &c, const std::string &name, bool cache_models) {
  Config cfg = resolve(c);
  if (!name.empty()) {
    cfg.set("experiment.name", name);
  }
  const std::string exp = cfg.text("experiment.name");
  find_experiment(exp);
  const fs::path dir = make_run_dir(c, "eval-" + exp, cfg);
  std::optional<fs::path> cache;
  if (cache_models) {
    cache = output_root(c) / "model-cache";
  }
  ModelStore store(cache, c.quiet ? nullptr : &std::cerr);
  const Report r = run_experiment(exp, cfg, store);
  write_report(dir, r);
  std::cout << dir.string() << '\n' << r.summary.dump() << '\n';
  return 0;
}

int cmd_analyze(const Common &c, const std::string &run_dir, std::size_t pairs) {
  LoadedRun lr = load_run(run_dir);
  const auto &run = lr.run;
  const auto &p = run.result.state.params;
  const fs::path dir = make_run_dir(c, "analyze", lr.cfg);
  const auto sample = heldout_positives(run, pairs, 9);
  // Attention maps of the first pair, one row per (query step, position).
  if (!sample.empty()) {
    const auto g = generate(p, run.model, run.dag, sample.front(), SampleConfig{});
    std::vector<Token> tokens = g.prompt;
    for (Token t : g.emitted) {
      if (static_cast<int>(tokens.size()) >= run.model.context_len) break;
      tokens.push_back(t);
    }
    std::ofstream os(dir / "attention.csv");
    os << "layer,head,step,position,token,weight,is_goal,is_current\n";
    for (int layer = 0; layer < run.model.n_layers; ++layer) {
      for (int head = 0; head < run.model.n_heads; ++head) {
        const auto maps = attention_maps(p, run.model, std::span<const Token>(tokens), 3, layer, head);
        for (std::size_t s = 0; s < maps.size(); ++s) {
          for (std::size_t pos = 0; pos < maps[s].weights.size(); ++pos) {
            const int ip = static_cast<int>(pos);
            os << layer << ',' << head << ',' << s << ',' << pos << ','
               << run.ds.vocab.str(tokens[pos]) << ',' << maps[s].weights[pos] << ','
               << (ip == maps[s].goal_position) << ',' << (ip == maps[s].current_position) << '\n';
          }
        }
      }
    }
  }
  nlohmann::json summary = {{"pairs", sample.size()}};
  if (run.model.attention_only()) {
    const SimplifiedPredictor pred(p, run.model, run.dag.node_count());
    const PathSimilarity ps = path_similarity(p, run.model, pred, run.dag, std::span(sample));
    {
      std::ofstream os(dir / "path_similarity.csv");
      write_path_similarity_csv(os, ps);
    }
    const DistanceRegression dr = distance_regression(pred, run.dag, std::span(sample));
    {
      std::ofstream os(dir / "regression.csv");
      write_regression_csv(os, dr);
    }
    summary["full_accuracy"] = ps.full_accuracy;
    summary["simplified_accuracy"] = ps.simplified_accuracy;
    summary["identical_fraction"] = ps.identical_fraction;
    summary["slope"] = dr.fit.slope;
    summary["intercept"] = dr.fit.intercept;
    summary["pearson"] = dr.fit.pearson;
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << dir.string() << '\n' << summary.dump() << '\n';
  return 0;
}

// Cartesian product of `key=v1,v2,...` axes.
std::vector<std::vector<std::pair<std::string, std::string>>>
grid_points(const std::vector<std::string> &axes) {
  std::vector<std::vector<std::pair<std::string, std::string>>> points{{}};
  for (const auto &axis : axes) {
    const auto eq = axis.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("grid axis must be key=v1,v2,..., got '" + axis + "'");
    }
    const std::string key = axis.substr(0, eq);
    if (!Config::known(key)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    std::vector<std::string> values;
    std::stringstream ss(axis.substr(eq + 1));
    std::string v;
    while (std::getline(ss, v, ',')) {
      values.push_back(v);
    }
    if (values.empty()) {
      throw ConfigError("grid axis '" + key + "' has no values");
    }
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto &pt : points) {
      for (const auto &val : values) {
        auto q = pt;
        q.emplace_back(key, val);
        next.push_back(std::move(q));
      }
    }
    points = std::move(next);
  }
  return points;
}

// Points run as independent jobs on a bounded pool; the calling thread is
// the only writer of the merged sweep file.
int cmd_sweep(const Common &c, const std::string &name, const std::vector<std::string> &axes,
              int jobs) {
  Config base = resolve(c);
  if (!name.empty()) {
    base.set("experiment.name", name);
  }
  const std::string exp = base.text("experiment.name");
  find_experiment(exp);
  const auto points = grid_points(axes);
  std::vector<Config> configs;
  for (const auto &pt : points) {
    Config cfg = base;
    for (const auto &[k, v] : pt) {
      cfg.set(k, v);
    }
    configs.push_back(cfg);
  }
  const fs::path dir = make_run_dir(c, "sweep-" + exp, base);
  auto run_point = [&](std::size_t i) {
    ModelStore store;
    Report r = run_experiment(exp, configs[i], store);
    write_report(dir / ("point-" + std::to_string(i)), r);
    return r;
  };
  std::vector<Report> reports(points.size());
  jobs = std::max(1, jobs);
  for (std::size_t begin = 0; begin < points.size(); begin += static_cast<std::size_t>(jobs)) {
    std::vector<std::future<Report>> futs;
    const std::size_t end = std::min(points.size(), begin + static_cast<std::size_t>(jobs));
    for (std::size_t i = begin; i < end; ++i) {
      futs.push_back(std::async(std::launch::async, run_point, i));
    }
    for (std::size_t i = begin; i < end; ++i) {
      reports[i] = futs[i - begin].get();
      if (!c.quiet) {
        std::cerr << "point " << i << " done\n";
      }
    }
  }
  nlohmann::json merged = nlohmann::json::array();
  for (std::size_t i = 0; i < points.size(); ++i) {
    nlohmann::json coords = nlohmann::json::object();
    for (const auto &[k, v] : points[i]) {
      coords[k] = v;
    }
    merged.push_back({{"point", i}, {"coordinates", coords}, {"summary", reports[i].summary}});
  }
  write_text(dir / "sweep.json", merged.dump(2) + "\n");
  std::cout << dir.string() << '\n';
  return 0;
}

std::string experiment_list() {
  std::string s = "Experiments:\n";
  for (const auto &e : experiments()) {
    s += "  " + e.name;
    s.append(e.name.size() < 22 ? 22 - e.name.size() : 1, ' ');
    s += e.description + "\n";
  }
  return s;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Graph-navigation laboratory for stepwise vs direct inference"};
  app.footer(experiment_list() +
             "\nExit codes: 0 ok, 2 config error, 3 data error, 4 numeric error,\n"
             "5 insufficient data. Outputs go to --out, else $STEPNAV_OUTPUT_ROOT, else ./runs.");
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App *sub) {
    sub->add_option("-c,--config", common.config_file, "key=value config file");
    sub->add_option("-s,--set", common.overrides, "override, e.g. --set training.lr=1e-3");
    sub->add_option("-o,--out", common.out_root, "output root directory");
    sub->add_flag("-q,--quiet", common.quiet, "no progress output on stderr");
  };

  auto *gen = app.add_subcommand("gen-graph", "generate a graph from the graph.* config");
  add_common(gen);
  auto *data = app.add_subcommand("build-data", "build the training set and held-out pairs");
  add_common(data);
  std::string resume;
  auto *tr = app.add_subcommand("train", "train a model; writes metrics and a checkpoint");
  add_common(tr);
  tr->add_option("--resume", resume, "checkpoint to continue from");
  std::string run_dir;
  auto *smp = app.add_subcommand("sample", "sample paths from a trained run");
  add_common(smp);
  smp->add_option("--run", run_dir, "train run directory")->required();
  std::string exp_name;
  bool cache_models = false;
  auto *ev = app.add_subcommand("eval", "run one experiment and write its report");
  add_common(ev);
  ev->add_option("name", exp_name, "experiment name (default: experiment.name)");
  ev->add_flag("--cache-models", cache_models, "keep trained models under <out>/model-cache");
  std::size_t analyze_pairs = 500;
  auto *an = app.add_subcommand("analyze", "attention maps and value-rule analysis of a run");
  add_common(an);
  an->add_option("--run", run_dir, "train run directory")->required();
  an->add_option("--pairs", analyze_pairs, "held-out pairs analysed");
  std::vector<std::string> axes;
  int jobs = 1;
  auto *sw = app.add_subcommand("sweep", "run an experiment over a grid of overrides");
  add_common(sw);
  sw->add_option("name", exp_name, "experiment name (default: experiment.name)");
  sw->add_option("-g,--grid", axes, "axis key=v1,v2,...")->required();
  sw->add_option("-j,--jobs", jobs, "parallel points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::config);
  }

  try {
    if (*gen) return cmd_gen_graph(common);
    if (*data) return cmd_build_data(common);
    if (*tr) return cmd_train(common, resume);
    if (*smp) return cmd_sample(common, run_dir);
    if (*ev) return cmd_eval(common, exp_name, cache_models);
    if (*an) return cmd_analyze(common, run_dir, analyze_pairs);
    if (*sw) return cmd_sweep(common, exp_name, axes, jobs);
  } catch (const Error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
