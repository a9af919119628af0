#pragma once

// Experiment configuration: ascii `section.key=value` lines over a fixed
// schema. Every key has a default; unknown keys are rejected.

#include <stepnav/corpus.hpp>
#include <stepnav/error.hpp>
#include <stepnav/graphs.hpp>
#include <stepnav/model.hpp>
#include <stepnav/sampler.hpp>
#include <stepnav/trainer.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace stepnav {

enum class ValueType { integer, real, boolean, text, real_list, int_list, optional_int };

struct ConfigKey {
  const char *key;
  ValueType type;
  const char *default_value;
  const char *help;
};

// Defaults follow the published hyperparameters; experiment-level knobs keep
// their full-size values too (desk-scale runs override them explicitly).
inline const std::vector<ConfigKey> &config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"graph.kind", ValueType::text, "bernoulli", "bernoulli | hierarchical"},
      {"graph.nodes", ValueType::integer, "200", "bernoulli node count"},
      {"graph.p", ValueType::real, "0.05", "edge probability"},
      {"graph.layers", ValueType::integer, "10", "hierarchical layer count"},
      {"graph.nodes_per_layer", ValueType::integer, "20", "hierarchical layer width"},
      {"graph.seed", ValueType::integer, "0", "graph seed"},
      {"graph.attempt_cap", ValueType::integer, "10000", "connectivity rejection cap"},
      {"graph.path_cap", ValueType::integer, "10000", "simple paths kept per pair"},

      {"dataset.mode", ValueType::text, "stepwise", "stepwise | direct"},
      {"dataset.train_fraction", ValueType::real, "0.2", "fraction of connected pairs trained"},
      {"dataset.negative_ratio", ValueType::real, "1.0", "negatives per positive train pair"},
      {"dataset.delta", ValueType::optional_int, "none", "layer-gap threshold (hierarchical)"},
      {"dataset.forward_negatives", ValueType::boolean, "true",
       "hierarchical graphs: negatives only between a layer and a later one"},
      {"dataset.corruption_rate", ValueType::real, "0", "fraction of training tokens corrupted"},
      {"dataset.context_len", ValueType::integer, "32", "single-graph context length"},
      {"dataset.seed", ValueType::integer, "0", "pair split seed"},

      {"model.variant", ValueType::text, "full", "full | attn_only_1l"},
      {"model.n_layers", ValueType::integer, "2", ""},
      {"model.n_heads", ValueType::integer, "4", ""},
      {"model.d_embd", ValueType::integer, "64", ""},
      {"model.tie_weights", ValueType::boolean, "true", ""},
      {"model.loss_beta", ValueType::real, "1.0", "logit multiplier in the loss"},
      {"model.ln_epsilon", ValueType::real, "1e-5", ""},
      {"model.attn_scale", ValueType::boolean, "true", "scale attention logits by 1/sqrt(d_head)"},

      {"training.lr", ValueType::real, "1e-4", ""},
      {"training.batch_size", ValueType::integer, "64", ""},
      {"training.beta1", ValueType::real, "0.9", ""},
      {"training.beta2", ValueType::real, "0.95", ""},
      {"training.eps", ValueType::real, "1e-8", ""},
      {"training.steps", ValueType::integer, "10000", ""},
      {"training.eval_interval", ValueType::integer, "100", ""},
      {"training.seed", ValueType::integer, "0", "init + batch sampling seed"},
      {"training.checkpoint_interval", ValueType::integer, "0", "0: final checkpoint only"},
      {"training.probe_size", ValueType::integer, "256", "held-out probe pairs"},
      {"training.batch_sampling", ValueType::text, "pair", "pair | sequence"},

      {"mechinterp.lr", ValueType::real, "0", "attention-only experiment runs; 0 keeps training.lr"},
      {"mechinterp.steps", ValueType::integer, "0",
       "attention-only experiment runs; 0 keeps training.steps"},

      {"sampling.temperature", ValueType::real, "0", ""},
      {"sampling.max_new_tokens", ValueType::integer, "-1", "-1: up to the context"},
      {"sampling.seed", ValueType::integer, "0", ""},
      {"sampling.pairs", ValueType::integer, "500", "pairs sampled by `sample`"},

      {"motif.count", ValueType::integer, "10", "motifs in the library"},
      {"motif.nodes", ValueType::integer, "100", "nodes per motif"},
      {"motif.p", ValueType::real, "0.95", "edge probability inside motifs"},
      {"motif.seed", ValueType::integer, "0", ""},
      {"motif.train_order_fraction", ValueType::real, "0.7777777777777778", "35 of 45 orders"},
      {"motif.chain_min", ValueType::integer, "3", "shortest training chain (motifs)"},
      {"motif.chain_max", ValueType::integer, "5", "longest training chain (motifs)"},
      {"motif.context_len", ValueType::integer, "128", ""},
      {"motif.train_episodes", ValueType::integer, "50000", "pre-generated training episodes"},

      {"experiment.name", ValueType::text, "stepwise_gap", "experiment run by `eval`"},
      {"experiment.seeds", ValueType::int_list, "1,2,3", "model/split seeds per condition"},
      {"experiment.graph_kinds", ValueType::text, "bernoulli,hierarchical", "stepwise_gap graphs"},
      {"experiment.eval_pairs", ValueType::integer, "500", "held-out pairs scored"},
      {"experiment.similarity_pairs", ValueType::integer, "2000", "pairs for path comparison"},
      {"experiment.deltas", ValueType::int_list, "2,3,4,5,6", "delta_sweep thresholds"},
      {"experiment.temperatures", ValueType::real_list,
       "0,0.25,0.5,0.75,1,1.25,1.5,1.75,2,2.25,2.5,2.75,3", "temperature grid"},
      {"experiment.samples", ValueType::integer, "3000", "generations per temperature"},
      {"experiment.low_temperature", ValueType::real, "0.5", "short_path_bias sampling temperature"},
      {"experiment.low_temperature_samples", ValueType::integer, "10", "samples per pair"},
      {"experiment.corruption_rates", ValueType::real_list, "0.05,0.1,0.2", ""},
      {"experiment.densities", ValueType::real_list, "0.08,0.09,0.1,0.11,0.12", ""},
      {"experiment.dims", ValueType::int_list, "4,8,12,16,20,24,32,48,64", "embedding sweep"},
      {"experiment.sweeps", ValueType::text, "corruption,density,embedding", "robustness parts"},
      {"experiment.n_intermediate", ValueType::int_list, "1,2,3,4", "motif_generalization n"},
      {"experiment.motif_trials", ValueType::integer, "300", "chains per n"},
      {"experiment.conflict_trials", ValueType::integer, "300", ""},
      {"experiment.regression_pairs", ValueType::integer, "2000", "pairs whose goals are regressed"},
  };
  return schema;
}

class Config {
public:
  Config() {
    for (const auto &k : config_schema()) {
      values_[k.key] = k.default_value;
    }
  }

  static bool known(const std::string &key) { return find_key(key) != nullptr; }

  // `key=value`; the value is validated against the key's type.
  void set(const std::string &key, const std::string &value) {
    const ConfigKey *k = find_key(key);
    if (!k) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    check_type(*k, value);
    check_choice(key, value);
    values_[key] = value;
  }

  void set_assignment(const std::string &assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("expected key=value, got '" + assignment + "'");
    }
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  // Lines of `key=value`; blank lines and `#` comments are ignored.
  void merge(std::istream &is) {
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) {
        line = line.substr(0, hash);
      }
      line = trim(line);
      if (line.empty()) {
        continue;
      }
      try {
        set_assignment(line);
      } catch (const ConfigError &e) {
        throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  static Config from_file(const std::string &path) {
    std::ifstream is(path);
    if (!is) {
      throw ConfigError("cannot read config file '" + path + "'");
    }
    Config c;
    c.merge(is);
    return c;
  }

  const std::string &raw(const std::string &key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    return it->second;
  }

  long long integer(const std::string &key) const { return parse_int(raw(key)); }
  int i(const std::string &key) const { return static_cast<int>(integer(key)); }
  double real(const std::string &key) const { return parse_real(raw(key)); }
  bool boolean(const std::string &key) const { return parse_bool(raw(key)); }
  const std::string &text(const std::string &key) const { return raw(key); }
  std::optional<int> optional_int(const std::string &key) const {
    const auto &v = raw(key);
    if (v == "none" || v.empty()) {
      return std::nullopt;
    }
    return static_cast<int>(parse_int(v));
  }
  std::vector<double> reals(const std::string &key) const {
    std::vector<double> out;
    for (const auto &s : split(raw(key))) {
      out.push_back(parse_real(s));
    }
    return out;
  }
  std::vector<int> ints(const std::string &key) const {
    std::vector<int> out;
    for (const auto &s : split(raw(key))) {
      out.push_back(static_cast<int>(parse_int(s)));
    }
    return out;
  }
  std::vector<std::string> words(const std::string &key) const { return split(raw(key)); }

  // Fully resolved configuration in schema order.
  std::string to_text() const {
    std::ostringstream os;
    for (const auto &k : config_schema()) {
      os << k.key << '=' << values_.at(k.key) << '\n';
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto &k : config_schema()) {
      j[k.key] = values_.at(k.key);
    }
    return j;
  }

  // FNV-1a over the resolved text; stable across runs and platforms.
  std::uint64_t hash() const { return fnv1a(to_text()); }

  static std::uint64_t fnv1a(const std::string &s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    return h;
  }

  friend bool operator==(const Config &a, const Config &b) { return a.values_ == b.values_; }

  // ---- typed views -------------------------------------------------------

  Dag make_graph() const {
    const DagKind kind = parse_dag_kind(text("graph.kind"));
    const auto seed = static_cast<std::uint64_t>(integer("graph.seed"));
    if (kind == DagKind::bernoulli) {
      return generate_bernoulli(i("graph.nodes"), real("graph.p"), seed, i("graph.attempt_cap"));
    }
    return generate_hierarchical(i("graph.layers"), i("graph.nodes_per_layer"), real("graph.p"),
                                 seed, i("graph.attempt_cap"));
  }

  DatasetSpec dataset_spec() const {
    DatasetSpec s;
    s.mode = parse_mode(text("dataset.mode"));
    s.train_fraction = real("dataset.train_fraction");
    s.negative_ratio = real("dataset.negative_ratio");
    s.delta = optional_int("dataset.delta");
    s.forward_negatives = boolean("dataset.forward_negatives") &&
                          parse_dag_kind(text("graph.kind")) == DagKind::hierarchical;
    s.corruption_rate = real("dataset.corruption_rate");
    s.context_len = i("dataset.context_len");
    s.path_cap = static_cast<std::size_t>(integer("graph.path_cap"));
    s.seed = static_cast<std::uint64_t>(integer("dataset.seed"));
    return s;
  }

  ModelConfig model_config(int vocab_size, int context_len) const {
    ModelConfig m;
    m.variant = parse_variant(text("model.variant"));
    m.n_layers = i("model.n_layers");
    m.n_heads = i("model.n_heads");
    m.d_embd = i("model.d_embd");
    m.tie_weights = boolean("model.tie_weights");
    m.loss_beta = real("model.loss_beta");
    m.ln_epsilon = real("model.ln_epsilon");
    m.attn_scale = boolean("model.attn_scale");
    m.vocab_size = vocab_size;
    m.context_len = context_len;
    m = m.normalized();
    m.validate();
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.lr = real("training.lr");
    t.batch_size = i("training.batch_size");
    t.beta1 = real("training.beta1");
    t.beta2 = real("training.beta2");
    t.eps = real("training.eps");
    t.steps = i("training.steps");
    t.eval_interval = i("training.eval_interval");
    t.seed = static_cast<std::uint64_t>(integer("training.seed"));
    t.checkpoint_interval = i("training.checkpoint_interval");
    t.pair_balanced = text("training.batch_sampling") == "pair";
    t.validate();
    return t;
  }

  SampleConfig sample_config() const {
    SampleConfig s;
    s.temperature = real("sampling.temperature");
    s.max_new_tokens = i("sampling.max_new_tokens");
    s.seed = static_cast<std::uint64_t>(integer("sampling.seed"));
    if (s.temperature < 0.0) {
      throw ConfigError("temperature must be non-negative");
    }
    return s;
  }

private:
  static const ConfigKey *find_key(const std::string &key) {
    for (const auto &k : config_schema()) {
      if (key == k.key) {
        return &k;
      }
    }
    return nullptr;
  }

  static std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
      return "";
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::vector<std::string> split(const std::string &s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) {
        out.push_back(item);
      }
    }
    return out;
  }

  static long long parse_int(const std::string &s) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &used);
    } catch (const std::exception &) {
      throw ConfigError("expected an integer, got '" + s + "'");
    }
    if (used != s.size()) {
      throw ConfigError("expected an integer, got '" + s + "'");
    }
    return v;
  }

  static double parse_real(const std::string &s) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception &) {
      throw ConfigError("expected a number, got '" + s + "'");
    }
    if (used != s.size()) {
      throw ConfigError("expected a number, got '" + s + "'");
    }
    return v;
  }

  static bool parse_bool(const std::string &s) {
    if (s == "true" || s == "1" || s == "on") {
      return true;
    }
    if (s == "false" || s == "0" || s == "off") {
      return false;
    }
    throw ConfigError("expected a boolean, got '" + s + "'");
  }

  static void check_type(const ConfigKey &k, const std::string &v) {
    try {
      switch (k.type) {
      case ValueType::integer: parse_int(v); break;
      case ValueType::real: parse_real(v); break;
      case ValueType::boolean: parse_bool(v); break;
      case ValueType::text: break;
      case ValueType::real_list:
        for (const auto &s : split(v)) parse_real(s);
        break;
      case ValueType::int_list:
        for (const auto &s : split(v)) parse_int(s);
        break;
      case ValueType::optional_int:
        if (v != "none" && !v.empty()) parse_int(v);
        break;
      }
    } catch (const ConfigError &e) {
      throw ConfigError(std::string(k.key) + ": " + e.what());
    }
  }

  static void check_choice(const std::string &key, const std::string &v) {
    static const std::map<std::string, std::vector<std::string>> choices = {
        {"graph.kind", {"bernoulli", "hierarchical"}},
        {"dataset.mode", {"stepwise", "direct"}},
        {"model.variant", {"full", "attn_only_1l"}},
        {"training.batch_sampling", {"pair", "sequence"}},
    };
    const auto it = choices.find(key);
    if (it != choices.end() &&
        std::find(it->second.begin(), it->second.end(), v) == it->second.end()) {
      throw ConfigError(key + ": unknown value '" + v + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

} // namespace stepnav
