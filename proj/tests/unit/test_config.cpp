#include <stepnav/config.hpp>

#include <gtest/gtest.h>

#include <sstream>

using namespace stepnav;

TEST(Config, DefaultsMatchPublishedHyperparameters) {
  const Config c;
  const TrainConfig t = c.train_config();
  EXPECT_DOUBLE_EQ(t.lr, 1e-4);
  EXPECT_EQ(t.batch_size, 64);
  EXPECT_DOUBLE_EQ(t.beta1, 0.9);
  EXPECT_DOUBLE_EQ(t.beta2, 0.95);
  EXPECT_EQ(t.steps, 10000);
  EXPECT_TRUE(t.pair_balanced);
  const ModelConfig m = c.model_config(205, 32);
  EXPECT_EQ(m.n_layers, 2);
  EXPECT_EQ(m.d_embd, 64);
  EXPECT_EQ(m.context_len, 32);
  EXPECT_EQ(c.i("motif.context_len"), 128);
  EXPECT_EQ(c.ints("experiment.seeds"), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(c.reals("experiment.temperatures").size(), 13u);
  EXPECT_FALSE(c.optional_int("dataset.delta").has_value());
}

TEST(Config, UnknownKeyIsRejected) {
  Config c;
  EXPECT_THROW(c.set("training.learning_rate", "1"), ConfigError);
  EXPECT_THROW(c.set_assignment("nodes=3"), ConfigError);
  EXPECT_THROW(c.set_assignment("graph.nodes"), ConfigError);
}

TEST(Config, ValuesAreTypeChecked) {
  Config c;
  EXPECT_THROW(c.set("graph.nodes", "many"), ConfigError);
  EXPECT_THROW(c.set("graph.nodes", "12x"), ConfigError);
  EXPECT_THROW(c.set("training.lr", "fast"), ConfigError);
  EXPECT_THROW(c.set("model.tie_weights", "maybe"), ConfigError);
  EXPECT_THROW(c.set("experiment.seeds", "1,two"), ConfigError);
  c.set("dataset.delta", "3");
  EXPECT_EQ(c.optional_int("dataset.delta"), 3);
  c.set("dataset.delta", "none");
  EXPECT_FALSE(c.optional_int("dataset.delta"));
}

TEST(Config, FileMergeIgnoresCommentsAndReportsLine) {
  std::istringstream good("# comment\n\ngraph.nodes = 50  # trailing\ntraining.lr=3e-4\n");
  Config c;
  c.merge(good);
  EXPECT_EQ(c.i("graph.nodes"), 50);
  EXPECT_DOUBLE_EQ(c.real("training.lr"), 3e-4);

  std::istringstream bad("graph.nodes=5\nbogus.key=1\n");
  Config d;
  try {
    d.merge(bad);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError &e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Config, TextRoundTripAndHash) {
  Config a;
  a.set("graph.kind", "hierarchical");
  a.set("training.seed", "7");
  std::istringstream is(a.to_text());
  Config b;
  b.merge(is);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(a.hash(), b.hash());
  b.set("training.seed", "8");
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(Config::fnv1a(""), 1469598103934665603ull);
}

TEST(Config, ForwardNegativesApplyOnlyToHierarchicalGraphs) {
  Config c;
  EXPECT_FALSE(c.dataset_spec().forward_negatives);
  c.set("graph.kind", "hierarchical");
  EXPECT_TRUE(c.dataset_spec().forward_negatives);
  c.set("dataset.forward_negatives", "false");
  EXPECT_FALSE(c.dataset_spec().forward_negatives);
}

TEST(Config, AttentionOnlyVariantIsNormalized) {
  Config c;
  c.set("model.variant", "attn_only_1l");
  const ModelConfig m = c.model_config(30, 32);
  EXPECT_EQ(m.n_layers, 1);
  EXPECT_EQ(m.n_heads, 1);
  EXPECT_THROW(c.set("model.variant", "both"), ConfigError);
}

TEST(Config, BadValuesSurfaceAsConfigErrors) {
  Config c;
  c.set("training.batch_size", "0");
  EXPECT_THROW(c.train_config(), ConfigError);
  Config d;
  EXPECT_THROW(d.set("graph.kind", "tree"), ConfigError);
  EXPECT_THROW(d.set("dataset.mode", "both"), ConfigError);
  EXPECT_THROW(d.set("training.batch_sampling", "random"), ConfigError);
  d.set("graph.nodes", "1");
  EXPECT_THROW(d.make_graph(), ConfigError);
  Config e;
  e.set("sampling.temperature", "-1");
  EXPECT_THROW(e.sample_config(), ConfigError);
}

TEST(Config, GraphViewHonorsSeed) {
  Config a;
  a.set("graph.nodes", "30");
  a.set("graph.p", "0.2");
  Config b = a;
  EXPECT_TRUE(a.make_graph() == b.make_graph());
  b.set("graph.seed", "5");
  EXPECT_FALSE(a.make_graph() == b.make_graph());
}
