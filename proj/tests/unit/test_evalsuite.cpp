#include <stepnav/evalsuite.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace stepnav;

namespace {

// Small enough that a whole experiment trains in seconds.
Config tiny() {
  Config c;
  for (const char *kv : {"graph.nodes=14", "graph.layers=4", "graph.nodes_per_layer=4",
                         "graph.p=0.35", "dataset.context_len=16", "model.d_embd=16", "model.n_heads=2",
                         "model.n_layers=1", "training.steps=60", "training.eval_interval=20",
                         "training.batch_size=16", "training.lr=1e-3", "training.probe_size=16",
                         "experiment.seeds=1", "experiment.eval_pairs=20",
                         "experiment.similarity_pairs=20", "experiment.samples=40",
                         "experiment.temperatures=0,1", "experiment.low_temperature_samples=2",
                         "experiment.regression_pairs=20"}) {
    c.set_assignment(kv);
  }
  return c;
}

Config tiny_motifs() {
  Config c = tiny();
  for (const char *kv : {"motif.count=5", "motif.nodes=3", "motif.p=0.9", "motif.chain_min=3",
                         "motif.chain_max=4", "motif.context_len=64", "motif.train_episodes=200",
                         "motif.train_order_fraction=0.7", "experiment.n_intermediate=1,2,3",
                         "experiment.motif_trials=10", "experiment.conflict_trials=10"}) {
    c.set_assignment(kv);
  }
  return c;
}

fs::path scratch(const std::string &name) {
  const auto d = fs::temp_directory_path() / ("stepnav_evalsuite_" + name);
  fs::remove_all(d);
  return d;
}

} // namespace

TEST(Stitching, GreedyCoverUsesLongestTrainingSubpaths) {
  Dataset ds;
  ds.vocab = Vocab(6);
  ds.context_len = 12;
  ds.train.push_back(encode_episode(Path{{0, 1, 2}}, {0, 2}, Mode::stepwise, ds.vocab, 12));
  ds.train.push_back(encode_episode(Path{{2, 3, 4}}, {2, 4}, Mode::stepwise, ds.vocab, 12));
  ds.train.push_back(encode_episode(Path{{4, 5}}, {4, 5}, Mode::stepwise, ds.vocab, 12));
  ds.train.push_back(encode_episode(std::nullopt, {5, 0}, Mode::stepwise, ds.vocab, 12));
  const auto sub = training_subpaths(ds);
  EXPECT_TRUE(sub.contains({0, 1, 2}));
  EXPECT_TRUE(sub.contains({3, 4}));
  EXPECT_FALSE(sub.contains({1, 2, 3}));
  EXPECT_EQ(stitch_segments(Path{{0, 1, 2}}, sub), 1);
  EXPECT_EQ(stitch_segments(Path{{0, 1, 2, 3, 4, 5}}, sub), 3);
  EXPECT_EQ(stitch_segments(Path{{1, 2, 3}}, sub), 2);
  // A bigram never seen still counts as its own segment.
  EXPECT_EQ(stitch_segments(Path{{0, 5}}, sub), 1);
}

TEST(MeanPathLength, MatchesEnumerationAndGraphDistance) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Dag g = generate_bernoulli(9, 0.4, seed);
    for (Node a = 0; a < 9; ++a) {
      for (Node b = 0; b < 9; ++b) {
        if (!g.reachable(a, b)) continue;
        const auto paths = enumerate_simple_paths(g, {a, b}, 1u << 20);
        double sum = 0;
        for (const auto &p : paths) sum += static_cast<double>(p.edge_count());
        const double m = mean_path_length(g, {a, b});
        EXPECT_NEAR(m, sum / paths.size(), 1e-12);
        EXPECT_NEAR(m, *graph_distance(g, a, b), 1e-12);
      }
    }
  }
}

TEST(MotifOrders, SampledOrdersRespectTheFilter) {
  const auto split = split_motif_orders(6, 0.6, 2);
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const auto order = sample_motif_order(6, 3, rng, [&](int a, int b) { return split.is_train(a, b); });
    ASSERT_EQ(order.size(), 3u);
    EXPECT_NE(order[0], order[1]);
    EXPECT_NE(order[0], order[2]);
    EXPECT_NE(order[1], order[2]);
    EXPECT_TRUE(split.is_train(order[0], order[1]));
    EXPECT_TRUE(split.is_train(order[1], order[2]));
  }
  Rng r2(1);
  EXPECT_THROW(sample_motif_order(4, 3, r2, [](int, int) { return false; }), DataError);
}

TEST(Report, JsonRoundTripAndCsvMirror) {
  Report r;
  r.name = "demo";
  r.config = Config().to_json();
  r.table.columns = {"a", "b"};
  r.table.add({1.0, 0.5});
  r.table.add({2.0, std::nan("")});
  r.seeds = {1, 2};
  r.tables["aux"] = Table{{"x"}, {{3.0}}};
  r.summary["gap"] = 0.25;
  const auto dir = scratch("report");
  const auto files = write_report(dir, r);
  EXPECT_EQ(files.size(), 3u);
  const Report back = read_report(dir / "demo.json");
  EXPECT_EQ(back.name, "demo");
  EXPECT_EQ(back.table.columns, r.table.columns);
  EXPECT_EQ(back.table.rows[0], r.table.rows[0]);
  EXPECT_TRUE(std::isnan(back.table.rows[1][1]));
  EXPECT_EQ(back.seeds, r.seeds);
  EXPECT_DOUBLE_EQ(back.scalar("gap"), 0.25);
  EXPECT_EQ(back.tables.at("aux").rows[0][0], 3.0);
  std::ifstream csv(dir / "demo.csv");
  std::string header, row1, row2;
  std::getline(csv, header);
  std::getline(csv, row1);
  std::getline(csv, row2);
  EXPECT_EQ(header, "a,b");
  EXPECT_EQ(row1, "1,0.5");
  EXPECT_EQ(row2, "2,");
  EXPECT_THROW(r.table.add({1.0}), DataError);
}

TEST(Report, MissingSchemaKeysAreRejected) {
  Report r;
  r.name = "x";
  auto j = to_json(r);
  for (const char *key : {"name", "config", "columns", "rows", "seeds"}) {
    auto k = j;
    k.erase(key);
    EXPECT_THROW(report_from_json(k), DataError) << key;
  }
  auto bad = j;
  bad["rows"] = nlohmann::json::array({nlohmann::json::array({1, 2})});
  EXPECT_THROW(report_from_json(bad), DataError);
}

TEST(Registry, NamesAreUniqueAndResolvable) {
  std::set<std::string> names;
  for (const auto &e : experiments()) {
    EXPECT_TRUE(names.insert(e.name).second);
    EXPECT_EQ(&find_experiment(e.name), &e);
  }
  EXPECT_GE(names.size(), 10u);
  EXPECT_THROW(find_experiment("nope"), ConfigError);
}

TEST(ModelStore, SharesModelsByConfigKey) {
  ModelStore store;
  const Config a = seeded(tiny(), 1);
  const GraphRun &r1 = store.graph_run(a);
  const GraphRun &r2 = store.graph_run(a);
  EXPECT_EQ(&r1, &r2);
  EXPECT_EQ(store.trainings(), 1u);
  // Experiment-only keys do not change the model.
  store.graph_run(with(a, {{"experiment.eval_pairs", "7"}}));
  EXPECT_EQ(store.trainings(), 1u);
  store.graph_run(seeded(tiny(), 2));
  EXPECT_EQ(store.trainings(), 2u);
}

TEST(ModelStore, ArtifactDirectoryReloadsIdenticalModels) {
  const auto dir = scratch("store");
  const Config a = seeded(tiny(), 3);
  ModelStore first(dir);
  const GraphRun &r1 = first.graph_run(a);
  const auto d = dir / "models" / r1.key;
  for (const char *f : {"train.txt", "graph.txt", "eval_pairs.txt", "metrics.jsonl", "model.ckpt", "done"}) {
    EXPECT_TRUE(fs::exists(d / f)) << f;
  }
  std::ifstream is(d / "train.txt");
  std::stringstream ss;
  ss << is.rdbuf();
  EXPECT_EQ(Config::fnv1a(ss.str()), r1.dataset_hash);
  ModelStore second(dir);
  const GraphRun &r2 = second.graph_run(a);
  EXPECT_EQ(second.trainings(), 0u);
  EXPECT_TRUE(r2.result.state.params.wte.isApprox(r1.result.state.params.wte, 0.0f));
  ASSERT_EQ(r2.result.metrics.size(), r1.result.metrics.size());
  EXPECT_EQ(r2.result.metrics.back().loss, r1.result.metrics.back().loss);
}

TEST(Experiments, StepwiseGapReportShape) {
  ModelStore store;
  const Report r = run_experiment("stepwise_gap", tiny(), store);
  EXPECT_EQ(r.table.rows.size(), 4u); // 2 graphs x 2 modes x 1 seed
  for (const auto &row : r.table.rows) {
    EXPECT_GE(row[r.table.column("accuracy")], 0.0);
    EXPECT_LE(row[r.table.column("accuracy")], 1.0);
  }
  EXPECT_TRUE(r.summary.contains("hierarchical.gap"));
  EXPECT_TRUE(r.summary.contains("bernoulli.gap"));
  EXPECT_FALSE(r.tables.at("curves").rows.empty());
  EXPECT_EQ(r.provenance.at("models").size(), 4u);
}

TEST(Experiments, RerunReproducesReportExactly) {
  ModelStore s1, s2;
  const Report a = run_experiment("stepwise_gap", tiny(), s1);
  const Report b = run_experiment("stepwise_gap", tiny(), s2);
  EXPECT_EQ(comparable(a), comparable(b));
}

TEST(Experiments, DeltaBeyondDepthIsSkipped) {
  ModelStore store;
  const Report r = run_experiment("delta_sweep", with(tiny(), {{"experiment.deltas", "2,9"}}), store);
  EXPECT_EQ(r.scalar("smallest_delta"), 2.0);
  EXPECT_EQ(r.scalar("largest_delta"), 2.0);
  EXPECT_FALSE(r.summary.contains("delta.9.gap"));
}

TEST(Experiments, GreedySamplingHasDiversityOne) {
  ModelStore store;
  Config c = with(tiny(), {{"training.steps", "1000"}, {"training.lr", "3e-3"}});
  const Report r = run_experiment("temperature_sweep", c, store);
  ASSERT_EQ(r.table.rows.size(), 2u);
  EXPECT_EQ(r.table.rows[0][r.table.column("diversity")], 1.0);
  EXPECT_EQ(r.table.rows[0][r.table.column("accuracy")], 1.0);
}

TEST(Experiments, UntrainedModelFailsAlmostAlways) {
  ModelStore store;
  const Report r = run_experiment("failure_dynamics", tiny(), store);
  const auto &first = r.table.rows.front();
  EXPECT_EQ(first[r.table.column("step")], 0.0);
  EXPECT_GE(first[r.table.column("misstep_rate")], 0.9);
  EXPECT_GE(first[r.table.column("planfail_rate")], 0.9);
}

TEST(Experiments, ShortPathBiasUsesExactGroundTruth) {
  ModelStore store;
  const Report r = run_experiment("short_path_bias", with(tiny(), {{"training.steps", "200"}}), store);
  const GraphRun &run = store.graph_run(with(seeded(tiny(), 1), {{"dataset.mode", "stepwise"},
                                                                 {"training.steps", "200"}}));
  for (const auto &row : r.table.rows) {
    const NodePair p{static_cast<Node>(row[1]), static_cast<Node>(row[2])};
    EXPECT_NEAR(row[3], *graph_distance(run.dag, p.start, p.goal), 1e-12);
  }
}

TEST(Experiments, MechanisticReportsOnAttentionOnlyModel) {
  ModelStore store;
  const Report s = run_experiment("simplified_algorithm", tiny(), store);
  const Report d = run_experiment("distance_regression", tiny(), store);
  EXPECT_EQ(store.trainings(), 1u);
  EXPECT_TRUE(s.summary.contains("identical_fraction"));
  EXPECT_FALSE(s.tables.at("attention").rows.empty());
  EXPECT_TRUE(std::isfinite(d.scalar("slope")));
}

TEST(Experiments, AttentionOnlyOverridesApplyOnlyWhenSet) {
  const Config base = tiny();
  const Config plain = attention_only(base);
  EXPECT_EQ(plain.text("model.variant"), "attn_only_1l");
  EXPECT_EQ(plain.text("training.lr"), base.text("training.lr"));
  EXPECT_EQ(plain.integer("training.steps"), base.integer("training.steps"));
  const Config tuned = attention_only(with(base, {{"mechinterp.lr", "3e-3"}, {"mechinterp.steps", "77"}}));
  EXPECT_DOUBLE_EQ(tuned.real("training.lr"), 3e-3);
  EXPECT_EQ(tuned.integer("training.steps"), 77);
  EXPECT_THROW(attention_only(with(base, {{"mechinterp.steps", "-1"}})), ConfigError);
}

TEST(Experiments, MotifReportsShareOneModel) {
  ModelStore store;
  const Report g = run_experiment("motif_generalization", tiny_motifs(), store);
  const Report c = run_experiment("conflict_primacy", tiny_motifs(), store);
  EXPECT_EQ(g.table.rows.size(), 6u); // 3 n values x {held-out, train-order}
  EXPECT_EQ(c.scalar("trials"), 20.0);
  const double parts = c.scalar("first_fraction") + c.scalar("second_fraction");
  EXPECT_LE(parts, 1.0);
}

TEST(Experiments, SteeringOracleCountsGhostBigrams) {
  ModelStore store;
  const MotifRun &run = store.motif_run(seeded(tiny_motifs(), 1));
  Rng rng(5);
  const MotifChain chain = build_chain(run.set, {0, 1, 2}, rng);
  const auto ep = build_context_episode(run.set, chain, rng, run.ds.vocab, kUnboundedContext);
  const auto out = steer(run, {ep}, {chain.ghost_edges});
  ASSERT_EQ(out.size(), 1u);
  std::size_t found = 0;
  for (const GhostEdge &g : chain.ghost_edges) {
    for (std::size_t k = 0; k + 1 < out[0].nodes.size(); ++k) {
      if (out[0].nodes[k] == g.from_node && out[0].nodes[k + 1] == g.to_node) {
        ++found;
        break;
      }
    }
  }
  EXPECT_EQ(out[0].ghosts_present, found == chain.ghost_edges.size());
}

TEST(Experiments, RobustnessPartsAreSelectable) {
  ModelStore store;
  const Report r = run_experiment(
      "robustness_sweeps",
      with(tiny(), {{"experiment.sweeps", "embedding"}, {"experiment.dims", "4,8"}}), store);
  EXPECT_TRUE(r.table.rows.empty());
  EXPECT_EQ(r.tables.at("embedding").rows.size(), 2u);
  EXPECT_TRUE(r.summary.contains("embedding.4.accuracy"));
}
