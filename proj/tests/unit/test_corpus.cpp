#include <stepnav/corpus.hpp>

#include <gtest/gtest.h>

#include <set>
#include <sstream>

using namespace stepnav;

namespace {

Dag chain5() { return Dag(5, DagKind::bernoulli, {{0, 1}, {1, 2}, {2, 3}, {3, 4}}); }

std::set<NodePair> train_pairs(const Dataset &ds) {
  std::set<NodePair> s(ds.train_positive_pairs.begin(), ds.train_positive_pairs.end());
  s.insert(ds.train_negative_pairs.begin(), ds.train_negative_pairs.end());
  return s;
}

} // namespace

TEST(Vocab, SpecialsTakeLowestIds) {
  const Vocab v(10);
  EXPECT_EQ(v.size(), 15);
  EXPECT_EQ(v.id("pad"), 0);
  EXPECT_EQ(v.id("goal"), 1);
  EXPECT_EQ(v.id("X0"), 5);
  EXPECT_EQ(v.str(v.node(9)), "X9");
  for (Token t = 0; t < v.size(); ++t) EXPECT_EQ(v.id(v.str(t)), t);
  EXPECT_THROW(v.id("X10"), DataError);
}

TEST(Encode, ExampleLayouts) {
  const Vocab v(8);
  const NodePair pr{4, 2};
  const auto s = encode_episode(Path{{4, 3, 6, 2}}, pr, Mode::stepwise, v, 12);
  EXPECT_EQ(v.decode(s.content()), "goal X2 X4 X3 X6 X2 p1 end");
  EXPECT_EQ(s.tokens.size(), 12u);
  EXPECT_EQ(s.tokens.back(), Vocab::pad);
  EXPECT_EQ(v.decode(encode_episode(Path{{4, 3, 6, 2}}, pr, Mode::direct, v, 12).content()),
            "goal X2 X4 p1 end");
  EXPECT_EQ(v.decode(encode_episode(std::nullopt, {7, 1}, Mode::stepwise, v, 12).content()),
            "goal X1 X7 p0 end");
}

TEST(Encode, RoundTripAndOverflow) {
  const Vocab v(8);
  const auto s = encode_episode(Path{{4, 3, 6, 2}}, {4, 2}, Mode::stepwise, v, 12);
  EXPECT_EQ(v.encode(v.decode(s.content())), s.content());
  EXPECT_THROW(encode_episode(Path{{4, 3, 6, 2}}, {4, 2}, Mode::stepwise, v, 6), DataError);
  EXPECT_THROW(encode_episode(Path{{4, 3}}, {4, 2}, Mode::stepwise, v, 12), DataError);
}

TEST(Dataset, FullFractionOnChainIncludesEverything) {
  DatasetSpec spec;
  spec.train_fraction = 1.0;
  spec.negative_ratio = 0.0;
  const Dataset ds = build_dataset(spec, chain5());
  // 4 edges + 6 longer paths on a chain.
  EXPECT_EQ(ds.train.size(), 10u);
  EXPECT_TRUE(ds.eval_positive.empty());
}

TEST(Dataset, EdgesAlwaysTrainAndSplitsAreDisjoint) {
  const Dag g = generate_bernoulli(60, 0.08, 2);
  DatasetSpec spec;
  spec.seed = 3;
  const Dataset ds = build_dataset(spec, g);
  const auto tp = train_pairs(ds);
  for (const Edge &e : g.edges()) EXPECT_TRUE(tp.count({e.from, e.to}));
  for (NodePair p : ds.eval_positive) {
    EXPECT_FALSE(tp.count(p));
    EXPECT_TRUE(g.reachable(p.start, p.goal));
  }
  for (NodePair p : ds.eval_negative) {
    EXPECT_FALSE(tp.count(p));
    EXPECT_FALSE(g.reachable(p.start, p.goal));
  }
  // Balancing: one negative per positive training pair.
  EXPECT_EQ(ds.train_negative_pairs.size(), ds.train_positive_pairs.size());
}

TEST(Dataset, StepwisePositivesAreGraphPaths) {
  const Dag g = generate_bernoulli(40, 0.1, 4);
  DatasetSpec spec;
  spec.seed = 1;
  const Dataset ds = build_dataset(spec, g);
  std::size_t positives = 0;
  for (const Sequence &s : ds.train) {
    if (!s.meta.positive) continue;
    ++positives;
    Path p;
    for (int i = 2; i < s.length - 2; ++i) p.nodes.push_back(ds.vocab.node_of(s.tokens[i]));
    EXPECT_TRUE(is_path_of(g, p));
    EXPECT_EQ(p.nodes.front(), s.meta.pair.start);
    EXPECT_EQ(p.nodes.back(), s.meta.pair.goal);
  }
  EXPECT_GT(positives, ds.train_positive_pairs.size());
}

TEST(Dataset, DirectModeOneEpisodePerPair) {
  const Dag g = generate_bernoulli(40, 0.1, 4);
  DatasetSpec spec;
  spec.mode = Mode::direct;
  const Dataset ds = build_dataset(spec, g);
  EXPECT_EQ(ds.train.size(), ds.train_positive_pairs.size() + ds.train_negative_pairs.size());
  for (const Sequence &s : ds.train) EXPECT_EQ(s.length, 5);
}

TEST(Dataset, SameSplitAcrossModes) {
  const Dag g = generate_hierarchical(6, 8, 0.2, 1);
  DatasetSpec a, b;
  b.mode = Mode::direct;
  const Dataset sa = build_dataset(a, g), sb = build_dataset(b, g);
  EXPECT_EQ(sa.eval_positive, sb.eval_positive);
  EXPECT_EQ(sa.eval_negative, sb.eval_negative);
  EXPECT_EQ(sa.train_negative_pairs, sb.train_negative_pairs);
}

TEST(Dataset, DeltaRestrictsLayerGaps) {
  const Dag g = generate_hierarchical(10, 20, 0.05, 2);
  DatasetSpec spec;
  spec.delta = 2;
  const Dataset ds = build_dataset(spec, g);
  for (NodePair p : train_pairs(ds)) EXPECT_LT(layer_gap(g, p), 2);
  for (NodePair p : ds.eval_positive) EXPECT_GE(layer_gap(g, p), 2);
  for (NodePair p : ds.eval_negative) EXPECT_GE(layer_gap(g, p), 2);
  EXPECT_FALSE(ds.eval_positive.empty());
}

TEST(Dataset, DeltaOnBernoulliIsConfigError) {
  DatasetSpec spec;
  spec.delta = 2;
  EXPECT_THROW(build_dataset(spec, chain5()), ConfigError);
  spec.delta = 0;
  EXPECT_THROW(build_dataset(spec, generate_hierarchical(3, 2, 1.0, 0)), ConfigError);
}

TEST(Dataset, ForwardNegativesRespectLayerOrder) {
  const Dag g = generate_hierarchical(8, 10, 0.15, 2);
  DatasetSpec spec;
  spec.forward_negatives = true;
  const Dataset ds = build_dataset(spec, g);
  for (NodePair p : ds.train_negative_pairs) EXPECT_GT(g.layer_of(p.goal), g.layer_of(p.start));
  for (NodePair p : ds.eval_negative) EXPECT_GT(g.layer_of(p.goal), g.layer_of(p.start));
}

TEST(Corrupt, ExactCountAndEvalUntouched) {
  const Dag g = generate_bernoulli(40, 0.1, 4);
  DatasetSpec spec;
  const Dataset ds = build_dataset(spec, g);
  std::size_t total = 0;
  for (const auto &s : ds.train) total += s.length;
  const Dataset noisy = corrupt(ds, 0.10, 9);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    for (std::size_t j = 0; j < ds.train[i].tokens.size(); ++j) {
      const Token a = ds.train[i].tokens[j], b = noisy.train[i].tokens[j];
      if (a == Vocab::pad) {
        EXPECT_EQ(b, Vocab::pad);
      }
      if (a != b) {
        ++changed;
        EXPECT_NE(b, Vocab::pad);
        EXPECT_LT(b, ds.vocab.size());
      }
    }
  }
  EXPECT_EQ(changed, static_cast<std::size_t>(std::llround(0.10 * total)));
  EXPECT_EQ(noisy.eval_positive, ds.eval_positive);
  EXPECT_EQ(corrupt(ds, 0.10, 9).train[3].tokens, noisy.train[3].tokens);
  const Dataset clean = corrupt(ds, 0.0, 9);
  for (std::size_t i = 0; i < ds.train.size(); ++i) EXPECT_EQ(clean.train[i].tokens, ds.train[i].tokens);
}

TEST(Motifs, ExemplarCrossesGhostEdge) {
  const MotifSet set = build_motif_set(4, 6, 0.9, 1);
  const MotifChain chain = build_chain(set, {0, 2, 3}, std::uint64_t{2});
  const Vocab v(set.total_nodes());
  Rng rng(5);
  for (const GhostEdge &ge : chain.ghost_edges) {
    const auto ex = build_exemplar(set, ge, rng, v);
    ASSERT_GE(ex.size(), 4u);
    EXPECT_EQ(ex[0], Vocab::goal);
    EXPECT_EQ(ex[1], ex.back());
    const auto srcs = sources(set.motifs[ge.motif_a]);
    EXPECT_NE(std::find(srcs.begin(), srcs.end(), set.local_of(v.node_of(ex[2]))), srcs.end());
    bool bigram = false;
    for (std::size_t i = 2; i + 1 < ex.size(); ++i) {
      bigram |= ex[i] == v.node(ge.from_node) && ex[i + 1] == v.node(ge.to_node);
    }
    EXPECT_TRUE(bigram);
  }
}

TEST(Motifs, ContextEpisodeFinalPathCrossesEveryGhostEdge) {
  const MotifSet set = build_motif_set(5, 6, 0.9, 1);
  const MotifChain chain = build_chain(set, {4, 1, 0, 2}, std::uint64_t{3});
  const Vocab v(set.total_nodes());
  Rng rng(8);
  const auto ep = build_context_episode(set, chain, rng, v, 128);
  const auto &p = ep.final_path.nodes;
  EXPECT_EQ(set.motif_of(p.front()), 4);
  EXPECT_EQ(set.motif_of(p.back()), 2);
  std::size_t ghosts = 0;
  for (std::size_t i = 0; i + 1 < p.size(); ++i) {
    for (const GhostEdge &ge : chain.ghost_edges) ghosts += (p[i] == ge.from_node && p[i + 1] == ge.to_node);
  }
  EXPECT_EQ(ghosts, chain.ghost_edges.size());
  const auto content = ep.sequence.content();
  const int pl = ep.sequence.meta.prompt_length;
  EXPECT_EQ(content[pl - 3], Vocab::goal);
  EXPECT_EQ(content[pl - 1], v.node(p.front()));
  EXPECT_EQ(content.back(), Vocab::end);
  EXPECT_EQ(content.size(), static_cast<std::size_t>(pl - 1) + p.size() + 1);
  EXPECT_EQ(content[content.size() - 2], v.node(p.back()));
  // Three exemplars, one per ghost edge, plus the final episode.
  EXPECT_EQ(std::count(content.begin(), content.end(), Vocab::goal), 4);
}

TEST(Motifs, OrderSplitIsPartition) {
  const auto split = split_motif_orders(10, 35.0 / 45.0, 3);
  EXPECT_EQ(split.train.size(), 35u);
  EXPECT_EQ(split.test.size(), 10u);
  for (auto pr : split.test) {
    EXPECT_EQ(std::find(split.train.begin(), split.train.end(), pr), split.train.end());
    EXPECT_FALSE(split.is_train(pr.second, pr.first));
  }
}

TEST(Files, DatasetAndVocabRoundTrip) {
  const Dag g = generate_bernoulli(30, 0.1, 4);
  const Dataset ds = build_dataset(DatasetSpec{}, g);
  std::stringstream seqs, vocab, meta;
  write_sequences(seqs, ds);
  write_vocab(vocab, ds.vocab);
  write_eval_pairs(meta, ds);
  const Vocab v = read_vocab(vocab);
  EXPECT_EQ(v.size(), ds.vocab.size());
  const auto back = read_sequences(seqs, v, ds.context_len);
  ASSERT_EQ(back.size(), ds.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(back[i].tokens, ds.train[i].tokens);
  const auto [pos, neg] = read_eval_pairs(meta);
  EXPECT_EQ(pos, ds.eval_positive);
  EXPECT_EQ(neg, ds.eval_negative);
}
