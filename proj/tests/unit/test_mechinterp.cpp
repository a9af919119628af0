#include <stepnav/mechinterp.hpp>

#include <Eigen/Dense>
#include <gtest/gtest.h>

using namespace stepnav;

namespace {

ModelConfig attn_only(int vocab, int d = 16) {
  ModelConfig c;
  c.variant = Variant::attn_only_1l;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_embd = d;
  c.context_len = 16;
  c.vocab_size = vocab;
  return c;
}

std::vector<char> chars(const std::string &s) { return {s.begin(), s.end()}; }

} // namespace

TEST(Levenshtein, ClassicExamples) {
  EXPECT_EQ(levenshtein(chars("kitten"), chars("sitting")), 3u);
  EXPECT_EQ(levenshtein(chars(""), chars("abc")), 3u);
  EXPECT_EQ(levenshtein(chars("flaw"), chars("lawn")), 2u);
  EXPECT_EQ(levenshtein(std::vector<int>{1, 2, 3}, std::vector<int>{1, 2, 3}), 0u);
}

TEST(Levenshtein, MetricAxioms) {
  Rng rng(4);
  auto rand_list = [&] {
    std::vector<int> v(rng.below(8));
    for (int &x : v) x = static_cast<int>(rng.below(4));
    return v;
  };
  for (int i = 0; i < 500; ++i) {
    const auto a = rand_list(), b = rand_list(), c = rand_list();
    EXPECT_EQ(levenshtein(a, a), 0u);
    EXPECT_EQ(levenshtein(a, b) == 0, a == b);
    EXPECT_EQ(levenshtein(a, b), levenshtein(b, a));
    EXPECT_LE(levenshtein(a, c), levenshtein(a, b) + levenshtein(b, c));
  }
}

TEST(Regression, RecoversExactLine) {
  std::vector<double> x, y;
  for (int i = 0; i < 20; ++i) {
    x.push_back(0.5 * i);
    y.push_back(-0.106 * 0.5 * i + 2.25);
  }
  const auto f = ordinary_least_squares(x, y);
  EXPECT_NEAR(f.slope, -0.106, 1e-10);
  EXPECT_NEAR(f.intercept, 2.25, 1e-10);
  EXPECT_NEAR(f.pearson, -1.0, 1e-10);
}

TEST(Regression, MatchesNormalEquationsAndResidualsAreOrthogonal) {
  Rng rng(8);
  std::vector<double> x, y;
  for (int i = 0; i < 200; ++i) {
    x.push_back(rng.uniform() * 6);
    y.push_back(1.0 - 0.3 * x.back() + rng.normal(0.0, 0.5));
  }
  const auto f = ordinary_least_squares(x, y);
  Eigen::MatrixXd X(200, 2);
  Eigen::VectorXd Y(200);
  for (int i = 0; i < 200; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = x[i];
    Y(i) = y[i];
  }
  const Eigen::VectorXd beta = (X.transpose() * X).ldlt().solve(X.transpose() * Y);
  EXPECT_NEAR(f.intercept, beta(0), 1e-10);
  EXPECT_NEAR(f.slope, beta(1), 1e-10);
  double dot = 0.0, sum = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double r = y[i] - f.intercept - f.slope * x[i];
    dot += r * x[i];
    sum += r;
  }
  EXPECT_NEAR(dot, 0.0, 1e-8);
  EXPECT_NEAR(sum, 0.0, 1e-8);
}

TEST(Regression, TooFewPointsIsInsufficientData) {
  const std::vector<double> x{1, 2}, y{3, 4};
  EXPECT_THROW(ordinary_least_squares(x, y), InsufficientDataError);
}

TEST(Simplified, ValueTableMatchesOnTheFlyComputation) {
  const auto c = attn_only(12);
  const auto p = init_params<double>(c, 3);
  const SimplifiedPredictor pred(p, c, 7);
  EXPECT_EQ(pred.values().rows(), 12);
  auto value_of = [&](RowVector<double> x) {
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    RowVector<double> h = ((x.array() - mu) / std::sqrt(var + 1e-5)).matrix();
    return RowVector<double>(h * p.blocks[0].wv.transpose());
  };
  for (Node n = 0; n < 7; ++n) {
    const RowVector<double> x = p.wte.row(Vocab::kFirstNode + n);
    EXPECT_TRUE(pred.value(n).isApprox(value_of(x), 1e-12));
  }
  // Rebuilds are identical; v(g) + v(c) scoring matches next().
  const SimplifiedPredictor again(p, c, 7);
  EXPECT_EQ(again.values(), pred.values());
  for (Node g = 0; g < 7; ++g) {
    for (Node cur = 0; cur < 7; ++cur) {
      Node best = 0;
      for (Node n = 1; n < 7; ++n) {
        if (pred.score(n, g, cur) > pred.score(best, g, cur)) best = n;
      }
      EXPECT_EQ(pred.next(g, cur), best);
    }
  }
}

TEST(Simplified, ArgmaxInvariantUnderPositiveRescaling) {
  const auto c = attn_only(12);
  auto p = init_params<double>(c, 3);
  const SimplifiedPredictor a(p, c, 7);
  p.blocks[0].wv *= 3.5;
  const SimplifiedPredictor b(p, c, 7);
  for (Node g = 0; g < 7; ++g) {
    for (Node cur = 0; cur < 7; ++cur) EXPECT_EQ(a.next(g, cur), b.next(g, cur));
  }
}

TEST(Simplified, RequiresAttentionOnlyModel) {
  ModelConfig c;
  c.vocab_size = 10;
  EXPECT_THROW(SimplifiedPredictor(init_params<double>(c, 0), c, 5), ConfigError);
}

TEST(Attention, RowsSumToOneAndRolesTagged) {
  const auto c = attn_only(12);
  const auto p = init_params<double>(c, 3);
  const std::vector<Token> toks{Vocab::goal, 9, 5, 6, 8, 9};
  const auto snaps = attention_maps(p, c, toks, 3);
  ASSERT_EQ(snaps.size(), 4u);
  for (const auto &s : snaps) {
    double sum = 0.0;
    for (double w : s.weights) {
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_EQ(s.goal_position, 1);
    EXPECT_EQ(s.current_position, s.position);
    EXPECT_EQ(s.weights.size(), static_cast<std::size_t>(s.position + 1));
  }
}

TEST(Attention, UntrainedModelIsNearUniform) {
  const auto c = attn_only(30, 64);
  const auto p = init_params<double>(c, 1);
  std::vector<Token> toks{Vocab::goal};
  for (int i = 0; i < 15; ++i) toks.push_back(5 + i);
  const auto snaps = attention_maps(p, c, toks, 3);
  for (const auto &s : snaps) {
    const double T = static_cast<double>(s.weights.size());
    EXPECT_LT(*std::max_element(s.weights.begin(), s.weights.end()), 3.0 / T);
  }
}

TEST(Distance, RegressionPointsUseGraphDistances) {
  const Dag g = generate_bernoulli(25, 0.2, 2);
  const auto c = attn_only(Vocab(25).size());
  const auto p = init_params<double>(c, 1);
  const SimplifiedPredictor pred(p, c, 25);
  const std::vector<NodePair> pairs{{0, 24}, {3, 20}, {1, 24}};
  const auto dr = distance_regression(pred, g, pairs);
  ASSERT_GE(dr.points.size(), 3u);
  for (const auto &pt : dr.points) {
    EXPECT_DOUBLE_EQ(pt.distance, *graph_distance(g, pt.candidate, pt.goal));
  }
  const auto capped = distance_regression(pred, g, pairs, 5);
  EXPECT_EQ(capped.points.size(), 5u);
}

TEST(PathSimilarity, IdenticalFractionAndAccuracies) {
  const Dag g = generate_bernoulli(12, 0.4, 2);
  const auto c = attn_only(Vocab(12).size());
  const auto p = init_params<float>(c, 1);
  const SimplifiedPredictor pred(p, c, 12);
  std::vector<NodePair> pairs;
  for (Node a = 0; a < 12; ++a) {
    for (Node b = a + 1; b < 12; ++b) {
      if (g.reachable(a, b)) pairs.push_back({a, b});
    }
  }
  const auto ps = path_similarity(p, c, pred, g, pairs);
  ASSERT_EQ(ps.rows.size(), pairs.size());
  std::size_t same = 0;
  for (const auto &r : ps.rows) same += r.full == r.simplified;
  EXPECT_DOUBLE_EQ(ps.identical_fraction, same / static_cast<double>(pairs.size()));
  const auto hist = ps.distribution();
  std::size_t total = 0;
  for (auto h : hist) total += h;
  EXPECT_EQ(total, pairs.size());
}
