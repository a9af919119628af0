#include <stepnav/model.hpp>

#include <gtest/gtest.h>

#include <sstream>

using namespace stepnav;

namespace {

ModelConfig tiny(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.d_embd = 8;
  c.n_layers = v == Variant::full ? 2 : 1;
  c.n_heads = v == Variant::full ? 2 : 1;
  c.context_len = 6;
  c.vocab_size = 7;
  return c;
}

// Scalar loss of a padded batch, recomputed from scratch.
double loss_of(const ModelParams<double> &p, const ModelConfig &c,
               const std::vector<Token> &tokens, int B, int T) {
  ForwardTrace<double> tr;
  forward(p, c, tokens, B, T, tr);
  Matrix<double> dl;
  return cross_entropy(tr.logits, shifted_targets(tokens, B, T, 0), c.loss_beta, dl).loss;
}

void check_gradients(ModelConfig c) {
  auto p = init_params<double>(c, 5);
  // Larger weights than the default init make the check sensitive.
  Rng rng(17);
  p.visit([&](const std::string &, auto &t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += rng.normal(0.0, 0.3);
  });
  const int B = 2, T = 6;
  const std::vector<Token> tokens{1, 5, 3, 6, 4, 0, 2, 2, 5, 1, 3, 6};
  auto grads = zeros_like(p);
  ForwardTrace<double> tr;
  Matrix<double> dl;
  loss_and_gradients(p, c, tokens, B, T, 0, grads, tr, dl);

  const double h = 1e-6;
  int checked = 0;
  auto gflat = std::vector<std::pair<std::string, const double *>>();
  grads.visit([&](const std::string &name, const auto &t) { gflat.emplace_back(name, t.data()); });
  std::size_t k = 0;
  p.visit([&](const std::string &name, auto &t) {
    ASSERT_EQ(gflat[k].first, name);
    const double *g = gflat[k].second;
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double up = loss_of(p, c, tokens, B, T);
      t.data()[i] = orig - h;
      const double down = loss_of(p, c, tokens, B, T);
      t.data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      EXPECT_NEAR(g[i], numeric, 1e-6 + 1e-5 * std::abs(numeric)) << name << "[" << i << "]";
      ++checked;
    }
    ++k;
  });
  EXPECT_EQ(static_cast<std::size_t>(checked), p.parameter_count());
}

} // namespace

TEST(Model, ParameterCountsMatchClosedForm) {
  for (Variant v : {Variant::full, Variant::attn_only_1l}) {
    auto c = tiny(v);
    EXPECT_EQ(init_params<float>(c, 0).parameter_count(), expected_parameter_count(c));
    c.tie_weights = false;
    EXPECT_EQ(init_params<float>(c, 0).parameter_count(), expected_parameter_count(c));
  }
}

TEST(Model, FullGradientsMatchFiniteDifferences) { check_gradients(tiny(Variant::full)); }

TEST(Model, UntiedGradientsMatchFiniteDifferences) {
  auto c = tiny(Variant::full);
  c.tie_weights = false;
  c.loss_beta = 1.7;
  check_gradients(c);
}

TEST(Model, AttentionOnlyGradientsMatchFiniteDifferences) {
  check_gradients(tiny(Variant::attn_only_1l));
}

TEST(Model, UnscaledAttentionGradients) {
  auto c = tiny(Variant::attn_only_1l);
  c.attn_scale = false;
  check_gradients(c);
}

TEST(Model, CausalMaskFuturePositionsDoNotAffectPast) {
  const auto c = tiny(Variant::full);
  const auto p = init_params<double>(c, 1);
  const auto a = forward(p, c, std::vector<Token>{1, 5, 3, 6});
  const auto b = forward(p, c, std::vector<Token>{1, 5, 4, 2});
  EXPECT_TRUE(a.logits.topRows(2).isApprox(b.logits.topRows(2), 1e-14));
  EXPECT_FALSE(a.logits.row(2).isApprox(b.logits.row(2), 1e-6));
}

TEST(Model, AttentionRowsAreDistributions) {
  const auto c = tiny(Variant::full);
  const auto p = init_params<double>(c, 1);
  const auto tr = forward(p, c, std::vector<Token>{1, 5, 3, 6, 2});
  for (int l = 0; l < 2; ++l) {
    for (int h = 0; h < 2; ++h) {
      const auto A = tr.attention(l, h, 0, 2);
      for (int i = 0; i < 5; ++i) {
        EXPECT_NEAR(A.row(i).sum(), 1.0, 1e-12);
        for (int j = i + 1; j < 5; ++j) EXPECT_EQ(A(i, j), 0.0);
      }
    }
  }
}

TEST(Model, AttentionOnlyMatchesClosedForm) {
  // out = h + softmax(q k^T / sqrt(d)) v with h = LN(wte + wpe), logits = out wte^T.
  const auto c = tiny(Variant::attn_only_1l);
  const auto p = init_params<double>(c, 3);
  const std::vector<Token> toks{1, 6, 3};
  const auto tr = forward(p, c, toks);
  Matrix<double> h(3, 8);
  for (int t = 0; t < 3; ++t) {
    RowVector<double> x = p.wte.row(toks[t]) + p.wpe.row(t);
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    h.row(t) = ((x.array() - mu) / std::sqrt(var + 1e-5)).matrix();
  }
  Matrix<double> q = h * p.blocks[0].wq.transpose(), k = h * p.blocks[0].wk.transpose(),
                 v = h * p.blocks[0].wv.transpose();
  Matrix<double> out = h;
  for (int i = 0; i < 3; ++i) {
    Eigen::VectorXd s(i + 1);
    for (int j = 0; j <= i; ++j) s(j) = q.row(i).dot(k.row(j)) / std::sqrt(8.0);
    s = (s.array() - s.maxCoeff()).exp();
    s /= s.sum();
    for (int j = 0; j <= i; ++j) out.row(i) += s(j) * v.row(j);
  }
  Matrix<double> logits = out * p.wte.transpose();
  EXPECT_TRUE(tr.logits.isApprox(logits, 1e-12));
}

TEST(Model, PaddingTargetsAreMasked) {
  const auto t = shifted_targets(std::vector<Token>{1, 5, 2, 0, 0}, 1, 5, 0);
  EXPECT_EQ(t, (std::vector<int>{5, 2, -1, -1, -1}));
  Matrix<double> logits = Matrix<double>::Zero(2, 3), dl;
  EXPECT_THROW(cross_entropy(logits, std::vector<int>{-1, -1}, 1.0, dl), DataError);
}

TEST(Model, CrossEntropyOfUniformLogitsIsLogV) {
  Matrix<double> logits = Matrix<double>::Zero(3, 7), dl;
  const auto r = cross_entropy(logits, std::vector<int>{1, -1, 4}, 1.0, dl);
  EXPECT_NEAR(r.loss, std::log(7.0), 1e-12);
  EXPECT_EQ(r.counted, 2u);
  EXPECT_DOUBLE_EQ(dl.row(1).sum(), 0.0);
}

TEST(Model, OverlongSequenceIsDataError) {
  const auto c = tiny(Variant::full);
  const auto p = init_params<float>(c, 0);
  EXPECT_THROW(forward(p, c, std::vector<Token>(7, 1)), DataError);
  EXPECT_THROW(forward(p, c, std::vector<Token>{1, 99}), DataError);
}

TEST(Model, ConfigValidation) {
  auto c = tiny(Variant::full);
  c.d_embd = 9;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(Variant::attn_only_1l);
  c.n_heads = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(c.normalized().n_heads, 1);
}

TEST(Checkpoint, RoundTripIsExact) {
  for (Variant v : {Variant::full, Variant::attn_only_1l}) {
    const auto c = tiny(v);
    const auto p = init_params<float>(c, 42);
    std::stringstream ss;
    save_model(ss, c, p);
    const auto [c2, p2] = load_model<float>(ss);
    EXPECT_EQ(c, c2);
    EXPECT_TRUE(p == p2);
  }
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  std::stringstream bad("NOTAFILE");
  EXPECT_THROW(load_model<float>(bad), DataError);
  const auto c = tiny(Variant::full);
  std::stringstream ss;
  save_model(ss, c, init_params<float>(c, 1));
  std::string s = ss.str();
  std::stringstream cut(s.substr(0, s.size() / 2));
  EXPECT_THROW(load_model<float>(cut), DataError);
}
