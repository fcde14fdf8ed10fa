#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_util.hpp"
#include "tuned_lens/diagnostics.hpp"

using namespace tuned_lens;
using namespace tuned_lens::diagnostics;
using testutil::jittered_model;
using testutil::small_config;

namespace {

double summed_ce(const model::Transformer& m, int layer, const Matrix& h, const std::vector<int>& toks) {
  Matrix logits = model::run_suffix(m, layer, h);
  return model::sequence_cross_entropy(logits, toks) * static_cast<double>(toks.size() - 1);
}

}  // namespace

TEST(LossGradient, MatchesFiniteDifferences) {
  auto cfg = small_config(3, 8);
  auto m = jittered_model(cfg, 1, 0.3);
  auto toks = testutil::random_tokens(6, cfg.vocab_size, 2);
  auto tr = model::forward_trace(m, toks);
  numerics::Rng rng(3);
  for (int layer = 0; layer <= cfg.n_layers; ++layer) {
    Matrix g = loss_gradient(m, toks, layer);
    const Matrix& h = tr.hidden[static_cast<std::size_t>(layer)];
    for (int trial = 0; trial < 10; ++trial) {
      Matrix dir = rng.normal_matrix(h.rows(), h.cols());
      const double eps = 1e-5;
      const double fd = (summed_ce(m, layer, h + eps * dir, toks) - summed_ce(m, layer, h - eps * dir, toks)) / (2 * eps);
      const double an = g.cwiseProduct(dir).sum();
      EXPECT_LT(std::abs(fd - an) / std::max(1e-8, std::abs(fd)), 1e-4) << "layer " << layer;
    }
  }
}

TEST(FlatCosine, PlantedCases) {
  numerics::Rng rng(4);
  Matrix g = rng.normal_matrix(5, 7);
  EXPECT_NEAR(flat_cosine(-2.0 * g, g), -1.0, 1e-15);
  Matrix o = rng.normal_matrix(5, 7);
  o -= (o.cwiseProduct(g).sum() / g.squaredNorm()) * g;
  EXPECT_NEAR(flat_cosine(o, g), 0.0, 1e-12);
  EXPECT_EQ(flat_cosine(Matrix::Zero(5, 7), g), 0.0);
}

TEST(Alignment, ShapesAndBounds) {
  auto cfg = small_config();
  auto m = jittered_model(cfg, 5);
  auto seqs = testutil::random_corpus(4, 12, cfg.vocab_size, 6);
  auto rep = grad_residual_alignment(m, seqs);
  ASSERT_EQ(rep.layers.size(), 3u);
  EXPECT_EQ(rep.samples.size(), 12u);
  auto tr = model::forward_trace(m, seqs[1]);
  for (const auto& s : rep.samples) {
    EXPECT_GE(s.cosine, -1.0);
    EXPECT_LE(s.cosine, 1.0);
    if (s.sequence == 1) {
      EXPECT_NEAR(s.cosine, flat_cosine(tr.residuals[static_cast<std::size_t>(s.layer)], loss_gradient(m, seqs[1], s.layer)), 1e-15);
    }
  }
  for (const auto& l : rep.layers) {
    EXPECT_LE(l.p5, l.p50);
    EXPECT_LE(l.p50, l.p95);
    EXPECT_GE(l.frac_negative, 0.0);
    EXPECT_LE(l.frac_negative, 1.0);
  }
  EXPECT_THROW(grad_residual_alignment(m, {}), std::invalid_argument);
}

TEST(RandomCosine, TwoDimensionsFollowArcsineLaw) {
  // Angle difference of two uniform directions is uniform, so
  // P(cos <= c) = 1 - acos(c) / pi.
  const double p5 = random_cosine_baseline(2, 600, 5, 7);
  const double p50 = random_cosine_baseline(2, 600, 50, 7);
  EXPECT_NEAR(p5, std::cos(0.95 * std::numbers::pi), 0.01);
  EXPECT_NEAR(p50, 0.0, 0.05);
}

TEST(RandomCosine, ConvergesWithSampleCount) {
  const double a = random_cosine_baseline(1024, 250, 5, 8);
  const double b = random_cosine_baseline(1024, 500, 5, 9);
  EXPECT_LT(std::abs(a - b) / std::abs(b), 0.2);
  EXPECT_NEAR(a, -1.645 / 32.0, 0.15 * 1.645 / 32.0);
}

TEST(RandomCosine, ChunkBoundaryAndErrors) {
  EXPECT_EQ(random_cosine_baseline(10000, 20, 5, 1), random_cosine_baseline(10000, 20, 5, 1));
  EXPECT_THROW(random_cosine_baseline(1, 20, 5, 1), std::invalid_argument);
  EXPECT_THROW(random_cosine_baseline(10, 1, 5, 1), std::invalid_argument);
}

TEST(Deletion, MatchesReruns) {
  auto cfg = small_config();
  auto m = jittered_model(cfg, 10);
  auto seqs = testutil::random_corpus(3, 10, cfg.vocab_size, 11);
  auto rep = diagnostics::layer_deletion_sweep(m, seqs);
  ASSERT_EQ(rep.rows.size(), 3u);
  EXPECT_EQ(rep.baseline, lens::eval_per_layer(nullptr, m, seqs).layers.back().perplexity);
  for (const auto& r : rep.rows) {
    auto d = model::delete_layer(m, r.layer);
    lens::CeAccumulator ce;
    for (const auto& s : seqs) ce.add(model::forward_trace(d, s).logits, s);
    EXPECT_EQ(r.perplexity, numerics::perplexity(ce.mean()));
  }
  EXPECT_THROW(layer_deletion_sweep(m, {}), std::invalid_argument);
}

TEST(Deletion, ZeroResidualBlockIsFree) {
  auto cfg = small_config();
  auto m = jittered_model(cfg, 12);
  auto& b = m.blocks[1];
  b.w_out.setZero();
  b.b_out.setZero();
  b.w_proj.setZero();
  b.b_proj.setZero();
  auto rep = layer_deletion_sweep(m, testutil::random_corpus(2, 9, cfg.vocab_size, 13));
  EXPECT_EQ(rep.rows[1].perplexity, rep.baseline);
}
