#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "fd.hpp"
#include "test_util.hpp"
#include "tuned_lens/lens.hpp"
#include "tuned_lens/model.hpp"
#include "tuned_lens/numerics.hpp"

using namespace tuned_lens;
using namespace tuned_lens::lens;
using testutil::jittered_model;
using testutil::layer_norm_rows;
using testutil::small_config;

namespace {

// Softmax of one row computed with plain loops.
std::vector<double> probs_of(const Matrix& logits, Eigen::Index r) {
  double mx = logits.row(r).maxCoeff();
  std::vector<double> p(static_cast<std::size_t>(logits.cols()));
  double z = 0;
  for (Eigen::Index v = 0; v < logits.cols(); ++v) z += p[static_cast<std::size_t>(v)] = std::exp(logits(r, v) - mx);
  for (auto& x : p) x /= z;
  return p;
}

double kl_loop(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

double ce_loop(const Matrix& logits, const std::vector<int>& seq) {
  double s = 0;
  for (std::size_t t = 0; t + 1 < seq.size(); ++t)
    s -= std::log(probs_of(logits, static_cast<Eigen::Index>(t))[static_cast<std::size_t>(seq[t + 1])]);
  return s / static_cast<double>(seq.size() - 1);
}

Translator random_translator(int d, std::uint64_t seed) {
  numerics::Rng rng(seed);
  return {Matrix::Identity(d, d) + rng.normal_matrix(d, d, 0.3), rng.normal_matrix(1, d, 0.5)};
}

TunedLens random_lens(const model::ModelConfig& cfg, std::uint64_t seed, bool ifb = false) {
  TunedLens lens;
  lens.include_final_block = ifb;
  for (int l = 0; l < cfg.n_layers; ++l)
    lens.translators.push_back(random_translator(cfg.d_model, seed + static_cast<std::uint64_t>(l)));
  return lens;
}

}  // namespace

TEST(LogitLens, PlainAtLastLayerIsModelOutput) {
  auto m = jittered_model(small_config(), 1);
  auto tr = model::forward_trace(m, testutil::random_tokens(9, 257, 2));
  Matrix out = logit_lens(m, tr.hidden.back());
  EXPECT_TRUE(out == tr.logits);
}

TEST(LogitLens, DebiasedWithZeroBiasIsPlain) {
  auto m = jittered_model(small_config(), 3);
  auto tr = model::forward_trace(m, testutil::random_tokens(7, 257, 4));
  RowVector zero = RowVector::Zero(m.d_model());
  for (const auto& h : tr.hidden)
    EXPECT_TRUE(logit_lens(m, h, Variant::kDebiased, &zero) == logit_lens(m, h));
}

TEST(LogitLens, DebiasedShiftsInput) {
  auto m = jittered_model(small_config(), 5);
  auto tr = model::forward_trace(m, testutil::random_tokens(6, 257, 6));
  numerics::Rng rng(7);
  RowVector b = rng.normal_matrix(1, m.d_model(), 1.0);
  const Matrix& h = tr.hidden[1];
  Matrix want = layer_norm_rows(h.rowwise() + b, m.lnf_g, m.lnf_b, m.config.eps) * m.unembed;
  EXPECT_LT((logit_lens(m, h, Variant::kDebiased, &b) - want).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_THROW(logit_lens(m, h, Variant::kDebiased, nullptr), std::invalid_argument);
}

TEST(LogitLens, ExtendedAtPenultimateLayer) {
  auto m = jittered_model(small_config(), 8);
  auto tr = model::forward_trace(m, testutil::random_tokens(11, 257, 9));
  const int L = m.n_layers();
  // h_L = h_{L-1} + F_L(h_{L-1}), so LN(h + F_L(h)) W_U must reproduce the head.
  Matrix want = layer_norm_rows(tr.hidden[static_cast<std::size_t>(L)], m.lnf_g, m.lnf_b,
                                m.config.eps) *
                m.unembed;
  Matrix got = logit_lens(m, tr.hidden[static_cast<std::size_t>(L - 1)], Variant::kExtended);
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(LogitLens, DimensionMismatch) {
  auto m = jittered_model(small_config(), 10);
  EXPECT_THROW(logit_lens(m, Matrix::Zero(3, m.d_model() + 1)), std::invalid_argument);
  Translator t{Matrix::Identity(4, 4), RowVector::Zero(4)};
  EXPECT_THROW(lens::tuned_lens(m, t, Matrix::Zero(3, m.d_model())), std::invalid_argument);
}

TEST(TunedLens, IdentityEqualsLogitLensEveryLayer) {
  auto cfg = small_config(4);
  auto m = jittered_model(cfg, 11);
  auto lens = TunedLens::identity(cfg);
  auto tr = model::forward_trace(m, testutil::random_tokens(13, 257, 12));
  for (int l = 0; l <= cfg.n_layers; ++l) {
    const Matrix& h = tr.hidden[static_cast<std::size_t>(l)];
    EXPECT_TRUE(apply(lens, m, l, h) == logit_lens(m, h)) << "layer " << l;
  }
  for (const auto& t : lens.translators) {
    EXPECT_TRUE(t.A == Matrix::Identity(cfg.d_model, cfg.d_model));
    EXPECT_TRUE(t.b.isZero(0));
  }
}

TEST(TunedLens, ArbitraryTranslatorMatchesDirectArithmetic) {
  auto m = jittered_model(small_config(), 13);
  auto tr = model::forward_trace(m, testutil::random_tokens(8, 257, 14));
  Translator t = random_translator(m.d_model(), 15);
  const Matrix& h = tr.hidden[1];
  const int d = m.d_model();
  Matrix x(h.rows(), d);
  for (Eigen::Index r = 0; r < h.rows(); ++r)
    for (int i = 0; i < d; ++i) {
      double s = t.b(i);
      for (int j = 0; j < d; ++j) s += t.A(i, j) * h(r, j);
      x(r, i) = s;
    }
  Matrix want = layer_norm_rows(x, m.lnf_g, m.lnf_b, m.config.eps) * m.unembed;
  EXPECT_LT((lens::tuned_lens(m, t, h) - want).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(TunedLens, ApplyBounds) {
  auto cfg = small_config(2);
  auto m = jittered_model(cfg, 16);
  auto lens = TunedLens::identity(cfg);
  Matrix h = Matrix::Zero(2, cfg.d_model);
  EXPECT_THROW(apply(lens, m, -1, h), std::out_of_range);
  EXPECT_THROW(apply(lens, m, 3, h), std::out_of_range);
  auto wrong = TunedLens::identity(small_config(3));
  EXPECT_THROW(wrong.check_compatible(cfg), std::invalid_argument);
}

TEST(Eval, IdentityFinalLayerMatchesModel) {
  auto cfg = small_config();
  auto m = jittered_model(cfg, 17);
  auto seqs = testutil::random_corpus(3, 12, 257, 18);
  auto lens = TunedLens::identity(cfg);
  auto rep = eval_per_layer(&lens, m, seqs);
  ASSERT_EQ(rep.layers.size(), static_cast<std::size_t>(cfg.n_layers + 1));
  double ce = 0;
  for (const auto& s : seqs) ce += model::sequence_cross_entropy(model::forward_trace(m, s).logits, s);
  ce /= static_cast<double>(seqs.size());
  EXPECT_NEAR(rep.layers.back().ce_nats, ce, 1e-12);
  EXPECT_NEAR(rep.layers.back().perplexity, std::exp(ce), 1e-9);
  EXPECT_LT(std::abs(rep.layers.back().kl_bits), 1e-9);
  EXPECT_LT(rep.layers.back().bias_bits, 1e-9);
  EXPECT_LT(marginal_bias(&lens, m, seqs, cfg.n_layers), 1e-9);
}

TEST(Eval, MatchesLoopOracle) {
  auto cfg = small_config();
  auto m = jittered_model(cfg, 19);
  auto seqs = testutil::random_corpus(2, 9, 257, 20);
  auto lens = random_lens(cfg, 21);
  auto rep = eval_per_layer(&lens, m, seqs);
  for (int l = 0; l <= cfg.n_layers; ++l) {
    double ce = 0, kl = 0;
    long n = 0;
    for (const auto& s : seqs) {
      auto tr = model::forward_trace(m, s);
      Matrix q = apply(lens, m, l, tr.hidden[static_cast<std::size_t>(l)]);
      ce += ce_loop(q, s);
      for (Eigen::Index r = 0; r < q.rows(); ++r, ++n)
        kl += kl_loop(probs_of(tr.logits, r), probs_of(q, r));
    }
    const auto& st = rep.layers[static_cast<std::size_t>(l)];
    EXPECT_NEAR(st.ce_nats, ce / 2, 1e-9);
    EXPECT_NEAR(st.kl_bits, kl / static_cast<double>(n) / std::log(2.0), 1e-9);
  }
}

TEST(Eval, UniformModelHasPerplexityV) {
  auto cfg = small_config();
  auto m = jittered_model(cfg, 22);
  m.unembed.setZero();
  auto rep = eval_per_layer(nullptr, m, testutil::random_corpus(2, 10, 257, 23));
  for (const auto& st : rep.layers) EXPECT_NEAR(st.perplexity, 257.0, 1e-9);
}

TEST(Eval, EmptyCorpusThrows) {
  auto m = jittered_model(small_config(), 24);
  EXPECT_THROW(eval_per_layer(nullptr, m, {}), std::invalid_argument);
  EXPECT_THROW(marginal_bias(nullptr, m, {}, 0), std::invalid_argument);
  EXPECT_THROW(train_translators(m, {}, {}), std::invalid_argument);
}

TEST(MarginalBias, HandAveragedMarginals) {
  auto cfg = small_config(2, 8, 11);
  auto m = jittered_model(cfg, 25, 0.5);
  std::vector<std::vector<int>> seqs = {{1, 2}, {3, 4, 5}};
  for (int l = 0; l <= cfg.n_layers; ++l) {
    std::vector<double> p(11, 0.0), q(11, 0.0);
    double n = 0;
    for (const auto& s : seqs) {
      auto tr = model::forward_trace(m, s);
      Matrix lq = logit_lens(m, tr.hidden[static_cast<std::size_t>(l)]);
      for (Eigen::Index r = 0; r < lq.rows(); ++r, n += 1) {
        auto pp = probs_of(tr.logits, r), qq = probs_of(lq, r);
        for (int v = 0; v < 11; ++v) {
          p[static_cast<std::size_t>(v)] += pp[static_cast<std::size_t>(v)];
          q[static_cast<std::size_t>(v)] += qq[static_cast<std::size_t>(v)];
        }
      }
    }
    for (auto& x : p) x /= n;
    for (auto& x : q) x /= n;
    EXPECT_NEAR(marginal_bias(nullptr, m, seqs, l), kl_loop(p, q) / std::log(2.0), 1e-10);
  }
}

TEST(Transfer, DiagonalZeroAndBruteForce) {
  auto cfg = small_config(2);
  auto m = jittered_model(cfg, 26);
  auto seqs = testutil::random_corpus(3, 8, 257, 27);
  auto lens = random_lens(cfg, 28);
  Matrix pen = transfer_penalty_matrix(lens, m, seqs);
  ASSERT_EQ(pen.rows(), 2);
  for (int l = 0; l < 2; ++l) EXPECT_EQ(pen(l, l), 0.0);
  auto ce = [&](int probe, int at) {
    double s = 0;
    for (const auto& seq : seqs) {
      auto tr = model::forward_trace(m, seq);
      s += ce_loop(lens::tuned_lens(m, lens.translators[static_cast<std::size_t>(probe)],
                              tr.hidden[static_cast<std::size_t>(at)]),
                   seq);
    }
    return s / static_cast<double>(seqs.size());
  };
  for (int probe = 0; probe < 2; ++probe)
    for (int at = 0; at < 2; ++at)
      EXPECT_NEAR(pen(probe, at), ce(probe, at) - ce(at, at), 1e-9);
}

TEST(Transfer, SameModelIdenticalAndConfigMismatch) {
  auto cfg = small_config();
  auto m = jittered_model(cfg, 29);
  auto seqs = testutil::random_corpus(2, 8, 257, 30);
  auto lens = random_lens(cfg, 31);
  auto a = transfer_lens(lens, m, m, seqs);
  auto b = eval_per_layer(&lens, m, seqs);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    EXPECT_EQ(a.layers[l].ce_nats, b.layers[l].ce_nats);
    EXPECT_EQ(a.layers[l].kl_bits, b.layers[l].kl_bits);
  }
  auto other = jittered_model(small_config(3, 24), 32);
  EXPECT_THROW(transfer_lens(lens, m, other, seqs), std::invalid_argument);
}

TEST(Covariance, Examples) {
  numerics::Rng rng(33);
  Matrix x = rng.normal_matrix(10, 4, 1.0);
  Matrix s = x.transpose() * x;
  EXPECT_NEAR(covariance_cosine(s, s), 1.0, 1e-12);
  EXPECT_NEAR(covariance_cosine(s, -s), -1.0, 1e-12);
  Matrix y = rng.normal_matrix(10, 4, 1.0);
  Matrix t = y.transpose() * y;
  double dot = 0, ns = 0, nt = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      dot += s(i, j) * t(i, j);
      ns += s(i, j) * s(i, j);
      nt += t(i, j) * t(i, j);
    }
  EXPECT_NEAR(covariance_cosine(s, t), dot / std::sqrt(ns * nt), 1e-12);
  EXPECT_THROW(covariance_cosine(s, Matrix::Zero(4, 4)), std::domain_error);
}

TEST(Covariance, DropOutlierDims) {
  Matrix s = Matrix::Zero(3, 3), t = Matrix::Zero(3, 3);
  s.diagonal() << 100, 1, 2;
  t.diagonal() << 1, 2, 50;
  t(0, 1) = t(1, 0) = 0.5;
  // Dims 0 and 2 are dropped (top-1 of each), leaving the 1x1 block [1] vs [2].
  EXPECT_NEAR(covariance_similarity(s, t, 1), 1.0, 1e-12);
  EXPECT_THROW(covariance_similarity(s, t, 3), std::invalid_argument);
}

TEST(Covariance, HiddenCovarianceMatchesTwoPass) {
  auto cfg = small_config();
  auto m = jittered_model(cfg, 34);
  auto seqs = testutil::random_corpus(2, 7, 257, 35);
  Matrix all(14, cfg.d_model);
  for (int i = 0; i < 2; ++i)
    all.middleRows(7 * i, 7) = model::forward_trace(m, seqs[static_cast<std::size_t>(i)]).hidden[2];
  Matrix c = all.rowwise() - all.colwise().mean();
  Matrix want = c.transpose() * c / 13.0;
  EXPECT_LT((hidden_covariance(m, seqs, 2) - want).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_NEAR(covariance_similarity(m, seqs, 1, 1), 1.0, 1e-12);
}

TEST(Distillation, GradientMatchesFiniteDifferences) {
  auto cfg = small_config(2, 8, 11);
  cfg.n_heads = 2;
  auto m = jittered_model(cfg, 36, 0.3);
  for (bool ifb : {false, true}) {
    Matrix h(10, 8), target(10, 11);
    for (int s = 0; s < 2; ++s) {
      auto tr = model::forward_trace(m, testutil::random_tokens(5, 11, 37 + static_cast<std::uint64_t>(s)));
      h.middleRows(5 * s, 5) = tr.hidden[1];
      target.middleRows(5 * s, 5) = tr.logits;
    }
    Translator t = random_translator(8, 38);
    Matrix gA;
    RowVector gb;
    distillation_loss(m, t, h, target, ifb, 2, &gA, &gb);
    Matrix fdA = fd::central(
        [&](const Matrix& A) { return distillation_loss(m, {A, t.b}, h, target, ifb, 2); }, t.A);
    Matrix fdb = fd::central(
        [&](const Matrix& b) { return distillation_loss(m, {t.A, b.row(0)}, h, target, ifb, 2); },
        Matrix(t.b));
    EXPECT_LT(fd::relative_error(gA, fdA), 1e-4) << "ifb " << ifb;
    EXPECT_LT(fd::relative_error(Matrix(gb), fdb), 1e-4) << "ifb " << ifb;
  }
}

TEST(Distillation, LossIsMeanKlOverPositions) {
  auto cfg = small_config(2, 8, 11);
  auto m = jittered_model(cfg, 39, 0.3);
  auto tr = model::forward_trace(m, testutil::random_tokens(6, 11, 40));
  Translator t = random_translator(8, 41);
  Matrix q = lens::tuned_lens(m, t, tr.hidden[0]);
  double want = 0;
  for (Eigen::Index r = 0; r < q.rows(); ++r) want += kl_loop(probs_of(tr.logits, r), probs_of(q, r));
  EXPECT_NEAR(distillation_loss(m, t, tr.hidden[0], tr.logits, false, 1), want / 6, 1e-10);
}

TEST(Training, StepZeroLossIsLogitLensKlAndKlDecreases) {
  auto cfg = small_config(3, 16, 257);
  auto m = jittered_model(cfg, 42, 0.2);
  auto seqs = testutil::random_corpus(8, 16, 257, 43);
  std::vector<Matrix> before;
  m.for_each_parameter([&](const std::string&, const Matrix& w) { before.push_back(w); });

  TrainOptions opt;
  opt.steps = 60;
  opt.tokens_per_step = 8 * 16;
  TrainHistory hist;
  auto lens = train_translators(m, seqs, opt, &hist);
  ASSERT_EQ(hist.loss.size(), 60u);

  auto plain = eval_per_layer(nullptr, m, seqs);
  auto tuned = eval_per_layer(&lens, m, seqs);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto i = static_cast<std::size_t>(l);
    EXPECT_NEAR(hist.loss[0][i] / std::log(2.0), plain.layers[i].kl_bits, 1e-9);
    EXPECT_LT(tuned.layers[i].kl_bits, plain.layers[i].kl_bits) << "layer " << l;
  }
  std::size_t k = 0;
  m.for_each_parameter([&](const std::string& name, const Matrix& w) {
    EXPECT_TRUE(w == before[k++]) << name;
  });
}

TEST(Training, BiasOnlyKeepsIdentity) {
  auto cfg = small_config(2, 16, 257);
  auto m = jittered_model(cfg, 44, 0.2);
  auto seqs = testutil::random_corpus(4, 16, 257, 45);
  TrainOptions opt;
  opt.steps = 20;
  opt.bias_only = true;
  auto lens = train_translators(m, seqs, opt);
  for (const auto& t : lens.translators) {
    EXPECT_TRUE(t.A == Matrix::Identity(16, 16));
    EXPECT_GT(t.b.norm(), 0.0);
  }
}

TEST(Training, DeterministicUnderSeed) {
  auto cfg = small_config(2, 16, 257);
  auto m = jittered_model(cfg, 46, 0.2);
  auto seqs = testutil::random_corpus(6, 8, 257, 47);
  TrainOptions opt;
  opt.steps = 10;
  opt.tokens_per_step = 16;
  auto a = train_translators(m, seqs, opt);
  auto b = train_translators(m, seqs, opt);
  for (std::size_t l = 0; l < a.translators.size(); ++l) {
    EXPECT_TRUE(a.translators[l].A == b.translators[l].A);
    EXPECT_TRUE(a.translators[l].b == b.translators[l].b);
  }
}

TEST(LensFile, RoundTrip) {
  auto cfg = small_config();
  auto lens = random_lens(cfg, 48, true);
  auto path = std::filesystem::temp_directory_path() / "tl_lens_roundtrip.tlns";
  save_lens(path, lens, cfg);
  auto back = load_lens(path, cfg);
  EXPECT_TRUE(back.include_final_block);
  for (std::size_t l = 0; l < lens.translators.size(); ++l) {
    EXPECT_TRUE(back.translators[l].A == lens.translators[l].A.cast<float>().cast<double>());
    EXPECT_TRUE(back.translators[l].b == lens.translators[l].b.cast<float>().cast<double>());
  }
  auto path2 = std::filesystem::temp_directory_path() / "tl_lens_roundtrip2.tlns";
  save_lens(path2, back, cfg);
  EXPECT_EQ(io::serialize(io::load(path)), io::serialize(io::load(path2)));
  EXPECT_THROW(load_lens(path, small_config(3, 24)), std::runtime_error);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST(TunedLens, BackwardMatchesFiniteDifferences) {
  auto cfg = small_config(2, 8, 11);
  auto m = jittered_model(cfg, 49, 0.3);
  Translator t = random_translator(8, 50);
  numerics::Rng rng(51);
  Matrix h = rng.normal_matrix(6, 8, 1.0), w = rng.normal_matrix(6, 11, 1.0);
  for (bool ifb : {false, true}) {
    Matrix g = tuned_lens_backward(m, t, h, w, ifb, 1);
    Matrix num = fd::central(
        [&](const Matrix& x) { return lens::tuned_lens(m, t, x, ifb).cwiseProduct(w).sum(); }, h);
    EXPECT_LT(fd::relative_error(g, num), 1e-6) << "ifb " << ifb;
  }
}
