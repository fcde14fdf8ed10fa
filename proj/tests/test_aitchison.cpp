#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "tuned_lens/aitchison.hpp"
#include "tuned_lens/numerics.hpp"

using namespace tuned_lens;
using namespace tuned_lens::aitchison;
using testutil::jittered_model;
using testutil::small_config;

namespace {

Vector random_simplex(int n, numerics::Rng& rng) {
  Vector z = rng.normal_vector(n) * 1.5;
  return numerics::softmax(z).probs();
}

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

Matrix orthonormal_rows(int m, int d, std::uint64_t seed) {
  numerics::Rng rng(seed);
  Eigen::HouseholderQR<Matrix> qr(rng.normal_matrix(d, m, 1.0));
  Matrix q = qr.householderQ() * Matrix::Identity(d, m);
  return q.transpose();
}

}  // namespace

TEST(Inner, Examples) {
  numerics::Rng rng(1);
  Vector u = Vector::Constant(4, 0.25);
  for (int i = 0; i < 5; ++i) {
    Vector p = random_simplex(4, rng), w = random_simplex(4, rng);
    EXPECT_NEAR(inner(u, p, w), 0.0, 1e-15);
    Vector q = random_simplex(4, rng);
    EXPECT_EQ(inner(p, q, w), inner(q, p, w));
  }
  // clr([.5,.25,.25]) = ln2 * [2/3, -1/3, -1/3]; the inner product is -(ln 2)^2 / 9.
  double ln2 = std::log(2.0);
  EXPECT_NEAR(inner(vec({.5, .25, .25}), vec({.25, .5, .25}), Vector::Ones(3)), -ln2 * ln2 / 9, 1e-15);
  EXPECT_THROW(inner(vec({1, 0}), vec({.5, .5}), vec({.5, .5})), std::domain_error);
}

TEST(Inner, BilinearUnderPerturbation) {
  numerics::Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    Vector p = random_simplex(6, rng), q = random_simplex(6, rng), r = random_simplex(6, rng);
    Vector w = random_simplex(6, rng);
    EXPECT_NEAR(inner(add(p, q), r, w), inner(p, r, w) + inner(q, r, w), 1e-9);
  }
}

TEST(Sub, Examples) {
  numerics::Rng rng(3);
  Vector p = random_simplex(5, rng), q = random_simplex(5, rng);
  EXPECT_LT((sub(p, p) - Vector::Constant(5, 0.2)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((add(sub(p, q), q) - p).cwiseAbs().maxCoeff(), 1e-9);
  Vector direct(5);
  double z = 0;
  for (int i = 0; i < 5; ++i) z += direct(i) = p(i) / q(i);
  EXPECT_LT((sub(p, q) - direct / z).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((sub(p, Vector::Constant(5, 0.2)) - p).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_THROW(sub(vec({0, 1}), vec({.5, .5})), std::domain_error);
}

TEST(Similarity, Examples) {
  numerics::Rng rng(4);
  Vector s = random_simplex(7, rng), w = random_simplex(7, rng);
  EXPECT_NEAR(similarity(s, s, w), 1.0, 1e-12);
  EXPECT_NEAR(similarity(s, power(s, -1.0), w), -1.0, 1e-12);
  EXPECT_THROW(similarity(Vector::Constant(7, 1.0 / 7), s, w), std::domain_error);
  for (int i = 0; i < 1000; ++i) {
    double v = similarity(random_simplex(7, rng), random_simplex(7, rng), random_simplex(7, rng));
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Similarity, PoweringInvariance) {
  numerics::Rng rng(5);
  for (double alpha : {0.3, 2.0, -0.7, -3.0}) {
    Vector s = random_simplex(5, rng), r = random_simplex(5, rng), w = random_simplex(5, rng);
    double sign = alpha > 0 ? 1.0 : -1.0;
    EXPECT_NEAR(similarity(power(s, alpha), r, w), sign * similarity(s, r, w), 1e-9);
    EXPECT_NEAR(similarity(s, power(r, alpha), w), sign * similarity(s, r, w), 1e-9);
  }
  Vector p = random_simplex(5, rng), q = random_simplex(5, rng), w = random_simplex(5, rng);
  EXPECT_EQ(same_direction(p, q, w), inner(p, q, w) > 0);
}

TEST(FloorNormalize, ClampsZeros) {
  Vector p = floor_normalize(vec({1.0, 0.0}));
  EXPECT_GT(p(1), 0.0);
  EXPECT_NEAR(p.sum(), 1.0, 1e-15);
  RowVector huge(3);
  huge << 0, -2000, 5;
  EXPECT_GT(probs_from_logits(huge).minCoeff(), 0.0);
}

TEST(Stimulus, IdentityAndLinearToy) {
  numerics::Rng rng(6);
  Matrix W = rng.normal_matrix(4, 6, 1.0);
  LogitsFn lensf = [&](const Matrix& h) -> Matrix { return h * W; };
  Matrix h = rng.normal_matrix(3, 4, 1.0);
  Matrix none = stimulus(h, [](const Matrix& x) { return x; }, lensf);
  EXPECT_LT((none.array() - 1.0 / 6).abs().maxCoeff(), 1e-15);
  Vector v = rng.normal_vector(4).normalized();
  const double c = 0.8;
  Matrix s = stimulus(h, [&](const Matrix& x) -> Matrix { return x.rowwise() + c * v.transpose(); }, lensf);
  Vector want = numerics::softmax(Vector(c * W.transpose() * v)).probs();
  for (Eigen::Index r = 0; r < 3; ++r) EXPECT_LT((s.row(r).transpose() - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Response, IdentityAndIndependentOfStimulus) {
  auto cfg = small_config(3, 16, 257);
  auto m = jittered_model(cfg, 7);
  auto tr = model::forward_trace(m, testutil::random_tokens(6, 257, 8));
  const Matrix& h = tr.hidden[1];
  Matrix none = response(h, [](const Matrix& x) { return x; }, m, 1);
  EXPECT_LT((none.array() - 1.0 / 257).abs().maxCoeff(), 1e-15);
  numerics::Rng rng(9);
  Vector v = rng.normal_vector(16).normalized();
  auto g = [&](const Matrix& x) -> Matrix { return x.rowwise() + 2.0 * v.transpose(); };
  // A lens that cannot see v gives a zero stimulus, but the model still responds.
  Matrix Wperp = (Matrix::Identity(16, 16) - v * v.transpose()) * rng.normal_matrix(16, 257, 1.0);
  Matrix s = stimulus(h, g, [&](const Matrix& x) -> Matrix { return x * Wperp; });
  EXPECT_LT((s.array() - 1.0 / 257).abs().maxCoeff(), 1e-12);
  Matrix r = response(h, g, m, 1);
  EXPECT_GT((r.array() - 1.0 / 257).abs().maxCoeff(), 1e-6);
}

TEST(ResamplingAblate, Properties) {
  numerics::Rng rng(10);
  Matrix h = rng.normal_matrix(5, 8, 1.0), donor = rng.normal_matrix(5, 8, 1.0);
  Matrix B = orthonormal_rows(3, 8, 11);
  EXPECT_LT((resampling_ablate(h, h, B) - h).cwiseAbs().maxCoeff(), 1e-15);
  Matrix out = resampling_ablate(h, donor, B);
  EXPECT_LT((out * B.transpose() - donor * B.transpose()).cwiseAbs().maxCoeff(), 1e-9);
  Matrix perp = Matrix::Identity(8, 8) - B.transpose() * B;
  EXPECT_LT(((out - h) * perp).cwiseAbs().maxCoeff(), 1e-12);
  Matrix full = orthonormal_rows(8, 8, 12);
  EXPECT_LT((resampling_ablate(h, donor, full) - donor).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(resampling_ablate(h, donor, 2.0 * B), std::invalid_argument);
}

TEST(AlignmentSweep, FinalLayerIsOneAndBounded) {
  auto cfg = small_config(3, 16, 257);
  auto m = jittered_model(cfg, 13);
  auto seqs = testutil::random_corpus(4, 10, 257, 14);
  auto lens = lens::TunedLens::identity(cfg);
  std::vector<causal::CausalBasis> bases;
  for (int l = 0; l <= cfg.n_layers; ++l) {
    causal::CausalBasis b;
    b.layer = l;
    b.vectors = orthonormal_rows(4, 16, 20 + static_cast<std::uint64_t>(l));
    b.sigma.assign(4, 1.0);
    bases.push_back(b);
  }
  auto res = alignment_sweep(m, &lens, bases, seqs);
  ASSERT_EQ(res.size(), 4u);
  for (const auto& la : res) {
    EXPECT_GE(la.mean_similarity, -1.0);
    EXPECT_LE(la.mean_similarity, 1.0);
    EXPECT_EQ(la.n_tokens + la.n_skipped, 40);
  }
  EXPECT_NEAR(res.back().mean_similarity, 1.0, 1e-9);
  EXPECT_EQ(res.back().n_tokens, 40);
  auto again = alignment_sweep(m, &lens, bases, seqs);
  for (std::size_t i = 0; i < res.size(); ++i) EXPECT_EQ(res[i].mean_similarity, again[i].mean_similarity);
  EXPECT_THROW(alignment_sweep(m, &lens, bases, {seqs[0]}), std::invalid_argument);
}
