#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fd.hpp"
#include "tuned_lens/lbfgs.hpp"
#include "tuned_lens/numerics.hpp"
#include "tuned_lens/tape.hpp"

using namespace tuned_lens;
using namespace tuned_lens::numerics;

TEST(Softmax, Examples) {
  auto a = softmax(Vector::Zero(2));
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  for (double c : {-50.0, 0.0, 7.5, 1e3}) {
    auto b = softmax(Vector::Constant(3, c));
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(b[i], 1.0 / 3, 1e-15);
  }
  Vector z(2);
  z << std::log(1.0), std::log(3.0);
  auto c = softmax(z);
  EXPECT_NEAR(c[0], 0.25, 1e-15);
  EXPECT_NEAR(c[1], 0.75, 1e-15);
}

TEST(Softmax, Errors) {
  EXPECT_THROW(softmax(Vector()), std::invalid_argument);
  Vector bad(2);
  bad << 0, std::nan("");
  EXPECT_THROW(softmax(bad), std::invalid_argument);
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Vector z = rng.normal_vector(17) * 4;
    double c = rng.uniform(-100, 100);
    auto p = softmax(z);
    auto q = softmax(Vector(z.array() + c));
    EXPECT_LT((p.probs() - q.probs()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(p.probs().sum(), 1.0, 1e-12);
  }
}

TEST(LayerNorm, Examples) {
  Vector g = Vector::Constant(3, 2.5), b(3);
  b << 0.1, -0.2, 0.3;
  Vector out = layer_norm(Vector::Constant(3, 4.0), g, b);
  EXPECT_LT((out - b).cwiseAbs().maxCoeff(), 1e-12);

  Vector x(2);
  x << 1, -1;
  Vector y = layer_norm(x, Vector::Ones(2), Vector::Zero(2), 0.0);
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], -1.0);

  Vector beta(3);
  beta << 1, 2, 3;
  Vector z = layer_norm(Vector::Constant(3, 2.0), Vector::Ones(3), beta, 1e-5);
  EXPECT_LT((z - beta).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(LayerNorm, MatchesFormula) {
  Rng rng(5);
  Vector x = rng.normal_vector(9), g = rng.normal_vector(9), b = rng.normal_vector(9);
  double mean = x.mean();
  double var = (x.array() - mean).square().mean();
  Vector expect = g.array() * (x.array() - mean) / std::sqrt(var + 1e-5) + b.array();
  EXPECT_LT((layer_norm(x, g, b) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Kl, Examples) {
  Distribution p(Vector::Constant(4, 0.25));
  EXPECT_EQ(kl_divergence(p, p), 0.0);

  Vector a(2), b(2);
  a << 1, 0;
  b << 0.5, 0.5;
  EXPECT_NEAR(kl_divergence(Distribution(a), Distribution(b)), 1.0, 1e-15);

  Vector c(2), d(2);
  c << 0.25, 0.75;
  d << 0.75, 0.25;
  double oracle = 0.25 * std::log2(0.25 / 0.75) + 0.75 * std::log2(0.75 / 0.25);
  EXPECT_NEAR(kl_divergence(Distribution(c), Distribution(d)), oracle, 1e-15);
  EXPECT_NEAR(oracle, 0.7925, 5e-5);
}

TEST(Kl, SupportViolation) {
  Vector a(2), b(2);
  a << 0.5, 0.5;
  b << 1, 0;
  EXPECT_THROW(kl_divergence(Distribution(a), Distribution(b)), std::domain_error);
}

TEST(Kl, NonNegative) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    auto p = softmax(rng.normal_vector(6));
    auto q = softmax(rng.normal_vector(6));
    double k = kl_divergence(p, q);
    EXPECT_GE(k, 0.0);
    if ((p.probs() - q.probs()).cwiseAbs().maxCoeff() >= 1e-12) {
      EXPECT_GT(k, 0.0);
    }
  }
}

TEST(Perplexity, Examples) {
  EXPECT_EQ(perplexity(0), 1.0);
  EXPECT_NEAR(perplexity(std::log(257.0)), 257.0, 1e-10);

  // three tokens, hand-picked predicted probabilities of the observed token
  std::vector<double> probs = {0.5, 0.25, 0.125};
  double mean = 0;
  for (double p : probs) mean -= std::log(p) / 3;
  EXPECT_NEAR(perplexity(mean), std::pow(0.5 * 0.25 * 0.125, -1.0 / 3), 1e-12);
}

TEST(Spearman, Examples) {
  std::vector<double> x = {1, 2, 3, 4, 5};
  std::vector<double> r = {5, 4, 3, 2, 1};
  EXPECT_DOUBLE_EQ(spearman_rho(x, x), 1.0);
  EXPECT_DOUBLE_EQ(spearman_rho(x, r), -1.0);
  std::vector<double> a = {1, 2, 3}, b = {1, 3, 2};
  EXPECT_NEAR(spearman_rho(a, b), 0.5, 1e-15);
}

TEST(Spearman, Errors) {
  std::vector<double> a = {1, 2}, b = {1, 2, 3}, c = {2, 2, 2};
  std::vector<double> one = {1};
  EXPECT_THROW(spearman_rho(a, b), std::invalid_argument);
  EXPECT_THROW(spearman_rho(one, one), std::invalid_argument);
  EXPECT_THROW(spearman_rho(b, c), std::domain_error);
}

TEST(Spearman, TiesUseAverageRanks) {
  std::vector<double> v = {10, 20, 20, 30};
  auto r = average_ranks(v);
  EXPECT_EQ(r, (std::vector<double>{1, 2.5, 2.5, 4}));
}

double pairwise_auroc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return wins / static_cast<double>(pos.size() * neg.size());
}

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(std::vector<double>{2, 3}, std::vector<double>{0, 1}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{1}, std::vector<double>{1}), 0.5);
  EXPECT_EQ(auroc(std::vector<double>{3, 1}, std::vector<double>{2, 0}), 0.75);
  EXPECT_THROW(auroc(std::vector<double>{}, std::vector<double>{1}), std::invalid_argument);
}

TEST(Auroc, MatchesPairwiseCountingAndComplements) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> pos(1 + rng.index(12)), neg(1 + rng.index(12));
    // coarse values so ties are common
    for (auto& v : pos) v = std::round(rng.normal() * 2);
    for (auto& v : neg) v = std::round(rng.normal() * 2);
    EXPECT_EQ(auroc(pos, neg), pairwise_auroc(pos, neg));
    EXPECT_EQ(auroc(pos, neg) + auroc(neg, pos), 1.0);
  }
}

TEST(Bootstrap, Examples) {
  auto constant = [](std::span<const std::size_t>) { return 0.3; };
  auto ci = bootstrap_ci(10, constant, 200, 0.95, 1);
  EXPECT_EQ(ci.lo, 0.3);
  EXPECT_EQ(ci.hi, 0.3);

  auto sep = auroc_ci(std::vector<double>{5, 6, 7}, std::vector<double>{1, 2}, 500, 0.95, 2);
  EXPECT_EQ(sep.lo, 1.0);
  EXPECT_EQ(sep.hi, 1.0);

  std::vector<double> data = {1, 4, 2, 8, 5, 7, 3, 9, 6, 0};
  auto mean_of = [&](std::span<const std::size_t> idx) {
    double s = 0;
    for (auto i : idx) s += data[i];
    return s / static_cast<double>(idx.size());
  };
  auto a = bootstrap_ci(data.size(), mean_of, 1000, 0.95, 7);
  auto b = bootstrap_ci(data.size(), mean_of, 1000, 0.95, 7);
  EXPECT_EQ(a.lo, b.lo);
  EXPECT_EQ(a.hi, b.hi);
  EXPECT_LE(a.lo, 4.5);
  EXPECT_GE(a.hi, 4.5);
}

TEST(Bootstrap, Errors) {
  auto s = [](std::span<const std::size_t>) { return 0.0; };
  EXPECT_THROW(bootstrap_ci(10, s, 50, 0.95, 0), std::invalid_argument);
  EXPECT_THROW(bootstrap_ci(1, s, 100, 0.95, 0), std::invalid_argument);
}

// ---- tape ----

using Tape = GradientTape<double>;

TEST(Tape, SquareGradient) {
  Tape tape;
  auto x = tape.leaf(Matrix::Constant(1, 1, 3.0));
  auto y = tape.sum(tape.hadamard(x, x));
  tape.backward(y);
  auto f = [](const Matrix& m) { return m(0, 0) * m(0, 0); };
  Matrix numeric = fd::central(f, Matrix::Constant(1, 1, 3.0));
  EXPECT_NEAR(tape.grad(x)(0, 0), 6.0, 1e-12);
  EXPECT_NEAR(numeric(0, 0), 6.0, 1e-8);
}

TEST(Tape, ConstantAndDisconnectedGradientsAreZero) {
  Tape tape;
  auto x = tape.leaf(Matrix::Constant(2, 2, 1.0));
  auto unused = tape.leaf(Matrix::Constant(3, 1, 2.0));
  auto c = tape.constant(Matrix::Constant(2, 2, 5.0));
  auto y = tape.sum(tape.hadamard(c, tape.scale(c, 2.0)));
  tape.backward(y);
  EXPECT_EQ(tape.grad(x).norm(), 0.0);
  EXPECT_EQ(tape.grad(unused).norm(), 0.0);
  EXPECT_EQ(tape.grad(unused).rows(), 3);
}

TEST(Tape, ReplayIsBitIdentical) {
  Rng rng(4);
  Tape tape;
  auto x = tape.leaf(rng.normal_matrix(4, 6));
  auto w = tape.leaf(rng.normal_matrix(6, 5));
  auto y = tape.log_softmax(tape.gelu(tape.matmul(x, w)));
  Matrix before = tape.value(y);
  tape.replay();
  EXPECT_TRUE((tape.value(y).array() == before.array()).all());
}

TEST(Tape, KlGradientMatchesFiniteDifferences) {
  Rng rng(9);
  Matrix target = rng.normal_matrix(3, 7);
  for (int point = 0; point < 10; ++point) {
    Matrix z0 = rng.normal_matrix(3, 7);
    Tape tape;
    auto t = tape.constant(target);
    auto z = tape.leaf(z0);
    tape.backward(tape.kl_divergence(t, z));
    auto f = [&](const Matrix& zz) {
      Tape inner;
      return inner.value(inner.kl_divergence(inner.constant(target), inner.constant(zz)))(0, 0);
    };
    EXPECT_LT(fd::relative_error(tape.grad(z), fd::central(f, z0)), 1e-4);
  }
}

TEST(Tape, KlValueMatchesDirectSum) {
  Rng rng(10);
  Matrix a = rng.normal_matrix(2, 5), b = rng.normal_matrix(2, 5);
  Tape tape;
  double v = tape.value(tape.kl_divergence(tape.constant(a), tape.constant(b)))(0, 0);
  double direct = 0;
  for (int r = 0; r < 2; ++r) {
    auto p = softmax(Vector(a.row(r).transpose()));
    auto q = softmax(Vector(b.row(r).transpose()));
    direct += kl_divergence(p, q) / kNatsToBits / 2;
  }
  EXPECT_NEAR(v, direct, 1e-12);
}

// Every differentiable op, composed, against central differences.
TEST(Tape, CompositeGradientsMatchFiniteDifferences) {
  Rng rng(12);
  const int n_seq = 2, d = 8, heads = 2;
  std::vector<int> ids = {1, 4, 2, 0, 3, 3};
  std::vector<int> targets = {2, 0, -1, 1, 4, 2};
  for (int point = 0; point < 10; ++point) {
    Matrix table0 = rng.normal_matrix(5, d);
    Matrix g0 = rng.normal_matrix(1, d);
    Matrix w0 = rng.normal_matrix(d, 3 * d, 0.5);
    Matrix u0 = rng.normal_matrix(d, 5, 0.5);
    auto build = [&](Tape& tape, const Matrix& table, const Matrix& g, const Matrix& w,
                     const Matrix& u, bool leaves, std::vector<Tape::Var>& vars) {
      auto put = [&](const Matrix& m) { return leaves ? tape.leaf(m) : tape.constant(m); };
      auto vt = put(table), vg = put(g), vw = put(w), vu = put(u);
      vars = {vt, vg, vw, vu};
      auto h = tape.gather_rows(vt, ids);
      auto n = tape.layer_norm(h, vg, tape.constant(Matrix::Zero(1, d)), 1e-5);
      auto qkv = tape.matmul(n, vw);
      auto att = tape.causal_attention(qkv, n_seq, heads);
      auto mixed = tape.add(tape.gelu(att), tape.normalize(h));
      auto logits = tape.matmul(mixed, vu);
      auto ce = tape.cross_entropy(logits, targets);
      auto t2 = tape.transpose(tape.sub(logits, tape.scale(logits, 0.5)));
      return tape.add(ce, tape.mean(tape.hadamard(t2, t2)));
    };
    Tape tape;
    std::vector<Tape::Var> vars;
    tape.backward(build(tape, table0, g0, w0, u0, true, vars));
    std::vector<Matrix> base = {table0, g0, w0, u0};
    for (std::size_t which = 0; which < base.size(); ++which) {
      auto f = [&](const Matrix& m) {
        std::vector<Matrix> args = base;
        args[which] = m;
        Tape inner;
        std::vector<Tape::Var> unused;
        return inner.value(build(inner, args[0], args[1], args[2], args[3], false, unused))(0, 0);
      };
      EXPECT_LT(fd::relative_error(tape.grad(vars[which]), fd::central(f, base[which])), 1e-4)
          << "input " << which << " point " << point;
    }
  }
}

// ---- L-BFGS ----

TEST(Lbfgs, Rosenbrock) {
  Objective rosen = [](const Vector& x, Vector& g) {
    double a = 1 - x[0], b = x[1] - x[0] * x[0];
    g[0] = -2 * a - 400 * x[0] * b;
    g[1] = 200 * b;
    return a * a + 100 * b * b;
  };
  Vector x0(2);
  x0 << -1.2, 1;
  LbfgsOptions opt;
  opt.max_iterations = 200;
  auto res = lbfgs_minimize(rosen, x0, opt);
  EXPECT_EQ(res.status, LbfgsStatus::kConverged);
  EXPECT_NEAR(res.x[0], 1.0, 1e-6);
  EXPECT_NEAR(res.x[1], 1.0, 1e-6);
}

TEST(Lbfgs, WolfeConditionsHold) {
  Objective quad = [](const Vector& x, Vector& g) {
    g = 2 * x.cwiseProduct(Vector::LinSpaced(x.size(), 1, 10));
    return x.cwiseProduct(x).dot(Vector::LinSpaced(x.size(), 1, 10));
  };
  Vector x = Vector::Ones(10), g(10);
  double f = quad(x, g);
  LbfgsOptions opt;
  auto ls = strong_wolfe_line_search(quad, x, f, g, -g, 1.0, opt);
  ASSERT_TRUE(ls.ok);
  double d0 = g.dot(-g);
  EXPECT_LE(ls.value, f + opt.c1 * ls.step * d0);
  EXPECT_LE(std::abs(ls.gradient.dot(-g)), -opt.c2 * d0);
}

TEST(Lbfgs, NonFiniteObjectiveThrows) {
  Objective bad = [](const Vector& x, Vector& g) {
    g = x;
    return std::log(-1.0);
  };
  EXPECT_THROW(lbfgs_minimize(bad, Vector::Ones(2)), std::runtime_error);
}
