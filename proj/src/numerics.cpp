#include "tuned_lens/numerics.hpp"

#include "tuned_lens/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tuned_lens::numerics {

Distribution::Distribution(Vector probs) : probs_(std::move(probs)) {
  if (probs_.size() == 0) throw std::invalid_argument("Distribution: empty");
  for (Eigen::Index i = 0; i < probs_.size(); ++i) {
    if (!std::isfinite(probs_[i]) || probs_[i] < 0)
      throw std::invalid_argument("Distribution: negative or non-finite entry");
  }
  if (std::abs(probs_.sum() - 1.0) > 1e-9)
    throw std::invalid_argument("Distribution: entries do not sum to 1");
}

Distribution Distribution::normalized(Vector weights) {
  double s = weights.sum();
  if (!(s > 0) || !std::isfinite(s))
    throw std::invalid_argument("Distribution::normalized: nonpositive total");
  return Distribution(weights / s);
}

Distribution Distribution::uniform(Eigen::Index size) {
  if (size <= 0) throw std::invalid_argument("Distribution::uniform: empty");
  return Distribution(Vector::Constant(size, 1.0 / static_cast<double>(size)));
}

Distribution softmax(const Vector& logits) {
  if (logits.size() == 0) throw std::invalid_argument("softmax: empty input");
  if (!logits.allFinite()) throw std::invalid_argument("softmax: non-finite logits");
  Vector e = (logits.array() - logits.maxCoeff()).exp();
  return Distribution(e / e.sum());
}

Distribution softmax(std::span<const double> logits) {
  Vector v = Eigen::Map<const Vector>(logits.data(), static_cast<Eigen::Index>(logits.size()));
  return softmax(v);
}

Matrix log_softmax_rows(const Matrix& logits) { return kernels::log_softmax<double>(logits); }

Vector layer_norm(const Vector& x, const Vector& gamma, const Vector& beta, double eps) {
  if (x.size() == 0) throw std::invalid_argument("layer_norm: empty input");
  if (gamma.size() != x.size() || beta.size() != x.size())
    throw std::invalid_argument("layer_norm: parameter size mismatch");
  Matrix row = x.transpose();
  Matrix out = kernels::layer_norm<double>(row, Matrix(gamma.transpose()),
                                           Matrix(beta.transpose()), eps);
  return out.row(0).transpose();
}

double kl_divergence(const Distribution& p, const Distribution& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double total = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] == 0) continue;
    if (q[i] <= 0) throw std::domain_error("kl_divergence: q has zero mass where p is positive");
    total += p[i] * std::log2(p[i] / q[i]);
  }
  return std::max(total, 0.0);
}

double kl_bits_from_logprobs(const Eigen::Ref<const RowVector>& logp,
                             const Eigen::Ref<const RowVector>& logq) {
  double total = 0;
  for (Eigen::Index i = 0; i < logp.size(); ++i) {
    double p = std::exp(logp[i]);
    if (p == 0) continue;
    total += p * (logp[i] - logq[i]);
  }
  return total * kNatsToBits;
}

double perplexity(double mean_nats) { return std::exp(mean_nats); }

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman_rho(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman_rho: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("spearman_rho: need at least two samples");
  std::vector<double> rx = average_ranks(x);
  std::vector<double> ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0)
    throw std::domain_error("spearman_rho: undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double auroc(std::span<const double> pos_scores, std::span<const double> neg_scores) {
  if (pos_scores.empty() || neg_scores.empty())
    throw std::invalid_argument("auroc: both classes must be nonempty");
  // Rank-sum form of the Mann-Whitney statistic; average ranks give ties 1/2.
  std::vector<double> all(pos_scores.begin(), pos_scores.end());
  all.insert(all.end(), neg_scores.begin(), neg_scores.end());
  std::vector<double> ranks = average_ranks(all);
  double rank_sum = 0;
  for (std::size_t i = 0; i < pos_scores.size(); ++i) rank_sum += ranks[i];
  const double np = static_cast<double>(pos_scores.size());
  const double nn = static_cast<double>(neg_scores.size());
  double u = rank_sum - np * (np + 1) / 2;
  return u / (np * nn);
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile: empty input");
  if (q < 0 || q > 100) throw std::invalid_argument("percentile: q outside [0, 100]");
  std::sort(values.begin(), values.end());
  double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  auto hi = static_cast<std::size_t>(std::ceil(pos));
  double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

namespace {

void check_bootstrap_args(int n_resamples, double level) {
  if (n_resamples < 100) throw std::invalid_argument("bootstrap: n_resamples must be >= 100");
  if (!(level > 0 && level < 1)) throw std::invalid_argument("bootstrap: level outside (0, 1)");
}

Interval interval_from(std::vector<double> stats, double level) {
  double tail = (1 - level) / 2 * 100;
  return {percentile(stats, tail), percentile(stats, 100 - tail)};
}

}  // namespace

Interval bootstrap_ci(std::size_t n_samples,
                      const std::function<double(std::span<const std::size_t>)>& statistic,
                      int n_resamples, double level, std::uint64_t seed) {
  check_bootstrap_args(n_resamples, level);
  if (n_samples < 2) throw std::invalid_argument("bootstrap: insufficient data");
  Rng rng(seed);
  std::vector<std::size_t> idx(n_samples);
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(n_resamples));
  for (int r = 0; r < n_resamples; ++r) {
    for (auto& i : idx) i = rng.index(n_samples);
    stats.push_back(statistic(idx));
  }
  return interval_from(std::move(stats), level);
}

Interval auroc_ci(std::span<const double> pos_scores, std::span<const double> neg_scores,
                  int n_resamples, double level, std::uint64_t seed) {
  check_bootstrap_args(n_resamples, level);
  if (pos_scores.empty() || neg_scores.empty())
    throw std::invalid_argument("auroc_ci: both classes must be nonempty");
  Rng rng(seed);
  std::vector<double> pos(pos_scores.size()), neg(neg_scores.size());
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(n_resamples));
  for (int r = 0; r < n_resamples; ++r) {
    for (auto& v : pos) v = pos_scores[rng.index(pos_scores.size())];
    for (auto& v : neg) v = neg_scores[rng.index(neg_scores.size())];
    stats.push_back(auroc(pos, neg));
  }
  return interval_from(std::move(stats), level);
}

Vector Rng::normal_vector(Eigen::Index n) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
  return v;
}

Matrix Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal() * stddev;
  return m;
}

Vector Rng::unit_vector(Eigen::Index n) {
  Vector v = normal_vector(n);
  return v / v.norm();
}

}  // namespace tuned_lens::numerics
