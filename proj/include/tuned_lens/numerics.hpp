#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "tuned_lens/matrix.hpp"

namespace tuned_lens::numerics {

/// A probability vector over a finite outcome set. Construction validates
/// that entries are nonnegative and sum to one within 1e-9.
class Distribution {
 public:
  Distribution() = default;
  explicit Distribution(Vector probs);

  /// Builds from any nonnegative weights by dividing by their sum.
  static Distribution normalized(Vector weights);
  static Distribution uniform(Eigen::Index size);

  const Vector& probs() const { return probs_; }
  Eigen::Index size() const { return probs_.size(); }
  double operator[](Eigen::Index i) const { return probs_[i]; }

 private:
  Vector probs_;
};

Distribution softmax(std::span<const double> logits);
Distribution softmax(const Vector& logits);

/// Numerically stable row-wise log-softmax in 64-bit.
Matrix log_softmax_rows(const Matrix& logits);

/// gamma * (x - mean) / sqrt(var + eps) + beta over a single vector.
Vector layer_norm(const Vector& x, const Vector& gamma, const Vector& beta, double eps = 1e-5);

/// KL(p || q) in bits. Throws when q is zero somewhere p is positive.
double kl_divergence(const Distribution& p, const Distribution& q);

/// KL(p || q) in bits from log-probabilities (natural log), no validation.
double kl_bits_from_logprobs(const Eigen::Ref<const RowVector>& logp,
                             const Eigen::Ref<const RowVector>& logq);

inline constexpr double kNatsToBits = 1.4426950408889634;

/// exp(mean cross-entropy in nats).
double perplexity(double mean_nats);

/// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman rank correlation with average-rank ties. Throws on length
/// mismatch, fewer than two samples, or a constant input.
double spearman_rho(std::span<const double> x, std::span<const double> y);

/// Mann-Whitney AUROC: P(pos > neg) + 0.5 * P(pos == neg).
double auroc(std::span<const double> pos_scores, std::span<const double> neg_scores);

/// Linear-interpolation percentile (q in [0, 100]) of unsorted values.
double percentile(std::vector<double> values, double q);

struct Interval {
  double lo = 0;
  double hi = 0;
};

/// Percentile bootstrap. `statistic` receives the resampled sample indices
/// (drawn with replacement from [0, n_samples)).
Interval bootstrap_ci(std::size_t n_samples,
                      const std::function<double(std::span<const std::size_t>)>& statistic,
                      int n_resamples, double level, std::uint64_t seed);

/// Stratified bootstrap interval for AUROC: each class is resampled
/// separately so every replicate contains both classes.
Interval auroc_ci(std::span<const double> pos_scores, std::span<const double> neg_scores,
                  int n_resamples, double level, std::uint64_t seed);

/// Seeded pseudo-random source used throughout the toolkit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal() { return normal_(engine_); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

  Vector normal_vector(Eigen::Index n);
  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0);
  Vector unit_vector(Eigen::Index n);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

}  // namespace tuned_lens::numerics
