#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tuned_lens/causal.hpp"
#include "tuned_lens/lens.hpp"
#include "tuned_lens/matrix.hpp"
#include "tuned_lens/model.hpp"

namespace tuned_lens::aitchison {

/// Entries are clamped to this before any logarithm.
inline constexpr double kFloor = 1e-12;

/// Clamp at kFloor and renormalize.
Vector floor_normalize(const Vector& p);
/// softmax(logits), then floor_normalize.
Vector probs_from_logits(const Eigen::Ref<const RowVector>& logits);

/// Weighted centered log-ratio: log p - sum_i w_i log p_i, with w normalized.
Vector clr(const Vector& p, const Vector& w);

/// sum_i w_i clr(p1)_i clr(p2)_i. Throws std::domain_error on a non-positive
/// entry in any argument.
double inner(const Vector& p1, const Vector& p2, const Vector& w);
double norm(const Vector& p, const Vector& w);

/// softmax(log p1 - log p2).
Vector sub(const Vector& p1, const Vector& p2);
/// Perturbation: normalize(p1 * p2).
Vector add(const Vector& p1, const Vector& p2);
/// Powering: normalize(p^alpha).
Vector power(const Vector& p, double alpha);

/// <s, r>_w / (|s|_w |r|_w). Throws std::domain_error when either norm is
/// below 1e-12 (the uniform element).
double similarity(const Vector& s, const Vector& r, const Vector& w);

/// True when <p1, p2>_w > 0.
bool same_direction(const Vector& p1, const Vector& p2, const Vector& w);

/// Maps latent rows to logits rows.
using LogitsFn = std::function<Matrix(const Matrix&)>;
using Intervention = std::function<Matrix(const Matrix&)>;

/// Row r: lens(g(h))_r - lens(h)_r as a floored distribution.
Matrix stimulus(const Matrix& h, const Intervention& g, const LogitsFn& lens);
/// Row r: M_{>layer}(g(h))_r - M_{>layer}(h)_r, running the remaining blocks
/// on the whole sequence.
Matrix response(const Matrix& h, const Intervention& g, const model::Transformer& m, int layer);

/// h - P_B h + P_B donor for basis rows B (m x d, orthonormal within 1e-6).
Matrix resampling_ablate(const Matrix& h, const Matrix& donor, const Matrix& basis);

struct AlignmentOptions {
  int top_m = 10;
  std::uint64_t seed = 0;
};

struct LayerAlignment {
  int layer = 0;
  double mean_similarity = 0;
  long n_tokens = 0;
  /// Tokens skipped because the stimulus or response was the zero element.
  long n_skipped = 0;
};

/// For each basis (its own layer), every position of every sequence is
/// resampling-ablated using the same position of a uniformly drawn other
/// sequence. Similarity of stimulus and response at that position uses w =
/// the clean final distribution. `lens` null means the plain logit lens.
std::vector<LayerAlignment> alignment_sweep(const model::Transformer& m, const lens::TunedLens* lens,
                                            const std::vector<causal::CausalBasis>& bases,
                                            const std::vector<std::vector<int>>& seqs,
                                            const AlignmentOptions& options = {});

}  // namespace tuned_lens::aitchison
