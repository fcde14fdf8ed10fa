#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tuned_lens/lens.hpp"
#include "tuned_lens/matrix.hpp"
#include "tuned_lens/model.hpp"

namespace tuned_lens::diagnostics {

using Sequences = std::vector<std::vector<int>>;

/// d(sum of next-token cross-entropies) / d h_layer for one sequence, with
/// h_layer the input of block `layer` (0 <= layer <= L).
Matrix loss_gradient(const model::Transformer& m, std::span<const int> tokens, int layer);

/// Cosine of two matrices flattened to vectors; 0 when either is zero.
double flat_cosine(const Matrix& a, const Matrix& b);

struct AlignmentSample {
  int layer = 0;
  int sequence = 0;
  double cosine = 0;
};

struct AlignmentSummary {
  int layer = 0;
  double p5 = 0, p50 = 0, p95 = 0;
  double frac_negative = 0;
};

struct AlignmentReport {
  std::vector<AlignmentSample> samples;
  std::vector<AlignmentSummary> layers;  // blocks 0..L-1
};

/// Per block l and sequence: cosine between the block's residual F_l(h_l) and
/// the loss gradient at h_l, each flattened over the whole sequence.
AlignmentReport grad_residual_alignment(const model::Transformer& m, const Sequences& seqs);

/// Percentile (q in [0, 100]) of the pairwise cosines of n standard Gaussian
/// vectors in `dim` dimensions. Generated in column chunks, so memory stays
/// O(n^2 + n * chunk).
double random_cosine_baseline(long dim, int n_samples, double q, std::uint64_t seed);

struct DeletionRow {
  int layer = 0;  // 1-based block index
  double perplexity = 0;
};

struct DeletionReport {
  double baseline = 0;
  std::vector<DeletionRow> rows;
};

/// Perplexity with each block replaced by the identity, plus the intact model.
DeletionReport layer_deletion_sweep(const model::Transformer& m, const Sequences& seqs);

}  // namespace tuned_lens::diagnostics
