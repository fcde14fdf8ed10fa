#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "tuned_lens/checkpoint.hpp"
#include "tuned_lens/lens.hpp"
#include "tuned_lens/matrix.hpp"
#include "tuned_lens/model.hpp"

namespace tuned_lens::causal {

using Sequences = std::vector<std::vector<int>>;

/// Mean hidden state at one layer over a reference set.
struct ErasureContext {
  RowVector mean;
  long count = 0;

  static ErasureContext from_rows(const Matrix& h);
  static ErasureContext from_model(const model::Transformer& m, const Sequences& seqs, int layer);
};

/// x' = x + v v^T (mean - x) applied to every row. Throws if |v| is not 1
/// within 1e-6.
Matrix mean_ablate(const Matrix& h, const Vector& v, const ErasureContext& ctx);

/// A differentiable map from latents (rows) to logits.
class LatentMap {
 public:
  virtual ~LatentMap() = default;
  virtual Eigen::Index dim() const = 0;
  virtual Matrix logits(const Matrix& h) const = 0;
  /// Gradient w.r.t. h of sum(dlogits * logits(h)).
  virtual Matrix backward(const Matrix& h, const Matrix& dlogits) const = 0;
};

/// logits = h W + bias.
class AffineMap : public LatentMap {
 public:
  AffineMap(Matrix w, RowVector bias);
  Eigen::Index dim() const override { return w_.rows(); }
  Matrix logits(const Matrix& h) const override;
  Matrix backward(const Matrix& h, const Matrix& dlogits) const override;

 private:
  Matrix w_;
  RowVector bias_;
};

/// One tuned-lens translator followed by the model head. Rows are treated
/// as independent latents, so the final-block variant is not supported.
class LensMap : public LatentMap {
 public:
  LensMap(const model::Transformer& m, lens::Translator t);
  Eigen::Index dim() const override { return translator_.A.rows(); }
  Matrix logits(const Matrix& h) const override;
  Matrix backward(const Matrix& h, const Matrix& dlogits) const override;

 private:
  const model::Transformer& model_;
  lens::Translator translator_;
};

/// Mean over rows of KL(f(h) || f(mean_ablate(h, v))) in bits. Writes the
/// gradient w.r.t. v when requested.
double influence(const Vector& v, const LatentMap& f, const Matrix& h, const ErasureContext& ctx,
                 Vector* grad = nullptr);

struct CausalBasis {
  int layer = 0;
  Matrix vectors;              // k x d, one unit vector per row
  std::vector<double> sigma;   // influences in bits, descending
};

struct CbeOptions {
  int k = 16;
  int max_iterations = 100;
  double gradient_tolerance = 1e-6;
  std::uint64_t seed = 0;
};

/// Right singular vectors of A as columns, by descending singular value.
Matrix singular_init(const Matrix& A);

/// Greedy extraction of k mutually orthogonal directions of maximal
/// influence. `init` columns (may be empty) seed each search in order.
CausalBasis extract_basis(const LatentMap& f, const Matrix& h, const ErasureContext& ctx,
                          int layer, const CbeOptions& options, const Matrix& init = Matrix());

/// Mean over positions of KL(M(x) || M_{>layer}(mean_ablate(h_layer, v))) in
/// bits, erasing at every position at once.
double model_influence(const Vector& v, int layer, const model::Transformer& m,
                       const Sequences& seqs, const ErasureContext& ctx);

struct FidelityRow {
  int index = 0;
  double lens_bits = 0;
  double model_bits = 0;
};

struct FidelityReport {
  int layer = 0;
  double spearman = 0;
  std::vector<FidelityRow> rows;
};

FidelityReport fidelity_report(const CausalBasis& basis, const std::vector<double>& lens_bits,
                               const std::vector<double>& model_bits);

/// Right singular vectors of the probe's linear part, h -> (h A^T) diag(g) W_U
/// with g the final LayerNorm gain, as columns.
Matrix probe_init(const model::Transformer& m, const lens::Translator& t);

/// Hidden states h_layer of all sequences stacked by rows.
Matrix stacked_hidden(const model::Transformer& m, const Sequences& seqs, int layer);

/// CBE at one layer on the lens (the identity translator when `lens` is null
/// or layer == L), with ctx from the same sequences and probe_init seeding.
CausalBasis layer_basis(const model::Transformer& m, const lens::TunedLens* lens,
                        const Sequences& seqs, int layer, const CbeOptions& options);

/// Lens influence and model influence of every basis direction on `seqs`.
FidelityReport layer_fidelity(const model::Transformer& m, const lens::TunedLens* lens,
                              const CausalBasis& basis, const Sequences& seqs);

/// Basis tensors "basis.{layer}.V" (k x d) and "basis.{layer}.sigma" (k).
void add_basis(io::Container& c, const CausalBasis& basis);
CausalBasis basis_from_container(const io::Container& c, int layer);
void save_bases(const std::filesystem::path& path, const std::vector<CausalBasis>& bases);
std::vector<CausalBasis> load_bases(const std::filesystem::path& path);

}  // namespace tuned_lens::causal
