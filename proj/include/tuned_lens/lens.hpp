#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tuned_lens/checkpoint.hpp"
#include "tuned_lens/matrix.hpp"
#include "tuned_lens/model.hpp"

namespace tuned_lens::lens {

using Sequences = std::vector<std::vector<int>>;

/// Affine map applied to row-vector hidden states: h * A^T + b.
struct Translator {
  Matrix A;     // d x d
  RowVector b;  // 1 x d
};

/// One translator per layer 0..L-1. Layer L always decodes with the model's
/// own head.
struct TunedLens {
  std::vector<Translator> translators;
  bool include_final_block = false;

  static TunedLens identity(const model::ModelConfig& cfg, bool include_final_block = false);
  int n_layers() const { return static_cast<int>(translators.size()); }
  /// Throws when the translator count or dimension does not match the model.
  void check_compatible(const model::ModelConfig& cfg) const;
};

enum class Variant { kPlain, kExtended, kDebiased };

/// plain: LN(h) W_U. extended: LN(h + F_L(h)) W_U with F_L the last block.
/// debiased: plain applied to h + bias.
Matrix logit_lens(const model::Transformer& m, const Matrix& h, Variant variant = Variant::kPlain,
                  const RowVector* bias = nullptr);

/// LN(h A^T + b) W_U, optionally passing through the last block first.
Matrix tuned_lens(const model::Transformer& m, const Translator& t, const Matrix& h,
                  bool include_final_block = false);

/// Gradient w.r.t. h of sum(dlogits * tuned_lens(h)). With the final block,
/// h holds `n_seq` stacked sequences of equal length.
Matrix tuned_lens_backward(const model::Transformer& m, const Translator& t, const Matrix& h,
                           const Matrix& dlogits, bool include_final_block = false, int n_seq = 1);

/// Lens logits for hidden state h_layer, 0 <= layer <= L. Layer L is the
/// model head.
Matrix apply(const TunedLens& lens, const model::Transformer& m, int layer, const Matrix& h);

/// Token-weighted next-token cross-entropy accumulator (nats). Positions
/// 0..T-2 of each sequence are scored, in order.
struct CeAccumulator {
  double total = 0;
  long count = 0;
  void add(const Matrix& logits, std::span<const int> tokens);
  double mean() const;
};

struct LayerStats {
  int layer = 0;
  double ce_nats = 0;
  double perplexity = 0;
  double kl_bits = 0;
  double bias_bits = 0;
};

struct LensReport {
  std::vector<LayerStats> layers;  // 0..L
};

/// Evaluates every layer 0..L. With `lens` null the plain logit lens is used.
LensReport eval_per_layer(const TunedLens* lens, const model::Transformer& m, const Sequences& seqs);

/// KL(p_bar || q_bar) in bits between token-weighted marginal distributions
/// of the final output and the lens output at `layer`.
double marginal_bias(const TunedLens* lens, const model::Transformer& m, const Sequences& seqs,
                     int layer);

/// Entry (l, l') = CE(translator l on h_l') - CE(translator l' on h_l') for
/// l, l' in 0..L-1. The diagonal is exactly zero.
Matrix transfer_penalty_matrix(const TunedLens& lens, const model::Transformer& m,
                               const Sequences& seqs);

/// Evaluates a lens trained on one model against another model with the same
/// configuration.
LensReport transfer_lens(const TunedLens& lens, const model::Transformer& source,
                         const model::Transformer& target, const Sequences& seqs);

/// Sample covariance of hidden states h_layer over all positions.
Matrix hidden_covariance(const model::Transformer& m, const Sequences& seqs, int layer);

/// Frobenius cosine <S1, S2> / (|S1| |S2|). Throws on a zero matrix.
double covariance_cosine(const Matrix& s1, const Matrix& s2);

/// Frobenius cosine of hidden-state covariances at two layers after removing
/// the `drop_outlier_dims` highest-variance coordinates of each layer.
double covariance_similarity(const model::Transformer& m, const Sequences& seqs, int layer_a,
                             int layer_b, int drop_outlier_dims = 0);

/// Same as above over precomputed covariances.
double covariance_similarity(const Matrix& s1, const Matrix& s2, int drop_outlier_dims);

// ---- training -------------------------------------------------------------

struct TrainOptions {
  int steps = 250;
  /// Unset (< 0) means 1.0, or 0.25 with include_final_block.
  double lr = -1;
  double momentum = 0.9;
  int tokens_per_step = 1 << 14;
  double weight_decay = 1e-3;
  double clip = 1.0;
  bool include_final_block = false;
  /// Keep A = I and learn only b: the debiased logit lens.
  bool bias_only = false;
  std::uint64_t seed = 0;
};

struct TrainHistory {
  /// loss[step][layer]: mean KL(final || tuned) in nats on that step's batch,
  /// measured before the update.
  std::vector<std::vector<double>> loss;
};

/// Distillation training of all translators with SGD + Nesterov momentum and
/// linear decay. Each translator sees only its own loss.
TunedLens train_translators(const model::Transformer& m, const Sequences& seqs,
                            const TrainOptions& options, TrainHistory* history = nullptr);

/// Mean KL(final || tuned) in nats of one translator over given hidden states
/// and final logits, with its gradients. Exposed for gradient checks.
double distillation_loss(const model::Transformer& m, const Translator& t, const Matrix& h,
                         const Matrix& final_logits, bool include_final_block, int n_seq,
                         Matrix* grad_A = nullptr, RowVector* grad_b = nullptr);

// ---- serialization ----------------------------------------------------------

io::Container lens_container(const TunedLens& lens, const model::ModelConfig& cfg);
TunedLens lens_from_container(const io::Container& c, const model::ModelConfig& cfg);
void save_lens(const std::filesystem::path& path, const TunedLens& lens,
               const model::ModelConfig& cfg);
TunedLens load_lens(const std::filesystem::path& path, const model::ModelConfig& cfg);

}  // namespace tuned_lens::lens
