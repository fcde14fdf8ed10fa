#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tuned_lens/model.hpp"

namespace tuned_lens::model {

struct TrainOptions {
  int steps = 2000;
  int batch_size = 8;
  int seq_len = 128;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0;
  /// 0 disables periodic checkpoints; step 0 and the final step are always kept.
  int checkpoint_every = 0;
  /// Mask logits of symbols that never occur in the corpus.
  bool restrict_vocab = false;
  std::uint64_t seed = 0;
  std::function<void(int step, double loss)> on_step;
};

struct Checkpoint {
  int step = 0;
  TransformerF model;
};

struct TrainResult {
  TransformerF model;
  std::vector<Checkpoint> checkpoints;
  /// Training loss (mean nats per predicted token) of each step's batch.
  std::vector<double> losses;
};

/// Autoregressive cross-entropy training with Adam and cosine learning-rate
/// decay. Batches are random windows of the corpus drawn from a seeded RNG.
TrainResult train_base_model(const std::vector<int>& corpus, const ModelConfig& config,
                             const TrainOptions& options);

/// Continues training an existing model (same schedule semantics).
TrainResult train_base_model(const std::vector<int>& corpus, TransformerF init,
                             const TrainOptions& options);

}  // namespace tuned_lens::model
