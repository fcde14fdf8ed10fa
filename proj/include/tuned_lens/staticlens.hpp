#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tuned_lens/lens.hpp"
#include "tuned_lens/matrix.hpp"
#include "tuned_lens/model.hpp"

namespace tuned_lens::staticlens {

/// Token id -> unit-norm embedding (row id of `vectors`).
struct EmbeddingTable {
  Matrix vectors;  // V x e

  /// Normalizes rows; throws on a zero row.
  static EmbeddingTable from_rows(Matrix rows);
  /// Normalized unembedding columns of the model itself.
  static EmbeddingTable from_unembedding(const model::Transformer& m);
};

/// Little-endian: uint32 count, uint32 dim, then count*dim float32 values.
EmbeddingTable load_table(const std::filesystem::path& path);
void save_table(const std::filesystem::path& path, const EmbeddingTable& table);

/// Top-k token ids of (v A^T) W_U, LayerNorm omitted. The translator is used
/// when `lens` is non-null and layer < L. Ties go to the lowest id.
std::vector<int> project_param(const Vector& v, const model::Transformer& m,
                               const lens::TunedLens* lens, int layer, int k);

/// Mean of E(t_i) . E(t_j) over all k^2 ordered pairs, self-pairs included.
double interpretability_score(const std::vector<int>& tokens, const EmbeddingTable& table);

/// Seeded permutation of all entries. With n_blocks > 1 the columns are cut
/// into that many equal blocks and each block is permuted on its own.
Matrix shuffle_baseline(const Matrix& w, std::uint64_t seed, int n_blocks = 1);

enum class Extractor {
  kMlpOutRows,   // rows of the MLP output matrix
  kMlpInCols,    // columns of the MLP input matrix
  kMlpOutSvd,    // right singular vectors of the MLP output matrix
  kMlpInSvd,     // left singular vectors of the MLP input matrix
  kOvSvd,        // per head: right singular vectors of W_V W_O
  kQkSvd,        // per head: left singular vectors of W_Q W_K^T
};
std::string to_string(Extractor e);
Extractor extractor_from_string(const std::string& name);
const std::vector<Extractor>& all_extractors();

/// d-dimensional vectors for `block`, in a fixed order, at most `max_vectors`
/// (per head for the attention extractors).
std::vector<Vector> extract(const model::Transformer& m, int block, Extractor e, int max_vectors);

/// Lens layer a vector is decoded at: the block's output side (block + 1)
/// for written vectors, its input side (block) for read vectors.
int decode_layer(Extractor e, int block);

/// Copy with every weight matrix of `block` shuffled; attention matrices are
/// shuffled head by head.
model::Transformer shuffle_block(const model::Transformer& m, int block, std::uint64_t seed);

struct ScoreRow {
  Extractor extractor = Extractor::kMlpOutRows;
  int layer = 0;  // block index
  int index = 0;
  double score_real = 0;
  double score_shuffled_mean = 0;
  /// Rank of the real score among real + shuffled scores (1 = highest).
  int rank = 0;
};

struct StaticOptions {
  int k = 20;
  int max_vectors = 8;
  int n_shuffles = 20;
  std::uint64_t seed = 0;
};

std::vector<ScoreRow> static_report(const model::Transformer& m, const lens::TunedLens* lens,
                                    const EmbeddingTable& table, const std::vector<int>& blocks,
                                    const std::vector<Extractor>& extractors,
                                    const StaticOptions& options);

}  // namespace tuned_lens::staticlens
