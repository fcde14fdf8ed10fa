#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tuned_lens/matrix.hpp"
#include "tuned_lens/tape.hpp"

namespace tuned_lens::model {

/// Byte-level vocabulary: ids 0..255 are bytes, 256 is padding.
inline constexpr int kPadToken = 256;
inline constexpr int kByteVocab = 257;

struct ModelConfig {
  int n_layers = 6;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 512;
  int vocab_size = kByteVocab;
  int max_seq_len = 256;
  double eps = 1e-5;

  /// Throws std::invalid_argument when the invariants do not hold.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

std::vector<int> tokenize(std::string_view bytes);
std::string detokenize(std::span<const int> ids);

template <class T>
struct Block {
  MatrixT<T> ln1_g, ln1_b;
  MatrixT<T> w_qkv, b_qkv;
  MatrixT<T> w_out, b_out;
  MatrixT<T> ln2_g, ln2_b;
  MatrixT<T> w_fc, b_fc;
  MatrixT<T> w_proj, b_proj;
  /// Deleted blocks act as the identity: F(h) = 0.
  bool deleted = false;
};

/// Pre-LayerNorm decoder-only transformer. Each block computes
/// h_{l+1} = h_l + F_l(h_l); logits are LayerNorm(h_L) * W_U.
///
/// Parameters are public so analysis code can read weights directly. All
/// matrices multiply from the right: activations are rows.
template <class T>
struct BasicTransformer {
  using Mat = MatrixT<T>;

  ModelConfig config;
  Mat tok_emb;  // V x d
  Mat pos_emb;  // max_seq_len x d
  std::vector<Block<T>> blocks;
  Mat lnf_g, lnf_b;  // 1 x d
  Mat unembed;       // d x V

  BasicTransformer() = default;
  /// All weights zero, LayerNorm gains one.
  explicit BasicTransformer(const ModelConfig& cfg);
  /// GPT-2 style init: N(0, 0.02), output projections scaled by 1/sqrt(2L).
  static BasicTransformer random_init(const ModelConfig& cfg, std::uint64_t seed);

  int n_layers() const { return config.n_layers; }
  int d_model() const { return config.d_model; }

  Mat embed(std::span<const int> tokens) const;
  /// F_block(h) for one sequence (rows = positions).
  Mat block_residual(int block, const Mat& h) const;
  /// LayerNorm(h) * W_U.
  Mat head(const Mat& h) const;
  Mat final_norm(const Mat& h) const;

  /// Visits every parameter as (name, matrix) in a fixed order.
  template <class F>
  void for_each_parameter(F&& fn);
  template <class F>
  void for_each_parameter(F&& fn) const;

  template <class U>
  BasicTransformer<U> cast() const;
};

using Transformer = BasicTransformer<double>;
using TransformerF = BasicTransformer<float>;

/// Hidden states h_0..h_L, residual updates F_0..F_{L-1}, and final logits
/// for one sequence.
template <class T>
struct ForwardTrace {
  std::vector<int> tokens;
  std::vector<MatrixT<T>> hidden;
  std::vector<MatrixT<T>> residuals;
  MatrixT<T> logits;
};

template <class T>
ForwardTrace<T> forward_trace(const BasicTransformer<T>& model, std::span<const int> tokens);

/// Runs blocks layer..L-1 (0-based) on h, then the final LayerNorm and the
/// unembedding. layer == L runs only the head.
template <class T>
MatrixT<T> run_suffix(const BasicTransformer<T>& model, int layer, const MatrixT<T>& h);

/// Returns a copy with block `layer` (1-based, 1 <= layer <= L) replaced by the
/// identity. No other parameter changes.
template <class T>
BasicTransformer<T> delete_layer(const BasicTransformer<T>& model, int layer);

/// Mean next-token cross-entropy (nats) of logits against a sequence's own
/// continuation; positions 0..T-2 are scored.
double sequence_cross_entropy(const Matrix& logits, std::span<const int> tokens);

/// Cached per-block projections of an unmodified sequence so that the model
/// output at one position can be recomputed after replacing that position's
/// hidden state at some layer, without rerunning the whole sequence.
class SuffixCache {
 public:
  SuffixCache(const Transformer& model, const ForwardTrace<double>& trace);

  /// Logits at `position` after replacing h_layer[position] with `row` and
  /// running the remaining blocks. Rows before `position` are unchanged by
  /// causality, so their cached keys and values are reused.
  RowVector logits_with_replaced_row(int layer, int position, const RowVector& row) const;

 private:
  const Transformer& model_;
  std::vector<Matrix> qkv_;  // per block, computed from the unmodified hidden state
};

// ---- tape recording ------------------------------------------------------

template <class T>
struct TapeBlock {
  using Var = typename numerics::GradientTape<T>::Var;
  Var ln1_g, ln1_b, w_qkv, b_qkv, w_out, b_out, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  bool deleted = false;
};

/// Parameter handles of a model recorded on a tape.
template <class T>
struct TapeModel {
  using Var = typename numerics::GradientTape<T>::Var;
  ModelConfig config;
  Var tok_emb, pos_emb;
  std::vector<TapeBlock<T>> blocks;
  Var lnf_g, lnf_b, unembed;
};

template <class T>
TapeModel<T> record_parameters(numerics::GradientTape<T>& tape, const BasicTransformer<T>& model,
                               bool trainable);

/// Records one block over `n_seq` stacked sequences. Returns h + F(h) and
/// stores F(h) in `residual` when non-null.
template <class T>
typename numerics::GradientTape<T>::Var record_block(
    numerics::GradientTape<T>& tape, const TapeModel<T>& params, int block,
    typename numerics::GradientTape<T>::Var h, int n_seq,
    typename numerics::GradientTape<T>::Var* residual = nullptr);

template <class T>
typename numerics::GradientTape<T>::Var record_head(numerics::GradientTape<T>& tape,
                                                    const TapeModel<T>& params,
                                                    typename numerics::GradientTape<T>::Var h);

template <class T>
struct RecordedForward {
  using Var = typename numerics::GradientTape<T>::Var;
  std::vector<Var> hidden;
  std::vector<Var> residuals;
  Var logits;
};

/// Records a full forward pass over `n_seq` sequences of equal length whose
/// tokens are concatenated in `tokens`.
template <class T>
RecordedForward<T> record_forward(numerics::GradientTape<T>& tape, const TapeModel<T>& params,
                                  const std::vector<int>& tokens, int n_seq);

// ---- template member definitions ----------------------------------------

template <class T>
template <class F>
void BasicTransformer<T>::for_each_parameter(F&& fn) {
  fn(std::string("tok_emb"), tok_emb);
  fn(std::string("pos_emb"), pos_emb);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    Block<T>& b = blocks[i];
    fn(p + "ln1.g", b.ln1_g);
    fn(p + "ln1.b", b.ln1_b);
    fn(p + "attn.qkv.w", b.w_qkv);
    fn(p + "attn.qkv.b", b.b_qkv);
    fn(p + "attn.out.w", b.w_out);
    fn(p + "attn.out.b", b.b_out);
    fn(p + "ln2.g", b.ln2_g);
    fn(p + "ln2.b", b.ln2_b);
    fn(p + "mlp.fc.w", b.w_fc);
    fn(p + "mlp.fc.b", b.b_fc);
    fn(p + "mlp.proj.w", b.w_proj);
    fn(p + "mlp.proj.b", b.b_proj);
  }
  fn(std::string("ln_f.g"), lnf_g);
  fn(std::string("ln_f.b"), lnf_b);
  fn(std::string("unembed"), unembed);
}

template <class T>
template <class F>
void BasicTransformer<T>::for_each_parameter(F&& fn) const {
  const_cast<BasicTransformer<T>*>(this)->for_each_parameter(
      [&fn](const std::string& name, MatrixT<T>& m) { fn(name, static_cast<const MatrixT<T>&>(m)); });
}

template <class T>
template <class U>
BasicTransformer<U> BasicTransformer<T>::cast() const {
  BasicTransformer<U> out;
  out.config = config;
  out.tok_emb = tok_emb.template cast<U>();
  out.pos_emb = pos_emb.template cast<U>();
  out.blocks.resize(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const Block<T>& a = blocks[i];
    Block<U>& b = out.blocks[i];
    b.ln1_g = a.ln1_g.template cast<U>();
    b.ln1_b = a.ln1_b.template cast<U>();
    b.w_qkv = a.w_qkv.template cast<U>();
    b.b_qkv = a.b_qkv.template cast<U>();
    b.w_out = a.w_out.template cast<U>();
    b.b_out = a.b_out.template cast<U>();
    b.ln2_g = a.ln2_g.template cast<U>();
    b.ln2_b = a.ln2_b.template cast<U>();
    b.w_fc = a.w_fc.template cast<U>();
    b.b_fc = a.b_fc.template cast<U>();
    b.w_proj = a.w_proj.template cast<U>();
    b.b_proj = a.b_proj.template cast<U>();
    b.deleted = a.deleted;
  }
  out.lnf_g = lnf_g.template cast<U>();
  out.lnf_b = lnf_b.template cast<U>();
  out.unembed = unembed.template cast<U>();
  return out;
}

}  // namespace tuned_lens::model
