#include "tuned_lens/model.hpp"

#include <cmath>
#include <stdexcept>

#include "tuned_lens/kernels.hpp"
#include "tuned_lens/numerics.hpp"

namespace tuned_lens::model {

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
  if (d_ff < 1) throw std::invalid_argument("ModelConfig: d_ff must be positive");
  if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
  if (max_seq_len < 1) throw std::invalid_argument("ModelConfig: max_seq_len must be positive");
  if (!(eps >= 0)) throw std::invalid_argument("ModelConfig: eps must be nonnegative");
}

std::vector<int> tokenize(std::string_view bytes) {
  std::vector<int> ids;
  ids.reserve(bytes.size());
  for (char c : bytes) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id > 255) throw std::out_of_range("detokenize: id outside byte range");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

template <class T>
BasicTransformer<T>::BasicTransformer(const ModelConfig& cfg) : config(cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  tok_emb = Mat::Zero(cfg.vocab_size, d);
  pos_emb = Mat::Zero(cfg.max_seq_len, d);
  blocks.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& b : blocks) {
    b.ln1_g = Mat::Ones(1, d);
    b.ln1_b = Mat::Zero(1, d);
    b.w_qkv = Mat::Zero(d, 3 * d);
    b.b_qkv = Mat::Zero(1, 3 * d);
    b.w_out = Mat::Zero(d, d);
    b.b_out = Mat::Zero(1, d);
    b.ln2_g = Mat::Ones(1, d);
    b.ln2_b = Mat::Zero(1, d);
    b.w_fc = Mat::Zero(d, cfg.d_ff);
    b.b_fc = Mat::Zero(1, cfg.d_ff);
    b.w_proj = Mat::Zero(cfg.d_ff, d);
    b.b_proj = Mat::Zero(1, d);
  }
  lnf_g = Mat::Ones(1, d);
  lnf_b = Mat::Zero(1, d);
  unembed = Mat::Zero(d, cfg.vocab_size);
}

template <class T>
BasicTransformer<T> BasicTransformer<T>::random_init(const ModelConfig& cfg, std::uint64_t seed) {
  BasicTransformer<T> m(cfg);
  numerics::Rng rng(seed);
  const double std_dev = 0.02;
  const double proj_std = std_dev / std::sqrt(2.0 * cfg.n_layers);
  auto fill = [&](Mat& w, double s) { w = rng.normal_matrix(w.rows(), w.cols(), s).template cast<T>(); };
  fill(m.tok_emb, std_dev);
  fill(m.pos_emb, std_dev);
  for (auto& b : m.blocks) {
    fill(b.w_qkv, std_dev);
    fill(b.w_out, proj_std);
    fill(b.w_fc, std_dev);
    fill(b.w_proj, proj_std);
  }
  fill(m.unembed, std_dev);
  return m;
}

template <class T>
typename BasicTransformer<T>::Mat BasicTransformer<T>::embed(std::span<const int> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > config.max_seq_len)
    throw std::invalid_argument("forward: sequence longer than max_seq_len");
  Mat h(static_cast<Eigen::Index>(tokens.size()), config.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    int id = tokens[t];
    if (id < 0 || id >= config.vocab_size) throw std::out_of_range("forward: token out of range");
    auto r = static_cast<Eigen::Index>(t);
    h.row(r) = tok_emb.row(id) + pos_emb.row(r);
  }
  return h;
}

template <class T>
typename BasicTransformer<T>::Mat BasicTransformer<T>::block_residual(int block,
                                                                      const Mat& h) const {
  if (block < 0 || block >= config.n_layers) throw std::out_of_range("block index out of range");
  const Block<T>& b = blocks[static_cast<std::size_t>(block)];
  if (b.deleted) return Mat::Zero(h.rows(), h.cols());
  const T eps = static_cast<T>(config.eps);
  Mat a_in = kernels::layer_norm<T>(h, b.ln1_g, b.ln1_b, eps);
  Mat qkv = kernels::linear<T>(a_in, b.w_qkv, b.b_qkv);
  Mat att = kernels::causal_attention<T>(qkv, 1, config.n_heads);
  Mat a = kernels::linear<T>(att, b.w_out, b.b_out);
  Mat mid = h + a;
  Mat m_in = kernels::layer_norm<T>(mid, b.ln2_g, b.ln2_b, eps);
  Mat fc = kernels::gelu<T>(kernels::linear<T>(m_in, b.w_fc, b.b_fc));
  Mat m = kernels::linear<T>(fc, b.w_proj, b.b_proj);
  return a + m;
}

template <class T>
typename BasicTransformer<T>::Mat BasicTransformer<T>::final_norm(const Mat& h) const {
  return kernels::layer_norm<T>(h, lnf_g, lnf_b, static_cast<T>(config.eps));
}

template <class T>
typename BasicTransformer<T>::Mat BasicTransformer<T>::head(const Mat& h) const {
  if (h.cols() != config.d_model) throw std::invalid_argument("head: hidden size mismatch");
  return final_norm(h) * unembed;
}

template <class T>
ForwardTrace<T> forward_trace(const BasicTransformer<T>& model, std::span<const int> tokens) {
  ForwardTrace<T> tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.hidden.reserve(static_cast<std::size_t>(model.n_layers() + 1));
  tr.hidden.push_back(model.embed(tokens));
  for (int l = 0; l < model.n_layers(); ++l) {
    MatrixT<T> f = model.block_residual(l, tr.hidden.back());
    MatrixT<T> next = tr.hidden.back() + f;
    tr.residuals.push_back(std::move(f));
    tr.hidden.push_back(std::move(next));
  }
  tr.logits = model.head(tr.hidden.back());
  return tr;
}

template <class T>
MatrixT<T> run_suffix(const BasicTransformer<T>& model, int layer, const MatrixT<T>& h) {
  if (layer < 0 || layer > model.n_layers()) throw std::out_of_range("run_suffix: bad layer");
  if (h.cols() != model.d_model()) throw std::invalid_argument("run_suffix: hidden size mismatch");
  MatrixT<T> x = h;
  for (int l = layer; l < model.n_layers(); ++l) {
    MatrixT<T> f = model.block_residual(l, x);
    MatrixT<T> next = x + f;
    x = std::move(next);
  }
  return model.head(x);
}

template <class T>
BasicTransformer<T> delete_layer(const BasicTransformer<T>& model, int layer) {
  if (layer < 1 || layer > model.n_layers())
    throw std::out_of_range("delete_layer: layer must be in [1, L]");
  BasicTransformer<T> out = model;
  out.blocks[static_cast<std::size_t>(layer - 1)].deleted = true;
  return out;
}

double sequence_cross_entropy(const Matrix& logits, std::span<const int> tokens) {
  if (tokens.size() < 2) throw std::invalid_argument("cross entropy needs at least two tokens");
  if (logits.rows() != static_cast<Eigen::Index>(tokens.size()))
    throw std::invalid_argument("cross entropy: logits/tokens length mismatch");
  Matrix lp = kernels::log_softmax<double>(logits.topRows(logits.rows() - 1));
  double total = 0;
  for (Eigen::Index t = 0; t + 1 < logits.rows(); ++t) total -= lp(t, tokens[static_cast<std::size_t>(t + 1)]);
  return total / static_cast<double>(lp.rows());
}

SuffixCache::SuffixCache(const Transformer& model, const ForwardTrace<double>& trace)
    : model_(model) {
  qkv_.resize(static_cast<std::size_t>(model.n_layers()));
  for (int l = 0; l < model.n_layers(); ++l) {
    const auto& b = model.blocks[static_cast<std::size_t>(l)];
    if (b.deleted) continue;
    Matrix a_in = kernels::layer_norm<double>(trace.hidden[static_cast<std::size_t>(l)], b.ln1_g,
                                              b.ln1_b, model.config.eps);
    qkv_[static_cast<std::size_t>(l)] = kernels::linear<double>(a_in, b.w_qkv, b.b_qkv);
  }
}

RowVector SuffixCache::logits_with_replaced_row(int layer, int position,
                                                const RowVector& row) const {
  const auto& cfg = model_.config;
  if (layer < 0 || layer > cfg.n_layers) throw std::out_of_range("SuffixCache: bad layer");
  const int d = cfg.d_model;
  const int dh = d / cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix x = row;
  for (int l = layer; l < cfg.n_layers; ++l) {
    const auto& b = model_.blocks[static_cast<std::size_t>(l)];
    if (b.deleted) continue;
    const Matrix& cache = qkv_[static_cast<std::size_t>(l)];
    if (position < 0 || position >= cache.rows())
      throw std::out_of_range("SuffixCache: position out of range");
    Matrix a_in = kernels::layer_norm<double>(x, b.ln1_g, b.ln1_b, cfg.eps);
    Matrix qkv = kernels::linear<double>(a_in, b.w_qkv, b.b_qkv);
    Matrix att(1, d);
    Vector scores(position + 1);
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto q = qkv.block(0, h * dh, 1, dh);
      for (int j = 0; j < position; ++j)
        scores[j] = (q * cache.block(j, d + h * dh, 1, dh).transpose())(0, 0) * scale;
      scores[position] = (q * qkv.block(0, d + h * dh, 1, dh).transpose())(0, 0) * scale;
      scores = (scores.array() - scores.maxCoeff()).exp();
      scores /= scores.sum();
      Matrix out = Matrix::Zero(1, dh);
      for (int j = 0; j < position; ++j) out += scores[j] * cache.block(j, 2 * d + h * dh, 1, dh);
      out += scores[position] * qkv.block(0, 2 * d + h * dh, 1, dh);
      att.block(0, h * dh, 1, dh) = out;
    }
    Matrix a = kernels::linear<double>(att, b.w_out, b.b_out);
    Matrix mid = x + a;
    Matrix m_in = kernels::layer_norm<double>(mid, b.ln2_g, b.ln2_b, cfg.eps);
    Matrix fc = kernels::gelu<double>(kernels::linear<double>(m_in, b.w_fc, b.b_fc));
    Matrix m = kernels::linear<double>(fc, b.w_proj, b.b_proj);
    x = x + (a + m);
  }
  return model_.head(x).row(0);
}

// ---- tape recording -------------------------------------------------------

template <class T>
TapeModel<T> record_parameters(numerics::GradientTape<T>& tape, const BasicTransformer<T>& model,
                               bool trainable) {
  auto put = [&](const MatrixT<T>& m) { return trainable ? tape.leaf(m) : tape.constant(m); };
  TapeModel<T> p;
  p.config = model.config;
  p.tok_emb = put(model.tok_emb);
  p.pos_emb = put(model.pos_emb);
  for (const auto& b : model.blocks) {
    TapeBlock<T> tb;
    tb.ln1_g = put(b.ln1_g);
    tb.ln1_b = put(b.ln1_b);
    tb.w_qkv = put(b.w_qkv);
    tb.b_qkv = put(b.b_qkv);
    tb.w_out = put(b.w_out);
    tb.b_out = put(b.b_out);
    tb.ln2_g = put(b.ln2_g);
    tb.ln2_b = put(b.ln2_b);
    tb.w_fc = put(b.w_fc);
    tb.b_fc = put(b.b_fc);
    tb.w_proj = put(b.w_proj);
    tb.b_proj = put(b.b_proj);
    tb.deleted = b.deleted;
    p.blocks.push_back(tb);
  }
  p.lnf_g = put(model.lnf_g);
  p.lnf_b = put(model.lnf_b);
  p.unembed = put(model.unembed);
  return p;
}

template <class T>
typename numerics::GradientTape<T>::Var record_block(numerics::GradientTape<T>& tape,
                                                     const TapeModel<T>& params, int block,
                                                     typename numerics::GradientTape<T>::Var h,
                                                     int n_seq,
                                                     typename numerics::GradientTape<T>::Var* residual) {
  const TapeBlock<T>& b = params.blocks.at(static_cast<std::size_t>(block));
  const T eps = static_cast<T>(params.config.eps);
  if (b.deleted) {
    auto zero = tape.scale(h, T(0));
    if (residual) *residual = zero;
    return tape.add(h, zero);
  }
  auto a_in = tape.layer_norm(h, b.ln1_g, b.ln1_b, eps);
  auto qkv = tape.add_row(tape.matmul(a_in, b.w_qkv), b.b_qkv);
  auto att = tape.causal_attention(qkv, n_seq, params.config.n_heads);
  auto a = tape.add_row(tape.matmul(att, b.w_out), b.b_out);
  auto mid = tape.add(h, a);
  auto m_in = tape.layer_norm(mid, b.ln2_g, b.ln2_b, eps);
  auto fc = tape.gelu(tape.add_row(tape.matmul(m_in, b.w_fc), b.b_fc));
  auto m = tape.add_row(tape.matmul(fc, b.w_proj), b.b_proj);
  auto f = tape.add(a, m);
  if (residual) *residual = f;
  return tape.add(h, f);
}

template <class T>
typename numerics::GradientTape<T>::Var record_head(numerics::GradientTape<T>& tape,
                                                    const TapeModel<T>& params,
                                                    typename numerics::GradientTape<T>::Var h) {
  auto n = tape.layer_norm(h, params.lnf_g, params.lnf_b, static_cast<T>(params.config.eps));
  return tape.matmul(n, params.unembed);
}

template <class T>
RecordedForward<T> record_forward(numerics::GradientTape<T>& tape, const TapeModel<T>& params,
                                  const std::vector<int>& tokens, int n_seq) {
  if (n_seq <= 0 || tokens.empty() || tokens.size() % static_cast<std::size_t>(n_seq) != 0)
    throw std::invalid_argument("record_forward: tokens must split into n_seq equal sequences");
  const int seq_len = static_cast<int>(tokens.size()) / n_seq;
  if (seq_len > params.config.max_seq_len)
    throw std::invalid_argument("record_forward: sequence longer than max_seq_len");
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i) % seq_len;
  RecordedForward<T> out;
  auto h = tape.add(tape.gather_rows(params.tok_emb, tokens),
                    tape.gather_rows(params.pos_emb, positions));
  out.hidden.push_back(h);
  for (int l = 0; l < params.config.n_layers; ++l) {
    typename numerics::GradientTape<T>::Var f;
    h = record_block(tape, params, l, h, n_seq, &f);
    out.residuals.push_back(f);
    out.hidden.push_back(h);
  }
  out.logits = record_head(tape, params, h);
  return out;
}

#define TUNED_LENS_INSTANTIATE(T)                                                              \
  template struct BasicTransformer<T>;                                                         \
  template ForwardTrace<T> forward_trace(const BasicTransformer<T>&, std::span<const int>);    \
  template MatrixT<T> run_suffix(const BasicTransformer<T>&, int, const MatrixT<T>&);          \
  template BasicTransformer<T> delete_layer(const BasicTransformer<T>&, int);                  \
  template TapeModel<T> record_parameters(numerics::GradientTape<T>&,                          \
                                          const BasicTransformer<T>&, bool);                   \
  template numerics::GradientTape<T>::Var record_block(                                        \
      numerics::GradientTape<T>&, const TapeModel<T>&, int, numerics::GradientTape<T>::Var,    \
      int, numerics::GradientTape<T>::Var*);                                                   \
  template numerics::GradientTape<T>::Var record_head(                                         \
      numerics::GradientTape<T>&, const TapeModel<T>&, numerics::GradientTape<T>::Var);        \
  template RecordedForward<T> record_forward(numerics::GradientTape<T>&, const TapeModel<T>&,   \
                                             const std::vector<int>&, int);

TUNED_LENS_INSTANTIATE(float)
TUNED_LENS_INSTANTIATE(double)

#undef TUNED_LENS_INSTANTIATE

}  // namespace tuned_lens::model
