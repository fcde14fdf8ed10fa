#include "tuned_lens/lens.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "tuned_lens/kernels.hpp"
#include "tuned_lens/numerics.hpp"
#include "tuned_lens/tape.hpp"

namespace tuned_lens::lens {

using model::Transformer;

TunedLens TunedLens::identity(const model::ModelConfig& cfg, bool include_final_block) {
  TunedLens lens;
  lens.include_final_block = include_final_block;
  for (int l = 0; l < cfg.n_layers; ++l)
    lens.translators.push_back(
        {Matrix::Identity(cfg.d_model, cfg.d_model), RowVector::Zero(cfg.d_model)});
  return lens;
}

void TunedLens::check_compatible(const model::ModelConfig& cfg) const {
  if (n_layers() != cfg.n_layers)
    throw std::invalid_argument("lens: translator count does not match model depth");
  for (const auto& t : translators) {
    if (t.A.rows() != cfg.d_model || t.A.cols() != cfg.d_model || t.b.size() != cfg.d_model)
      throw std::invalid_argument("lens: translator dimension does not match model");
  }
}

namespace {

void check_hidden(const Transformer& m, const Matrix& h) {
  if (h.cols() != m.d_model()) throw std::invalid_argument("lens: hidden dimension mismatch");
}

Matrix through_last_block(const Transformer& m, const Matrix& x) {
  Matrix f = m.block_residual(m.n_layers() - 1, x);
  Matrix next = x + f;
  return next;
}

}  // namespace

Matrix logit_lens(const Transformer& m, const Matrix& h, Variant variant, const RowVector* bias) {
  check_hidden(m, h);
  switch (variant) {
    case Variant::kPlain:
      return m.head(h);
    case Variant::kExtended:
      return m.head(through_last_block(m, h));
    case Variant::kDebiased: {
      if (!bias || bias->size() != m.d_model())
        throw std::invalid_argument("logit_lens: debiased variant needs a d-dim bias");
      Matrix shifted = h.rowwise() + *bias;
      return m.head(shifted);
    }
  }
  throw std::invalid_argument("logit_lens: unknown variant");
}

Matrix tuned_lens(const Transformer& m, const Translator& t, const Matrix& h,
                  bool include_final_block) {
  check_hidden(m, h);
  if (t.A.rows() != h.cols() || t.A.cols() != h.cols() || t.b.size() != h.cols())
    throw std::invalid_argument("tuned_lens: translator dimension mismatch");
  Matrix x = h * t.A.transpose();
  x.rowwise() += t.b;
  if (include_final_block) x = through_last_block(m, x);
  return m.head(x);
}

Matrix apply(const TunedLens& lens, const Transformer& m, int layer, const Matrix& h) {
  if (layer < 0 || layer > m.n_layers()) throw std::out_of_range("lens: bad layer");
  if (layer == m.n_layers()) {
    check_hidden(m, h);
    return m.head(h);
  }
  if (layer >= lens.n_layers()) throw std::out_of_range("lens: no translator for layer");
  return tuned_lens(m, lens.translators[static_cast<std::size_t>(layer)], h,
                    lens.include_final_block);
}

void CeAccumulator::add(const Matrix& logits, std::span<const int> tokens) {
  if (logits.rows() != static_cast<Eigen::Index>(tokens.size()))
    throw std::invalid_argument("CeAccumulator: logits/tokens length mismatch");
  if (tokens.size() < 2) return;
  Matrix lp = kernels::log_softmax<double>(logits.topRows(logits.rows() - 1));
  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    total -= lp(t, tokens[static_cast<std::size_t>(t + 1)]);
    ++count;
  }
}

double CeAccumulator::mean() const {
  if (count == 0) throw std::invalid_argument("CeAccumulator: no scored positions");
  return total / static_cast<double>(count);
}

namespace {

Matrix lens_logits(const TunedLens* lens, const Transformer& m, int layer, const Matrix& h) {
  if (lens) return apply(*lens, m, layer, h);
  return logit_lens(m, h);
}

void check_inputs(const TunedLens* lens, const Transformer& m, const Sequences& seqs) {
  if (seqs.empty()) throw std::invalid_argument("lens evaluation: empty corpus");
  if (lens) lens->check_compatible(m.config);
}

}  // namespace

LensReport eval_per_layer(const TunedLens* lens, const Transformer& m, const Sequences& seqs) {
  check_inputs(lens, m, seqs);
  const int L = m.n_layers();
  const auto V = m.config.vocab_size;
  std::vector<CeAccumulator> ce(static_cast<std::size_t>(L + 1));
  std::vector<double> kl(static_cast<std::size_t>(L + 1), 0.0);
  std::vector<RowVector> q_sum(static_cast<std::size_t>(L + 1), RowVector::Zero(V));
  RowVector p_sum = RowVector::Zero(V);
  long positions = 0;
  for (const auto& seq : seqs) {
    auto tr = model::forward_trace(m, seq);
    Matrix lp_final = kernels::log_softmax<double>(tr.logits);
    p_sum += lp_final.array().exp().matrix().colwise().sum();
    positions += lp_final.rows();
    for (int l = 0; l <= L; ++l) {
      Matrix logits = lens_logits(lens, m, l, tr.hidden[static_cast<std::size_t>(l)]);
      ce[static_cast<std::size_t>(l)].add(logits, seq);
      Matrix lq = kernels::log_softmax<double>(logits);
      for (Eigen::Index r = 0; r < lq.rows(); ++r)
        kl[static_cast<std::size_t>(l)] += numerics::kl_bits_from_logprobs(lp_final.row(r), lq.row(r));
      q_sum[static_cast<std::size_t>(l)] += lq.array().exp().matrix().colwise().sum();
    }
  }
  auto p_bar = numerics::Distribution::normalized(p_sum.transpose());
  LensReport report;
  for (int l = 0; l <= L; ++l) {
    const auto i = static_cast<std::size_t>(l);
    LayerStats s;
    s.layer = l;
    s.ce_nats = ce[i].mean();
    s.perplexity = numerics::perplexity(s.ce_nats);
    s.kl_bits = kl[i] / static_cast<double>(positions);
    s.bias_bits =
        numerics::kl_divergence(p_bar, numerics::Distribution::normalized(q_sum[i].transpose()));
    report.layers.push_back(s);
  }
  return report;
}

double marginal_bias(const TunedLens* lens, const Transformer& m, const Sequences& seqs,
                     int layer) {
  check_inputs(lens, m, seqs);
  if (layer < 0 || layer > m.n_layers()) throw std::out_of_range("marginal_bias: bad layer");
  const auto V = m.config.vocab_size;
  RowVector p_sum = RowVector::Zero(V), q_sum = RowVector::Zero(V);
  for (const auto& seq : seqs) {
    auto tr = model::forward_trace(m, seq);
    p_sum += kernels::log_softmax<double>(tr.logits).array().exp().matrix().colwise().sum();
    Matrix logits = lens_logits(lens, m, layer, tr.hidden[static_cast<std::size_t>(layer)]);
    q_sum += kernels::log_softmax<double>(logits).array().exp().matrix().colwise().sum();
  }
  return numerics::kl_divergence(numerics::Distribution::normalized(p_sum.transpose()),
                                 numerics::Distribution::normalized(q_sum.transpose()));
}

Matrix transfer_penalty_matrix(const TunedLens& lens, const Transformer& m, const Sequences& seqs) {
  check_inputs(&lens, m, seqs);
  const int L = m.n_layers();
  std::vector<CeAccumulator> ce(static_cast<std::size_t>(L * L));
  for (const auto& seq : seqs) {
    auto tr = model::forward_trace(m, seq);
    for (int at = 0; at < L; ++at) {
      for (int probe = 0; probe < L; ++probe) {
        Matrix logits = tuned_lens(m, lens.translators[static_cast<std::size_t>(probe)],
                                   tr.hidden[static_cast<std::size_t>(at)], lens.include_final_block);
        ce[static_cast<std::size_t>(probe * L + at)].add(logits, seq);
      }
    }
  }
  Matrix out(L, L);
  for (int probe = 0; probe < L; ++probe)
    for (int at = 0; at < L; ++at)
      out(probe, at) = ce[static_cast<std::size_t>(probe * L + at)].mean() -
                       ce[static_cast<std::size_t>(at * L + at)].mean();
  return out;
}

LensReport transfer_lens(const TunedLens& lens, const Transformer& source,
                         const Transformer& target, const Sequences& seqs) {
  if (!(source.config == target.config))
    throw std::invalid_argument("transfer_lens: model configurations differ");
  return eval_per_layer(&lens, target, seqs);
}

Matrix hidden_covariance(const Transformer& m, const Sequences& seqs, int layer) {
  if (layer < 0 || layer > m.n_layers()) throw std::out_of_range("hidden_covariance: bad layer");
  const int d = m.d_model();
  RowVector sum = RowVector::Zero(d);
  Matrix outer = Matrix::Zero(d, d);
  long n = 0;
  for (const auto& seq : seqs) {
    auto tr = model::forward_trace(m, seq);
    const Matrix& h = tr.hidden[static_cast<std::size_t>(layer)];
    sum += h.colwise().sum();
    outer.noalias() += h.transpose() * h;
    n += h.rows();
  }
  if (n < 2) throw std::invalid_argument("hidden_covariance: need at least two samples");
  RowVector mean = sum / static_cast<double>(n);
  return (outer - static_cast<double>(n) * mean.transpose() * mean) / static_cast<double>(n - 1);
}

double covariance_cosine(const Matrix& s1, const Matrix& s2) {
  if (s1.rows() != s2.rows() || s1.cols() != s2.cols())
    throw std::invalid_argument("covariance_cosine: shape mismatch");
  double n1 = s1.norm(), n2 = s2.norm();
  if (n1 == 0 || n2 == 0) throw std::domain_error("covariance_cosine: zero covariance");
  return std::clamp(s1.cwiseProduct(s2).sum() / (n1 * n2), -1.0, 1.0);
}

double covariance_similarity(const Matrix& s1, const Matrix& s2, int drop_outlier_dims) {
  if (drop_outlier_dims <= 0) return covariance_cosine(s1, s2);
  const auto d = s1.rows();
  std::set<Eigen::Index> dropped;
  for (const Matrix* s : {&s1, &s2}) {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      return (*s)(a, a) > (*s)(b, b);
    });
    for (int i = 0; i < std::min<int>(drop_outlier_dims, static_cast<int>(d)); ++i)
      dropped.insert(order[static_cast<std::size_t>(i)]);
  }
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < d; ++i)
    if (!dropped.count(i)) keep.push_back(i);
  if (keep.empty()) throw std::invalid_argument("covariance_similarity: every dimension dropped");
  Matrix a(keep.size(), keep.size()), b(keep.size(), keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i)
    for (std::size_t j = 0; j < keep.size(); ++j) {
      a(i, j) = s1(keep[i], keep[j]);
      b(i, j) = s2(keep[i], keep[j]);
    }
  return covariance_cosine(a, b);
}

double covariance_similarity(const Transformer& m, const Sequences& seqs, int layer_a,
                             int layer_b, int drop_outlier_dims) {
  return covariance_similarity(hidden_covariance(m, seqs, layer_a),
                               hidden_covariance(m, seqs, layer_b), drop_outlier_dims);
}

// ---- training ---------------------------------------------------------------

namespace {

using Tape = numerics::GradientTape<double>;

// LN(F_L(x)) W_U or LN(x) W_U recorded on a tape.
Tape::Var record_lens_head(Tape& tape, const Transformer& m, Tape::Var x, bool include_final_block,
                           int n_seq) {
  if (include_final_block) {
    model::TapeModel<double> p;
    p.config = m.config;
    p.blocks.resize(static_cast<std::size_t>(m.n_layers()));
    const auto& blk = m.blocks.back();
    auto& tb = p.blocks.back();
    tb.ln1_g = tape.constant(blk.ln1_g);
    tb.ln1_b = tape.constant(blk.ln1_b);
    tb.w_qkv = tape.constant(blk.w_qkv);
    tb.b_qkv = tape.constant(blk.b_qkv);
    tb.w_out = tape.constant(blk.w_out);
    tb.b_out = tape.constant(blk.b_out);
    tb.ln2_g = tape.constant(blk.ln2_g);
    tb.ln2_b = tape.constant(blk.ln2_b);
    tb.w_fc = tape.constant(blk.w_fc);
    tb.b_fc = tape.constant(blk.b_fc);
    tb.w_proj = tape.constant(blk.w_proj);
    tb.b_proj = tape.constant(blk.b_proj);
    tb.deleted = blk.deleted;
    x = model::record_block(tape, p, m.n_layers() - 1, x, n_seq);
  }
  auto n = tape.layer_norm(x, tape.constant(m.lnf_g), tape.constant(m.lnf_b), m.config.eps);
  return tape.matmul(n, tape.constant(m.unembed));
}

double distill_tape(const Transformer& m, const Translator& t, const Matrix& h,
                    const Matrix& target_logits, bool include_final_block, int n_seq,
                    Matrix* grad_A, RowVector* grad_b) {
  Tape tape;
  auto A = tape.leaf(t.A);
  auto b = tape.leaf(Matrix(t.b));
  auto x = tape.add_row(tape.matmul(tape.constant(h), A, true), b);
  auto logits = record_lens_head(tape, m, x, include_final_block, n_seq);
  auto loss = tape.kl_divergence(tape.constant(target_logits), logits);
  if (grad_A || grad_b) {
    tape.backward(loss);
    if (grad_A) *grad_A = tape.grad(A);
    if (grad_b) *grad_b = tape.grad(b).row(0);
  }
  return tape.value(loss)(0, 0);
}

// Hand-derived forward/backward for the affine + head case: dKL/dz = (q - p) / N.
// Rows are processed in blocks so intermediates stay in cache.
double distill_fused(const Transformer& m, const Translator& t, const Matrix& h,
                     const Matrix& target_logp, Matrix* grad_A, RowVector* grad_b) {
  constexpr Eigen::Index kBlock = 256;
  const Eigen::Index N = h.rows(), d = h.cols(), V = m.unembed.cols();
  const bool want_grad = grad_A || grad_b;
  Matrix gA = Matrix::Zero(d, d);
  RowVector gb = RowVector::Zero(d);
  const Matrix At = t.A.transpose();
  const Matrix Wt = m.unembed.transpose();
  double loss = 0;
  Matrix x, xhat, z, dn, dx;
  std::vector<double> rstd;
  for (Eigen::Index r0 = 0; r0 < N; r0 += kBlock) {
    const Eigen::Index nb = std::min(kBlock, N - r0);
    const auto hb = h.middleRows(r0, nb);
    x.noalias() = hb * At;
    x.rowwise() += t.b;
    Matrix n = kernels::layer_norm<double>(x, m.lnf_g, m.lnf_b, m.config.eps, &xhat, &rstd);
    z.noalias() = n * m.unembed;
    Eigen::Array<double, 1, Eigen::Dynamic> lq(V), p(V);
    for (Eigen::Index r = 0; r < nb; ++r) {
      auto zr = z.row(r).array();
      const auto lp = target_logp.row(r0 + r).array();
      const double mx = zr.maxCoeff();
      lq = zr - (mx + std::log((zr - mx).exp().sum()));
      p = lp.exp();
      loss += (p * (lp - lq)).sum();
      zr = (lq.exp() - p) / static_cast<double>(N);
    }
    if (!want_grad) continue;
    dn.noalias() = z * Wt;
    dx.setZero(nb, d);
    kernels::layer_norm_backward<double>(dn, xhat, rstd, m.lnf_g, &dx, nullptr, nullptr);
    gA.noalias() += dx.transpose() * hb;
    gb += dx.colwise().sum();
  }
  if (grad_A) *grad_A = std::move(gA);
  if (grad_b) *grad_b = gb;
  return loss / static_cast<double>(N);
}

double distill(const Transformer& m, const Translator& t, const Matrix& h,
               const Matrix& target_logp, bool include_final_block, int n_seq, Matrix* grad_A,
               RowVector* grad_b) {
  if (include_final_block)
    return distill_tape(m, t, h, target_logp, true, n_seq, grad_A, grad_b);
  return distill_fused(m, t, h, target_logp, grad_A, grad_b);
}

}  // namespace

Matrix tuned_lens_backward(const Transformer& m, const Translator& t, const Matrix& h,
                           const Matrix& dlogits, bool include_final_block, int n_seq) {
  check_hidden(m, h);
  if (dlogits.rows() != h.rows() || dlogits.cols() != m.config.vocab_size)
    throw std::invalid_argument("tuned_lens_backward: gradient shape mismatch");
  if (include_final_block) {
    Tape tape;
    auto hv = tape.leaf(h);
    auto x = tape.add_row(tape.matmul(hv, tape.constant(t.A), true), tape.constant(Matrix(t.b)));
    auto logits = record_lens_head(tape, m, x, true, n_seq);
    tape.backward(tape.sum(tape.hadamard(logits, tape.constant(dlogits))));
    return tape.grad(hv);
  }
  Matrix x = h * t.A.transpose();
  x.rowwise() += t.b;
  Matrix xhat;
  std::vector<double> rstd;
  kernels::layer_norm<double>(x, m.lnf_g, m.lnf_b, m.config.eps, &xhat, &rstd);
  Matrix dn = dlogits * m.unembed.transpose();
  Matrix dx = Matrix::Zero(x.rows(), x.cols());
  kernels::layer_norm_backward<double>(dn, xhat, rstd, m.lnf_g, &dx, nullptr, nullptr);
  return dx * t.A;
}

double distillation_loss(const Transformer& m, const Translator& t, const Matrix& h,
                         const Matrix& final_logits, bool include_final_block, int n_seq,
                         Matrix* grad_A, RowVector* grad_b) {
  check_hidden(m, h);
  if (final_logits.rows() != h.rows() || final_logits.cols() != m.config.vocab_size)
    throw std::invalid_argument("distillation_loss: final logits shape mismatch");
  return distill(m, t, h, kernels::log_softmax<double>(final_logits), include_final_block, n_seq,
                 grad_A, grad_b);
}

TunedLens train_translators(const Transformer& m, const Sequences& seqs,
                            const TrainOptions& options, TrainHistory* history) {
  if (seqs.empty()) throw std::invalid_argument("train_translators: empty corpus");
  if (options.steps <= 0) throw std::invalid_argument("train_translators: steps must be positive");
  const int L = m.n_layers();
  const int d = m.d_model();
  const double base_lr =
      options.lr >= 0 ? options.lr : (options.include_final_block ? 0.25 : 1.0);

  // Hidden states and final logits are fixed because the model is frozen.
  struct Cached {
    std::vector<Matrix> hidden;
    Matrix logp;
  };
  std::vector<Cached> cache;
  cache.reserve(seqs.size());
  const std::size_t seq_len = seqs.front().size();
  for (const auto& s : seqs) {
    if (s.size() != seq_len) throw std::invalid_argument("train_translators: ragged sequences");
    auto tr = model::forward_trace(m, s);
    tr.hidden.pop_back();
    cache.push_back({std::move(tr.hidden), kernels::log_softmax<double>(tr.logits)});
  }
  const int per_step = std::max<int>(
      1, std::min<int>(static_cast<int>(seqs.size()),
                       options.tokens_per_step / static_cast<int>(seq_len)));

  TunedLens lens = TunedLens::identity(m.config, options.include_final_block);
  std::vector<Matrix> buf_A(static_cast<std::size_t>(L), Matrix::Zero(d, d));
  std::vector<RowVector> buf_b(static_cast<std::size_t>(L), RowVector::Zero(d));
  const Matrix eye = Matrix::Identity(d, d);

  numerics::Rng rng(options.seed);
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::size_t cursor = 0;

  const auto rows = static_cast<Eigen::Index>(per_step) * static_cast<Eigen::Index>(seq_len);
  Matrix h(rows, d), target(rows, m.config.vocab_size);
  for (int step = 0; step < options.steps; ++step) {
    std::vector<std::size_t> batch;
    for (int i = 0; i < per_step; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    for (std::size_t i = 0; i < batch.size(); ++i)
      target.middleRows(static_cast<Eigen::Index>(i * seq_len), static_cast<Eigen::Index>(seq_len)) =
          cache[batch[i]].logp;
    const double lr = base_lr * (1.0 - static_cast<double>(step) / options.steps);
    std::vector<double> step_loss;
    for (int l = 0; l < L; ++l) {
      const auto li = static_cast<std::size_t>(l);
      for (std::size_t i = 0; i < batch.size(); ++i)
        h.middleRows(static_cast<Eigen::Index>(i * seq_len), static_cast<Eigen::Index>(seq_len)) =
            cache[batch[i]].hidden[li];
      Translator& t = lens.translators[li];
      Matrix gA;
      RowVector gb;
      double loss =
          distill(m, t, h, target, options.include_final_block, per_step, &gA, &gb);
      step_loss.push_back(loss);
      if (options.bias_only) gA.setZero();
      double norm = std::sqrt(gA.squaredNorm() + gb.squaredNorm());
      if (options.clip > 0 && norm > options.clip) {
        gA *= options.clip / norm;
        gb *= options.clip / norm;
      }
      gA += options.weight_decay * (t.A - eye);
      gb += options.weight_decay * t.b;
      buf_A[li] = options.momentum * buf_A[li] + gA;
      buf_b[li] = options.momentum * buf_b[li] + gb;
      if (!options.bias_only) t.A -= lr * (gA + options.momentum * buf_A[li]);
      t.b -= lr * (gb + options.momentum * buf_b[li]);
    }
    if (history) history->loss.push_back(std::move(step_loss));
  }
  return lens;
}

// ---- serialization ------------------------------------------------------------

io::Container lens_container(const TunedLens& lens, const model::ModelConfig& cfg) {
  lens.check_compatible(cfg);
  io::Container c;
  c.header["kind"] = "lens";
  c.header["config"] = io::config_to_json(cfg);
  c.header["include_final_block"] = lens.include_final_block;
  for (int l = 0; l < lens.n_layers(); ++l) {
    const auto& t = lens.translators[static_cast<std::size_t>(l)];
    c.add("translator." + std::to_string(l) + ".A", t.A.cast<float>());
    c.add_vector("translator." + std::to_string(l) + ".b", t.b.cast<float>());
  }
  return c;
}

TunedLens lens_from_container(const io::Container& c, const model::ModelConfig& cfg) {
  if (c.header.value("kind", "") != "lens") throw std::runtime_error("lens file: wrong kind");
  if (!(io::config_from_json(c.header.at("config")) == cfg))
    throw std::runtime_error("lens file: model configuration mismatch");
  TunedLens lens;
  lens.include_final_block = c.header.value("include_final_block", false);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& A = c.get("translator." + std::to_string(l) + ".A").data;
    const auto& b = c.get("translator." + std::to_string(l) + ".b").data;
    lens.translators.push_back({A.cast<double>(), b.row(0).cast<double>()});
  }
  lens.check_compatible(cfg);
  return lens;
}

void save_lens(const std::filesystem::path& path, const TunedLens& lens,
               const model::ModelConfig& cfg) {
  io::save(path, lens_container(lens, cfg));
}

TunedLens load_lens(const std::filesystem::path& path, const model::ModelConfig& cfg) {
  return lens_from_container(io::load(path), cfg);
}

}  // namespace tuned_lens::lens
