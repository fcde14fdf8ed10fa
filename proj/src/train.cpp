#include "tuned_lens/train.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "tuned_lens/numerics.hpp"

namespace tuned_lens::model {

namespace {

using Tape = numerics::GradientTape<float>;

std::vector<Tape::Var> parameter_vars(const TapeModel<float>& p) {
  std::vector<Tape::Var> v = {p.tok_emb, p.pos_emb};
  for (const auto& b : p.blocks) {
    for (auto x : {b.ln1_g, b.ln1_b, b.w_qkv, b.b_qkv, b.w_out, b.b_out, b.ln2_g, b.ln2_b,
                   b.w_fc, b.b_fc, b.w_proj, b.b_proj})
      v.push_back(x);
  }
  v.push_back(p.lnf_g);
  v.push_back(p.lnf_b);
  v.push_back(p.unembed);
  return v;
}

// Each step allocates and frees the same large temporaries. Keeping them on
// the heap instead of fresh mmaps avoids page-faulting every buffer anew.
void keep_large_allocations() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

}  // namespace

TrainResult train_base_model(const std::vector<int>& corpus, const ModelConfig& config,
                             const TrainOptions& options) {
  return train_base_model(corpus, TransformerF::random_init(config, options.seed), options);
}

TrainResult train_base_model(const std::vector<int>& corpus, TransformerF init,
                             const TrainOptions& options) {
  if (corpus.size() < 2) throw std::invalid_argument("train_base_model: corpus too small");
  if (options.steps <= 0) throw std::invalid_argument("train_base_model: steps must be positive");
  if (options.batch_size <= 0 || options.seq_len <= 0)
    throw std::invalid_argument("train_base_model: batch and sequence sizes must be positive");
  keep_large_allocations();
  const ModelConfig& cfg = init.config;
  for (int t : corpus)
    if (t < 0 || t >= cfg.vocab_size) throw std::out_of_range("train_base_model: token out of range");
  const int window = std::min<int>(options.seq_len, static_cast<int>(corpus.size()) - 1);
  if (window > cfg.max_seq_len)
    throw std::invalid_argument("train_base_model: seq_len exceeds max_seq_len");

  MatrixF mask;
  if (options.restrict_vocab) {
    mask = MatrixF::Constant(1, cfg.vocab_size, -1e9f);
    for (int t : corpus) mask(0, t) = 0;
  }

  TrainResult res;
  res.model = std::move(init);
  TransformerF& m = res.model;
  std::vector<MatrixF*> params;
  m.for_each_parameter([&](const std::string&, MatrixF& w) { params.push_back(&w); });
  std::vector<MatrixF> mom(params.size()), vel(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    mom[i] = MatrixF::Zero(params[i]->rows(), params[i]->cols());
    vel[i] = mom[i];
  }

  numerics::Rng rng(options.seed ^ 0x5eedULL);
  res.checkpoints.push_back({0, m});
  const std::size_t span = corpus.size() - static_cast<std::size_t>(window);
  std::vector<int> tokens, targets;
  for (int step = 1; step <= options.steps; ++step) {
    tokens.clear();
    targets.clear();
    for (int b = 0; b < options.batch_size; ++b) {
      std::size_t at = rng.index(span);
      for (int t = 0; t < window; ++t) {
        tokens.push_back(corpus[at + static_cast<std::size_t>(t)]);
        targets.push_back(corpus[at + static_cast<std::size_t>(t) + 1]);
      }
    }
    Tape tape;
    auto p = record_parameters(tape, m, true);
    auto rec = record_forward(tape, p, tokens, options.batch_size);
    auto loss = tape.cross_entropy(rec.logits, targets, numerics::Reduction::kMean,
                                   options.restrict_vocab ? &mask : nullptr);
    tape.backward(loss);
    double loss_value = tape.value(loss)(0, 0);
    res.losses.push_back(loss_value);

    auto vars = parameter_vars(p);
    std::vector<MatrixF> grads;
    grads.reserve(vars.size());
    double sq = 0;
    for (auto v : vars) {
      grads.push_back(tape.grad(v));
      sq += static_cast<double>(grads.back().squaredNorm());
    }
    float clip_scale = 1;
    if (options.grad_clip > 0 && std::sqrt(sq) > options.grad_clip)
      clip_scale = static_cast<float>(options.grad_clip / std::sqrt(sq));

    const double progress = static_cast<double>(step - 1) / options.steps;
    const double lr = options.lr * 0.5 * (1 + std::cos(std::numbers::pi * progress));
    const double bc1 = 1 - std::pow(options.beta1, step);
    const double bc2 = 1 - std::pow(options.beta2, step);
    const auto b1 = static_cast<float>(options.beta1), b2 = static_cast<float>(options.beta2);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto inv_bc2 = static_cast<float>(1 / bc2);
    const auto eps = static_cast<float>(options.adam_eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      MatrixF g = grads[i] * clip_scale;
      mom[i] = b1 * mom[i] + (1 - b1) * g;
      vel[i] = b2 * vel[i] + (1 - b2) * g.cwiseProduct(g);
      params[i]->array() -=
          step_size * mom[i].array() / ((vel[i].array() * inv_bc2).sqrt() + eps);
    }
    if (options.on_step) options.on_step(step, loss_value);
    bool periodic = options.checkpoint_every > 0 && step % options.checkpoint_every == 0;
    if (periodic || step == options.steps) res.checkpoints.push_back({step, m});
  }
  return res;
}

}  // namespace tuned_lens::model
