#include "tuned_lens/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tuned_lens/numerics.hpp"
#include "tuned_lens/tape.hpp"

namespace tuned_lens::diagnostics {

Matrix loss_gradient(const model::Transformer& m, std::span<const int> tokens, int layer) {
  if (tokens.size() < 2) throw std::invalid_argument("loss_gradient: need at least two tokens");
  if (layer < 0 || layer > m.n_layers()) throw std::out_of_range("loss_gradient: bad layer");
  auto tr = model::forward_trace(m, tokens);
  numerics::GradientTape<double> tape;
  auto params = model::record_parameters(tape, m, false);
  auto h0 = tape.leaf(tr.hidden[static_cast<std::size_t>(layer)]);
  auto h = h0;
  for (int b = layer; b < m.n_layers(); ++b) h = model::record_block(tape, params, b, h, 1);
  auto logits = model::record_head(tape, params, h);
  std::vector<int> targets(tokens.begin() + 1, tokens.end());
  targets.push_back(-1);
  auto loss = tape.cross_entropy(logits, std::move(targets), numerics::Reduction::kSum);
  tape.backward(loss);
  return tape.grad(h0);
}

double flat_cosine(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("flat_cosine: shape mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(a.cwiseProduct(b).sum() / (na * nb), -1.0, 1.0);
}

AlignmentReport grad_residual_alignment(const model::Transformer& m, const Sequences& seqs) {
  if (seqs.empty()) throw std::invalid_argument("grad_residual_alignment: empty corpus");
  const int L = m.n_layers();
  AlignmentReport rep;
  std::vector<std::vector<double>> per_layer(static_cast<std::size_t>(L));
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    auto tr = model::forward_trace(m, seqs[s]);
    for (int l = 0; l < L; ++l) {
      Matrix g = loss_gradient(m, seqs[s], l);
      const double c = flat_cosine(tr.residuals[static_cast<std::size_t>(l)], g);
      rep.samples.push_back({l, static_cast<int>(s), c});
      per_layer[static_cast<std::size_t>(l)].push_back(c);
    }
  }
  for (int l = 0; l < L; ++l) {
    const auto& cs = per_layer[static_cast<std::size_t>(l)];
    AlignmentSummary sum;
    sum.layer = l;
    sum.p5 = numerics::percentile(cs, 5);
    sum.p50 = numerics::percentile(cs, 50);
    sum.p95 = numerics::percentile(cs, 95);
    sum.frac_negative = static_cast<double>(std::count_if(cs.begin(), cs.end(), [](double c) { return c < 0; })) /
                        static_cast<double>(cs.size());
    rep.layers.push_back(sum);
  }
  return rep;
}

double random_cosine_baseline(long dim, int n_samples, double q, std::uint64_t seed) {
  if (dim < 2) throw std::invalid_argument("random_cosine_baseline: dim must be at least 2");
  if (n_samples < 2) throw std::invalid_argument("random_cosine_baseline: need at least two samples");
  constexpr long kChunk = 8192;
  numerics::Rng rng(seed);
  Matrix gram = Matrix::Zero(n_samples, n_samples);
  for (long start = 0; start < dim; start += kChunk) {
    const long width = std::min(kChunk, dim - start);
    Matrix block = rng.normal_matrix(n_samples, width);
    gram.selfadjointView<Eigen::Lower>().rankUpdate(block);
  }
  std::vector<double> cos;
  cos.reserve(static_cast<std::size_t>(n_samples) * static_cast<std::size_t>(n_samples - 1) / 2);
  for (int i = 0; i < n_samples; ++i)
    for (int j = 0; j < i; ++j) cos.push_back(gram(i, j) / std::sqrt(gram(i, i) * gram(j, j)));
  return numerics::percentile(std::move(cos), q);
}

namespace {

double model_perplexity(const model::Transformer& m, const Sequences& seqs) {
  lens::CeAccumulator ce;
  for (const auto& s : seqs) ce.add(model::forward_trace(m, s).logits, s);
  return numerics::perplexity(ce.mean());
}

}  // namespace

DeletionReport layer_deletion_sweep(const model::Transformer& m, const Sequences& seqs) {
  if (seqs.empty()) throw std::invalid_argument("layer_deletion_sweep: empty corpus");
  DeletionReport rep;
  rep.baseline = model_perplexity(m, seqs);
  for (int l = 1; l <= m.n_layers(); ++l)
    rep.rows.push_back({l, model_perplexity(model::delete_layer(m, l), seqs)});
  return rep;
}

}  // namespace tuned_lens::diagnostics
