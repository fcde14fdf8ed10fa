#include "tuned_lens/aitchison.hpp"

#include <cmath>
#include <stdexcept>

#include "tuned_lens/kernels.hpp"
#include "tuned_lens/numerics.hpp"

namespace tuned_lens::aitchison {

namespace {

void check_positive(const Vector& p, const char* what) {
  if (p.size() == 0) throw std::invalid_argument(std::string(what) + ": empty composition");
  if ((p.array() <= 0).any() || !p.allFinite())
    throw std::domain_error(std::string(what) + ": entries must be strictly positive");
}

Vector normalized(const Vector& v) { return v / v.sum(); }

}  // namespace

Vector floor_normalize(const Vector& p) {
  if (p.size() == 0) throw std::invalid_argument("floor_normalize: empty");
  return normalized(p.cwiseMax(kFloor));
}

Vector probs_from_logits(const Eigen::Ref<const RowVector>& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix().transpose();
  return floor_normalize(e / e.sum());
}

Vector clr(const Vector& p, const Vector& w) {
  check_positive(p, "clr");
  check_positive(w, "clr weights");
  if (p.size() != w.size()) throw std::invalid_argument("clr: size mismatch");
  Vector lp = p.array().log();
  return lp.array() - normalized(w).dot(lp);
}

double inner(const Vector& p1, const Vector& p2, const Vector& w) {
  Vector a = clr(p1, w), b = clr(p2, w);
  return (normalized(w).array() * (a.array() * b.array())).sum();
}

double norm(const Vector& p, const Vector& w) { return std::sqrt(std::max(0.0, inner(p, p, w))); }

Vector sub(const Vector& p1, const Vector& p2) {
  check_positive(p1, "sub");
  check_positive(p2, "sub");
  if (p1.size() != p2.size()) throw std::invalid_argument("sub: size mismatch");
  Vector z = p1.array().log() - p2.array().log();
  return numerics::softmax(z).probs();
}

Vector add(const Vector& p1, const Vector& p2) {
  check_positive(p1, "add");
  check_positive(p2, "add");
  if (p1.size() != p2.size()) throw std::invalid_argument("add: size mismatch");
  return normalized(p1.cwiseProduct(p2));
}

Vector power(const Vector& p, double alpha) {
  check_positive(p, "power");
  return numerics::softmax(Vector(alpha * p.array().log())).probs();
}

double similarity(const Vector& s, const Vector& r, const Vector& w) {
  Vector a = clr(s, w), b = clr(r, w);
  Vector wn = normalized(w);
  const double ns = std::sqrt((wn.array() * a.array().square()).sum());
  const double nr = std::sqrt((wn.array() * b.array().square()).sum());
  if (ns < 1e-12 || nr < 1e-12)
    throw std::domain_error("similarity: undefined for the zero (uniform) element");
  return std::clamp((wn.array() * (a.array() * b.array())).sum() / (ns * nr), -1.0, 1.0);
}

bool same_direction(const Vector& p1, const Vector& p2, const Vector& w) {
  return inner(p1, p2, w) > 0;
}

namespace {

Matrix row_differences(const Matrix& after, const Matrix& before) {
  Matrix out(after.rows(), after.cols());
  for (Eigen::Index r = 0; r < after.rows(); ++r)
    out.row(r) = sub(probs_from_logits(after.row(r)), probs_from_logits(before.row(r))).transpose();
  return out;
}

}  // namespace

Matrix stimulus(const Matrix& h, const Intervention& g, const LogitsFn& lens) {
  return row_differences(lens(g(h)), lens(h));
}

Matrix response(const Matrix& h, const Intervention& g, const model::Transformer& m, int layer) {
  return row_differences(model::run_suffix(m, layer, g(h)), model::run_suffix(m, layer, h));
}

Matrix resampling_ablate(const Matrix& h, const Matrix& donor, const Matrix& basis) {
  if (h.rows() != donor.rows() || h.cols() != donor.cols() || basis.cols() != h.cols())
    throw std::invalid_argument("resampling_ablate: shape mismatch");
  Matrix gram = basis * basis.transpose();
  if ((gram - Matrix::Identity(basis.rows(), basis.rows())).cwiseAbs().maxCoeff() > 1e-6)
    throw std::invalid_argument("resampling_ablate: basis is not orthonormal");
  return h + (donor - h) * basis.transpose() * basis;
}

std::vector<LayerAlignment> alignment_sweep(const model::Transformer& m, const lens::TunedLens* lens,
                                            const std::vector<causal::CausalBasis>& bases,
                                            const std::vector<std::vector<int>>& seqs,
                                            const AlignmentOptions& options) {
  if (seqs.size() < 2) throw std::invalid_argument("alignment_sweep: need at least two sequences");
  if (lens) lens->check_compatible(m.config);
  std::vector<model::ForwardTrace<double>> traces;
  std::vector<model::SuffixCache> caches;
  traces.reserve(seqs.size());
  for (const auto& s : seqs) traces.push_back(model::forward_trace(m, s));
  caches.reserve(seqs.size());
  for (const auto& tr : traces) caches.emplace_back(m, tr);

  std::vector<LayerAlignment> out;
  for (const auto& basis : bases) {
    const int layer = basis.layer;
    if (layer < 0 || layer > m.n_layers()) throw std::out_of_range("alignment_sweep: bad layer");
    const Eigen::Index top = std::min<Eigen::Index>(options.top_m, basis.vectors.rows());
    const Matrix B = basis.vectors.topRows(top);
    numerics::Rng rng(options.seed + static_cast<std::uint64_t>(layer));
    LayerAlignment la;
    la.layer = layer;
    double total = 0;
    for (std::size_t si = 0; si < seqs.size(); ++si) {
      const Matrix& h = traces[si].hidden[static_cast<std::size_t>(layer)];
      Matrix lens_clean = lens ? lens::apply(*lens, m, layer, h) : lens::logit_lens(m, h);
      for (Eigen::Index t = 0; t < h.rows(); ++t) {
        std::size_t di = rng.index(seqs.size() - 1);
        if (di >= si) ++di;
        const Matrix& donor_h = traces[di].hidden[static_cast<std::size_t>(layer)];
        const Eigen::Index dt = std::min(t, donor_h.rows() - 1);
        Matrix row = resampling_ablate(h.row(t), donor_h.row(dt), B);
        Matrix lens_row = lens ? lens::apply(*lens, m, layer, row) : lens::logit_lens(m, row);
        Vector s = sub(probs_from_logits(lens_row.row(0)), probs_from_logits(lens_clean.row(t)));
        RowVector resp = caches[si].logits_with_replaced_row(layer, static_cast<int>(t), row.row(0));
        Vector r = sub(probs_from_logits(resp), probs_from_logits(traces[si].logits.row(t)));
        Vector w = probs_from_logits(traces[si].logits.row(t));
        try {
          total += similarity(s, r, w);
          ++la.n_tokens;
        } catch (const std::domain_error&) {
          ++la.n_skipped;
        }
      }
    }
    la.mean_similarity = la.n_tokens > 0 ? total / static_cast<double>(la.n_tokens) : 0.0;
    out.push_back(la);
  }
  return out;
}

}  // namespace tuned_lens::aitchison
