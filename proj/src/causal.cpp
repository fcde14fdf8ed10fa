#include "tuned_lens/causal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "tuned_lens/kernels.hpp"
#include "tuned_lens/lbfgs.hpp"
#include "tuned_lens/numerics.hpp"

namespace tuned_lens::causal {

using model::Transformer;

ErasureContext ErasureContext::from_rows(const Matrix& h) {
  if (h.rows() == 0) throw std::invalid_argument("ErasureContext: no samples");
  return {h.colwise().mean(), static_cast<long>(h.rows())};
}

ErasureContext ErasureContext::from_model(const Transformer& m, const Sequences& seqs, int layer) {
  if (seqs.empty()) throw std::invalid_argument("ErasureContext: empty dataset");
  if (layer < 0 || layer > m.n_layers()) throw std::out_of_range("ErasureContext: bad layer");
  RowVector sum = RowVector::Zero(m.d_model());
  long n = 0;
  for (const auto& s : seqs) {
    auto tr = model::forward_trace(m, s);
    const Matrix& h = tr.hidden[static_cast<std::size_t>(layer)];
    sum += h.colwise().sum();
    n += h.rows();
  }
  if (n == 0) throw std::invalid_argument("ErasureContext: no samples");
  return {sum / static_cast<double>(n), n};
}

namespace {

void check_unit(const Vector& v) {
  if (std::abs(v.norm() - 1.0) > 1e-6) throw std::invalid_argument("direction must be unit norm");
}

}  // namespace

Matrix mean_ablate(const Matrix& h, const Vector& v, const ErasureContext& ctx) {
  check_unit(v);
  if (h.cols() != v.size() || ctx.mean.size() != v.size())
    throw std::invalid_argument("mean_ablate: dimension mismatch");
  // Per row: coefficient <mean - h, v>, added back along v.
  Vector c = (ctx.mean.dot(v)) - (h * v).array();
  return h + c * v.transpose();
}

AffineMap::AffineMap(Matrix w, RowVector bias) : w_(std::move(w)), bias_(std::move(bias)) {
  if (bias_.size() != w_.cols()) throw std::invalid_argument("AffineMap: bias size mismatch");
}

Matrix AffineMap::logits(const Matrix& h) const {
  Matrix z = h * w_;
  z.rowwise() += bias_;
  return z;
}

Matrix AffineMap::backward(const Matrix&, const Matrix& dlogits) const {
  return dlogits * w_.transpose();
}

LensMap::LensMap(const Transformer& m, lens::Translator t) : model_(m), translator_(std::move(t)) {
  if (translator_.A.rows() != m.d_model()) throw std::invalid_argument("LensMap: dimension mismatch");
}

Matrix LensMap::logits(const Matrix& h) const { return lens::tuned_lens(model_, translator_, h); }

Matrix LensMap::backward(const Matrix& h, const Matrix& dlogits) const {
  return lens::tuned_lens_backward(model_, translator_, h, dlogits);
}

namespace {

// Influence with the clean log-probabilities precomputed.
double influence_with(const Vector& v, const LatentMap& f, const Matrix& h, const Matrix& clean_logp,
                      const ErasureContext& ctx, Vector* grad) {
  const auto N = static_cast<double>(h.rows());
  Matrix a = (-h).rowwise() + ctx.mean;  // mean - h
  Vector c = a * v;
  Matrix ablated = h + c * v.transpose();
  Matrix lq = kernels::log_softmax<double>(f.logits(ablated));
  Matrix p = clean_logp.array().exp().matrix();
  double kl = (p.array() * (clean_logp - lq).array()).sum() / N;
  if (grad) {
    Matrix dz = (lq.array().exp().matrix() - p) / (N * std::log(2.0));
    Matrix g = f.backward(ablated, dz);
    // h' = h + v v^T a  =>  dI/dv = sum_r c_r g_r + (g_r . v) a_r
    *grad = g.transpose() * c + a.transpose() * (g * v);
  }
  return kl * numerics::kNatsToBits;
}

}  // namespace

double influence(const Vector& v, const LatentMap& f, const Matrix& h, const ErasureContext& ctx,
                 Vector* grad) {
  if (h.rows() == 0) throw std::invalid_argument("influence: empty dataset");
  check_unit(v);
  if (h.cols() != f.dim() || v.size() != f.dim())
    throw std::invalid_argument("influence: dimension mismatch");
  return influence_with(v, f, h, kernels::log_softmax<double>(f.logits(h)), ctx, grad);
}

Matrix singular_init(const Matrix& A) {
  Eigen::JacobiSVD<Matrix> svd(A, Eigen::ComputeFullV);
  return svd.matrixV();
}

CausalBasis extract_basis(const LatentMap& f, const Matrix& h, const ErasureContext& ctx, int layer,
                          const CbeOptions& options, const Matrix& init) {
  const Eigen::Index d = f.dim();
  if (h.rows() == 0) throw std::invalid_argument("extract_basis: empty dataset");
  if (h.cols() != d) throw std::invalid_argument("extract_basis: dimension mismatch");
  if (options.k < 1 || options.k > d) throw std::invalid_argument("extract_basis: need 1 <= k <= d");
  if (init.size() > 0 && init.rows() != d) throw std::invalid_argument("extract_basis: bad init");

  const Matrix clean_logp = kernels::log_softmax<double>(f.logits(h));
  numerics::Rng rng(options.seed);
  numerics::LbfgsOptions lopt;
  lopt.max_iterations = options.max_iterations;
  lopt.gradient_tolerance = options.gradient_tolerance;

  Matrix Q(d, 0);
  std::vector<double> sigma;
  Eigen::Index next_init = 0;
  auto project = [&](const Vector& u) -> Vector {
    Vector w = u;
    for (int pass = 0; pass < 2; ++pass) w -= Q * (Q.transpose() * w);
    return w;
  };

  for (int i = 0; i < options.k; ++i) {
    Vector u0;
    while (next_init < init.cols()) {
      Vector w = project(init.col(next_init++));
      if (w.norm() > 1e-3) {
        u0 = w.normalized();
        break;
      }
    }
    while (u0.size() == 0) {
      Vector w = project(rng.normal_vector(d));
      if (w.norm() > 1e-3) u0 = w.normalized();
    }

    // Minimize -I(normalize(P u)); the objective only sees P u.
    numerics::Objective objective = [&](const Vector& u, Vector& grad) {
      Vector w = project(u);
      const double nw = w.norm();
      if (!(nw > 1e-12)) throw std::runtime_error("extract_basis: iterate left the feasible set");
      Vector v = w / nw;
      Vector gv;
      double value = influence_with(v, f, h, clean_logp, ctx, &gv);
      grad = -project((gv - v * v.dot(gv)) / nw);
      return -value;
    };
    numerics::Retraction retract = [&](Vector& u, Vector& grad) {
      Vector w = project(u);
      const double nw = w.norm();
      u = w / nw;
      grad *= nw;
    };
    numerics::LbfgsResult res;
    try {
      res = numerics::lbfgs_minimize(objective, u0, lopt, retract);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("extract_basis: layer " + std::to_string(layer) + ", direction " +
                               std::to_string(i) + ": " + e.what());
    }
    Vector v = project(res.x).normalized();
    Q.conservativeResize(d, i + 1);
    Q.col(i) = v;
    sigma.push_back(influence_with(v, f, h, clean_logp, ctx, nullptr));
  }

  std::vector<std::size_t> order(sigma.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });
  CausalBasis out;
  out.layer = layer;
  out.vectors.resize(options.k, d);
  for (std::size_t r = 0; r < order.size(); ++r) {
    out.vectors.row(static_cast<Eigen::Index>(r)) = Q.col(static_cast<Eigen::Index>(order[r])).transpose();
    out.sigma.push_back(sigma[order[r]]);
  }
  return out;
}

double model_influence(const Vector& v, int layer, const Transformer& m, const Sequences& seqs,
                       const ErasureContext& ctx) {
  if (seqs.empty()) throw std::invalid_argument("model_influence: empty dataset");
  if (layer < 0 || layer > m.n_layers()) throw std::out_of_range("model_influence: bad layer");
  check_unit(v);
  double total = 0;
  long n = 0;
  for (const auto& s : seqs) {
    auto tr = model::forward_trace(m, s);
    Matrix ablated = mean_ablate(tr.hidden[static_cast<std::size_t>(layer)], v, ctx);
    Matrix lq = kernels::log_softmax<double>(model::run_suffix(m, layer, ablated));
    Matrix lp = kernels::log_softmax<double>(tr.logits);
    for (Eigen::Index r = 0; r < lp.rows(); ++r)
      total += std::max(0.0, numerics::kl_bits_from_logprobs(lp.row(r), lq.row(r)));
    n += lp.rows();
  }
  return total / static_cast<double>(n);
}

FidelityReport fidelity_report(const CausalBasis& basis, const std::vector<double>& lens_bits,
                               const std::vector<double>& model_bits) {
  if (lens_bits.size() != model_bits.size())
    throw std::invalid_argument("fidelity_report: length mismatch");
  FidelityReport rep;
  rep.layer = basis.layer;
  rep.spearman = numerics::spearman_rho(lens_bits, model_bits);
  for (std::size_t i = 0; i < lens_bits.size(); ++i)
    rep.rows.push_back({static_cast<int>(i), lens_bits[i], model_bits[i]});
  return rep;
}

Matrix probe_init(const Transformer& m, const lens::Translator& t) {
  Matrix linear = t.A.transpose() * m.lnf_g.row(0).transpose().asDiagonal() * m.unembed;  // d x V
  return singular_init(linear.transpose());
}

Matrix stacked_hidden(const Transformer& m, const Sequences& seqs, int layer) {
  if (seqs.empty()) throw std::invalid_argument("stacked_hidden: empty dataset");
  if (layer < 0 || layer > m.n_layers()) throw std::out_of_range("stacked_hidden: bad layer");
  std::vector<Matrix> parts;
  Eigen::Index rows = 0;
  for (const auto& s : seqs) {
    parts.push_back(model::forward_trace(m, s).hidden[static_cast<std::size_t>(layer)]);
    rows += parts.back().rows();
  }
  Matrix h(rows, m.d_model());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    h.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return h;
}

namespace {

lens::Translator translator_at(const Transformer& m, const lens::TunedLens* lens, int layer) {
  if (lens) lens->check_compatible(m.config);
  if (lens && layer < m.n_layers()) return lens->translators[static_cast<std::size_t>(layer)];
  return {Matrix::Identity(m.d_model(), m.d_model()), RowVector::Zero(m.d_model())};
}

}  // namespace

CausalBasis layer_basis(const Transformer& m, const lens::TunedLens* lens, const Sequences& seqs,
                        int layer, const CbeOptions& options) {
  Matrix h = stacked_hidden(m, seqs, layer);
  auto t = translator_at(m, lens, layer);
  LensMap f(m, t);
  return extract_basis(f, h, ErasureContext::from_rows(h), layer, options, probe_init(m, t));
}

FidelityReport layer_fidelity(const Transformer& m, const lens::TunedLens* lens,
                              const CausalBasis& basis, const Sequences& seqs) {
  Matrix h = stacked_hidden(m, seqs, basis.layer);
  auto ctx = ErasureContext::from_rows(h);
  LensMap f(m, translator_at(m, lens, basis.layer));
  std::vector<double> lens_bits, model_bits;
  for (Eigen::Index i = 0; i < basis.vectors.rows(); ++i) {
    Vector v = basis.vectors.row(i).transpose();
    lens_bits.push_back(influence(v, f, h, ctx));
    model_bits.push_back(model_influence(v, basis.layer, m, seqs, ctx));
  }
  return fidelity_report(basis, lens_bits, model_bits);
}

void add_basis(io::Container& c, const CausalBasis& basis) {
  const std::string prefix = "basis." + std::to_string(basis.layer);
  c.add(prefix + ".V", basis.vectors.cast<float>());
  RowVectorT<float> s(static_cast<Eigen::Index>(basis.sigma.size()));
  for (std::size_t i = 0; i < basis.sigma.size(); ++i) s(static_cast<Eigen::Index>(i)) = static_cast<float>(basis.sigma[i]);
  c.add_vector(prefix + ".sigma", s);
  auto& layers = c.header["layers"];
  if (!layers.is_array()) layers = nlohmann::json::array();
  layers.push_back(basis.layer);
}

CausalBasis basis_from_container(const io::Container& c, int layer) {
  const std::string prefix = "basis." + std::to_string(layer);
  CausalBasis b;
  b.layer = layer;
  b.vectors = c.get(prefix + ".V").data.cast<double>();
  // Stored as f32; restore unit norm.
  b.vectors.rowwise().normalize();
  const auto& s = c.get(prefix + ".sigma").data;
  if (s.size() != b.vectors.rows()) throw std::runtime_error("basis file: sigma length mismatch");
  for (Eigen::Index i = 0; i < s.size(); ++i) b.sigma.push_back(static_cast<double>(s(0, i)));
  return b;
}

void save_bases(const std::filesystem::path& path, const std::vector<CausalBasis>& bases) {
  io::Container c;
  c.header["kind"] = "basis";
  for (const auto& b : bases) add_basis(c, b);
  io::save(path, c);
}

std::vector<CausalBasis> load_bases(const std::filesystem::path& path) {
  io::Container c = io::load(path);
  if (c.header.value("kind", "") != "basis") throw std::runtime_error("basis file: wrong kind");
  std::vector<CausalBasis> out;
  for (const auto& l : c.header.at("layers")) out.push_back(basis_from_container(c, l.get<int>()));
  return out;
}

}  // namespace tuned_lens::causal
