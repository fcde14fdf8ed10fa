#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "tuned_lens/anomaly.hpp"
#include "tuned_lens/causal.hpp"
#include "tuned_lens/numerics.hpp"

namespace oracles {

using tuned_lens::Matrix;
using tuned_lens::RowVector;
using tuned_lens::Vector;

// Textbook LOF on explicit loops.
struct LofRef {
  Matrix x;
  int k;

  double dist(const RowVector& a, const RowVector& b) const { return (a - b).norm(); }

  std::vector<int> nbrs(const RowVector& q, int skip, double* kd) const {
    std::vector<double> ds;
    for (int i = 0; i < x.rows(); ++i)
      if (i != skip) ds.push_back(dist(q, x.row(i)));
    std::sort(ds.begin(), ds.end());
    *kd = ds[static_cast<std::size_t>(k - 1)];
    std::vector<int> out;
    for (int i = 0; i < x.rows(); ++i)
      if (i != skip && dist(q, x.row(i)) <= *kd) out.push_back(i);
    return out;
  }
  double kdist(int i) const {
    double kd;
    nbrs(x.row(i), i, &kd);
    return kd;
  }
  double reach(const RowVector& q, int o) const {
    return std::max({kdist(o), dist(q, x.row(o)), 1e-12});
  }
  double lrd_of(const RowVector& q, int skip) const {
    double kd;
    auto nb = nbrs(q, skip, &kd);
    double s = 0;
    for (int o : nb) s += reach(q, o);
    return static_cast<double>(nb.size()) / s;
  }
  double score(const RowVector& q) const {
    double kd;
    auto nb = nbrs(q, -1, &kd);
    double s = 0;
    for (int o : nb) s += lrd_of(x.row(o), o);
    return s / static_cast<double>(nb.size()) / lrd_of(q, -1);
  }
};

// 2^(-E[h(x)] / c(psi)) walking the fitted trees by hand.
inline double iforest_formula_score(const tuned_lens::anomaly::IsolationForest& f, const RowVector& q) {
  double mean = 0;
  for (const auto& t : f.trees()) {
    int id = 0, depth = 0;
    while (t.nodes[static_cast<std::size_t>(id)].feature >= 0) {
      const auto& n = t.nodes[static_cast<std::size_t>(id)];
      id = q(n.feature) < n.threshold ? n.left : n.right;
      ++depth;
    }
    mean += depth + tuned_lens::anomaly::iforest_c(t.nodes[static_cast<std::size_t>(id)].size);
  }
  mean /= static_cast<double>(f.trees().size());
  return std::pow(2.0, -mean / tuned_lens::anomaly::iforest_c(f.subsample_size()));
}

// Fraction of (pos, neg) pairs ordered correctly, ties counting half.
inline double pairwise_auroc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double s = 0;
  for (double p : pos)
    for (double n : neg) s += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return s / static_cast<double>(pos.size() * neg.size());
}

inline Vector unit(const Vector& v) { return v / v.norm(); }

// Orthonormal d x r basis of a random r-dim subspace.
inline Matrix random_subspace(int d, int r, std::uint64_t seed) {
  tuned_lens::numerics::Rng rng(seed);
  Eigen::HouseholderQR<Matrix> qr(rng.normal_matrix(d, r, 1.0));
  return qr.householderQ() * Matrix::Identity(d, r);
}

// f(h) = softmax(M P h): reads only the planted subspace spanned by U.
inline tuned_lens::causal::AffineMap planted_map(const Matrix& U, int vocab, std::uint64_t seed) {
  tuned_lens::numerics::Rng rng(seed);
  Matrix M = rng.normal_matrix(vocab, U.rows(), 2.0);
  Matrix P = U * U.transpose();
  return tuned_lens::causal::AffineMap(P * M.transpose(), RowVector::Zero(vocab));
}

// Both d x r with orthonormal columns.
inline double sin_largest_angle(const Matrix& A, const Matrix& B) {
  Matrix resid = B - A * (A.transpose() * B);
  return Eigen::JacobiSVD<Matrix>(resid).singularValues()(0);
}

}  // namespace oracles
