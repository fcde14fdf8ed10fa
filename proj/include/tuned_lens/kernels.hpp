#pragma once

// Forward/backward kernels shared by the gradient tape and the tape-free model
// forward pass. Keeping a single implementation means both paths produce the
// same floating point results.

#include <cmath>
#include <limits>
#include <vector>

#include "tuned_lens/matrix.hpp"

namespace tuned_lens::kernels {

template <class T>
MatrixT<T> linear(const MatrixT<T>& x, const MatrixT<T>& w, const MatrixT<T>& bias) {
  MatrixT<T> out = x * w;
  out.rowwise() += bias.row(0);
  return out;
}

/// Row-wise LayerNorm. Optionally returns the normalized input and reciprocal
/// standard deviations needed by the backward pass.
template <class T>
MatrixT<T> layer_norm(const MatrixT<T>& x, const MatrixT<T>& gamma, const MatrixT<T>& beta,
                      T eps, MatrixT<T>* xhat_out = nullptr,
                      std::vector<T>* rstd_out = nullptr) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  MatrixT<T> out(n, d);
  if (xhat_out) xhat_out->resize(n, d);
  if (rstd_out) rstd_out->assign(static_cast<std::size_t>(n), T(0));
  for (Eigen::Index r = 0; r < n; ++r) {
    T mean = x.row(r).sum() / static_cast<T>(d);
    T var = (x.row(r).array() - mean).square().sum() / static_cast<T>(d);
    T rstd = T(1) / std::sqrt(var + eps);
    for (Eigen::Index c = 0; c < d; ++c) {
      T xh = (x(r, c) - mean) * rstd;
      if (xhat_out) (*xhat_out)(r, c) = xh;
      out(r, c) = xh * gamma(0, c) + beta(0, c);
    }
    if (rstd_out) (*rstd_out)[static_cast<std::size_t>(r)] = rstd;
  }
  return out;
}

template <class T>
void layer_norm_backward(const MatrixT<T>& dy, const MatrixT<T>& xhat, const std::vector<T>& rstd,
                         const MatrixT<T>& gamma, MatrixT<T>* dx, MatrixT<T>* dgamma,
                         MatrixT<T>* dbeta) {
  const Eigen::Index n = dy.rows();
  const Eigen::Index d = dy.cols();
  if (dgamma) dgamma->noalias() += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (dbeta) dbeta->noalias() += dy.colwise().sum();
  if (!dx) return;
  for (Eigen::Index r = 0; r < n; ++r) {
    T mean_dxhat = 0;
    T mean_dxhat_xhat = 0;
    for (Eigen::Index c = 0; c < d; ++c) {
      T g = dy(r, c) * gamma(0, c);
      mean_dxhat += g;
      mean_dxhat_xhat += g * xhat(r, c);
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    for (Eigen::Index c = 0; c < d; ++c) {
      T g = dy(r, c) * gamma(0, c);
      (*dx)(r, c) += rstd[static_cast<std::size_t>(r)] *
                     (g - mean_dxhat - xhat(r, c) * mean_dxhat_xhat);
    }
  }
}

// tanh approximation, as in GPT-2. Written as array expressions so Eigen
// vectorizes the tanh.
template <class T>
MatrixT<T> gelu(const MatrixT<T>& x) {
  const T k = static_cast<T>(0.7978845608028654);
  const T c = static_cast<T>(0.044715);
  auto v = x.array();
  return (T(0.5) * v * (T(1) + (k * (v + c * v.cube())).tanh())).matrix();
}

template <class T>
MatrixT<T> gelu_backward(const MatrixT<T>& x, const MatrixT<T>& dy) {
  const T k = static_cast<T>(0.7978845608028654);
  const T c = static_cast<T>(0.044715);
  auto v = x.array();
  Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t =
      (k * (v + c * v.cube())).tanh();
  auto du = k * (T(1) + T(3) * c * v.square());
  return ((T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t.square()) * du) * dy.array()).matrix();
}

template <class T>
MatrixT<T> log_softmax(const MatrixT<T>& x) {
  MatrixT<T> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    T m = x.row(r).maxCoeff();
    T s = (x.row(r).array() - m).exp().sum();
    T lse = m + std::log(s);
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

/// Multi-head causal self-attention over `n_seq` stacked sequences of equal
/// length. `qkv` has 3*d columns laid out as [Q | K | V]; heads are contiguous
/// column blocks inside each. Attention probabilities are written to `probs`
/// (one T x T matrix per sequence and head) when requested.
template <class T>
MatrixT<T> causal_attention(const MatrixT<T>& qkv, int n_seq, int n_heads,
                            std::vector<MatrixT<T>>* probs = nullptr) {
  const Eigen::Index rows = qkv.rows();
  const Eigen::Index d = qkv.cols() / 3;
  const Eigen::Index seq_len = rows / n_seq;
  const Eigen::Index dh = d / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  MatrixT<T> out(rows, d);
  if (probs) probs->assign(static_cast<std::size_t>(n_seq * n_heads), MatrixT<T>());
  MatrixT<T> scores(seq_len, seq_len);
  for (int s = 0; s < n_seq; ++s) {
    const Eigen::Index r0 = s * seq_len;
    for (int h = 0; h < n_heads; ++h) {
      auto q = qkv.block(r0, h * dh, seq_len, dh);
      auto k = qkv.block(r0, d + h * dh, seq_len, dh);
      auto v = qkv.block(r0, 2 * d + h * dh, seq_len, dh);
      scores.noalias() = q * k.transpose();
      for (Eigen::Index i = 0; i < seq_len; ++i) {
        T m = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j) {
          scores(i, j) *= scale;
          m = std::max(m, scores(i, j));
        }
        T sum = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          scores(i, j) = std::exp(scores(i, j) - m);
          sum += scores(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) scores(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < seq_len; ++j) scores(i, j) = 0;
      }
      out.block(r0, h * dh, seq_len, dh).noalias() = scores * v;
      if (probs) (*probs)[static_cast<std::size_t>(s * n_heads + h)] = scores;
    }
  }
  return out;
}

template <class T>
void causal_attention_backward(const MatrixT<T>& dout, const MatrixT<T>& qkv,
                               const std::vector<MatrixT<T>>& probs, int n_seq, int n_heads,
                               MatrixT<T>& dqkv) {
  const Eigen::Index rows = qkv.rows();
  const Eigen::Index d = qkv.cols() / 3;
  const Eigen::Index seq_len = rows / n_seq;
  const Eigen::Index dh = d / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  MatrixT<T> dp(seq_len, seq_len);
  for (int s = 0; s < n_seq; ++s) {
    const Eigen::Index r0 = s * seq_len;
    for (int h = 0; h < n_heads; ++h) {
      const MatrixT<T>& p = probs[static_cast<std::size_t>(s * n_heads + h)];
      auto q = qkv.block(r0, h * dh, seq_len, dh);
      auto k = qkv.block(r0, d + h * dh, seq_len, dh);
      auto v = qkv.block(r0, 2 * d + h * dh, seq_len, dh);
      auto dy = dout.block(r0, h * dh, seq_len, dh);
      dp.noalias() = dy * v.transpose();
      dqkv.block(r0, 2 * d + h * dh, seq_len, dh).noalias() += p.transpose() * dy;
      for (Eigen::Index i = 0; i < seq_len; ++i) {
        T dot = 0;
        for (Eigen::Index j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
        for (Eigen::Index j = 0; j <= i; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
        for (Eigen::Index j = i + 1; j < seq_len; ++j) dp(i, j) = 0;
      }
      dqkv.block(r0, h * dh, seq_len, dh).noalias() += dp * k;
      dqkv.block(r0, d + h * dh, seq_len, dh).noalias() += dp.transpose() * q;
    }
  }
}

}  // namespace tuned_lens::kernels
