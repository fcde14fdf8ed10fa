#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tuned_lens/kernels.hpp"
#include "tuned_lens/matrix.hpp"

namespace tuned_lens::numerics {

enum class Reduction { kMean, kSum };

/// Reverse-mode automatic differentiation over dense row-major matrices.
///
/// Every operation appends a node holding its forward value together with a
/// closure that recomputes the value (used by replay()) and a closure that
/// propagates the output gradient into the inputs. Values of leaves can be
/// swapped with set_value() and the whole graph re-evaluated with replay(),
/// which lets an optimizer build the objective once and evaluate it many
/// times.
///
/// The tape owns closures that refer back to it, so it is neither copyable
/// nor movable. A tape must only be used from one thread at a time.
template <class T>
class GradientTape {
 public:
  using Mat = MatrixT<T>;

  struct Var {
    int id = -1;
  };

  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  Var leaf(Mat value) { return push_leaf(std::move(value), true); }
  Var constant(Mat value) { return push_leaf(std::move(value), false); }

  void set_value(Var v, Mat value) {
    Node& n = node(v);
    if (n.forward) throw std::invalid_argument("set_value: not a leaf");
    if (value.rows() != n.value.rows() || value.cols() != n.value.cols())
      throw std::invalid_argument("set_value: shape mismatch");
    n.value = std::move(value);
  }

  const Mat& value(Var v) const { return node(v).value; }

  /// Gradient of the last backward() output with respect to `v`. Nodes that
  /// do not influence the output (or were never differentiated) get zeros.
  Mat grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Recomputes every derived node in recording order.
  void replay() {
    for (auto& n : nodes_) {
      if (n.forward) n.value = n.forward();
    }
  }

  void backward(Var output) {
    Node& out = node(output);
    if (out.value.rows() != 1 || out.value.cols() != 1)
      throw std::invalid_argument("backward: output must be a scalar");
    for (auto& n : nodes_) {
      if (n.requires_grad)
        n.grad = Mat::Zero(n.value.rows(), n.value.cols());
      else
        n.grad.resize(0, 0);
    }
    if (!out.requires_grad) return;
    out.grad(0, 0) = T(1);
    for (int i = output.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad && n.backward) n.backward(n.grad);
    }
  }

  // ---- operations -------------------------------------------------------

  Var matmul(Var a, Var b, bool transpose_b = false) {
    check_inner(a, b, transpose_b);
    auto fwd = [this, a, b, transpose_b]() -> Mat {
      if (transpose_b) return Mat(value(a) * value(b).transpose());
      return Mat(value(a) * value(b));
    };
    auto bwd = [this, a, b, transpose_b](const Mat& g) {
      if (needs(a)) {
        if (transpose_b)
          node(a).grad.noalias() += g * value(b);
        else
          node(a).grad.noalias() += g * value(b).transpose();
      }
      if (needs(b)) {
        if (transpose_b)
          node(b).grad.noalias() += g.transpose() * value(a);
        else
          node(b).grad.noalias() += value(a).transpose() * g;
      }
    };
    return push({a, b}, fwd, bwd);
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    auto fwd = [this, a, b]() -> Mat { return value(a) + value(b); };
    auto bwd = [this, a, b](const Mat& g) {
      if (needs(a)) node(a).grad += g;
      if (needs(b)) node(b).grad += g;
    };
    return push({a, b}, fwd, bwd);
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    auto fwd = [this, a, b]() -> Mat { return value(a) - value(b); };
    auto bwd = [this, a, b](const Mat& g) {
      if (needs(a)) node(a).grad += g;
      if (needs(b)) node(b).grad -= g;
    };
    return push({a, b}, fwd, bwd);
  }

  /// Adds a 1 x n row to every row of `a`.
  Var add_row(Var a, Var row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols())
      throw std::invalid_argument("add_row: row shape mismatch");
    auto fwd = [this, a, row]() -> Mat {
      Mat out = value(a);
      out.rowwise() += value(row).row(0);
      return out;
    };
    auto bwd = [this, a, row](const Mat& g) {
      if (needs(a)) node(a).grad += g;
      if (needs(row)) node(row).grad += g.colwise().sum();
    };
    return push({a, row}, fwd, bwd);
  }

  Var scale(Var a, T s) {
    auto fwd = [this, a, s]() -> Mat { return value(a) * s; };
    auto bwd = [this, a, s](const Mat& g) {
      if (needs(a)) node(a).grad += g * s;
    };
    return push({a}, fwd, bwd);
  }

  Var hadamard(Var a, Var b) {
    check_same(a, b, "hadamard");
    auto fwd = [this, a, b]() -> Mat { return value(a).cwiseProduct(value(b)); };
    auto bwd = [this, a, b](const Mat& g) {
      if (needs(a)) node(a).grad += g.cwiseProduct(value(b));
      if (needs(b)) node(b).grad += g.cwiseProduct(value(a));
    };
    return push({a, b}, fwd, bwd);
  }

  Var transpose(Var a) {
    auto fwd = [this, a]() -> Mat { return value(a).transpose(); };
    auto bwd = [this, a](const Mat& g) {
      if (needs(a)) node(a).grad += g.transpose();
    };
    return push({a}, fwd, bwd);
  }

  Var layer_norm(Var x, Var gamma, Var beta, T eps) {
    const auto d = value(x).cols();
    if (value(gamma).rows() != 1 || value(gamma).cols() != d || value(beta).rows() != 1 ||
        value(beta).cols() != d)
      throw std::invalid_argument("layer_norm: parameter shape mismatch");
    auto cache = std::make_shared<std::pair<Mat, std::vector<T>>>();
    auto fwd = [this, x, gamma, beta, eps, cache]() -> Mat {
      return kernels::layer_norm<T>(value(x), value(gamma), value(beta), eps, &cache->first,
                                    &cache->second);
    };
    auto bwd = [this, x, gamma, beta, cache](const Mat& g) {
      kernels::layer_norm_backward<T>(g, cache->first, cache->second, value(gamma),
                                      needs(x) ? &node(x).grad : nullptr,
                                      needs(gamma) ? &node(gamma).grad : nullptr,
                                      needs(beta) ? &node(beta).grad : nullptr);
    };
    return push({x, gamma, beta}, fwd, bwd);
  }

  Var gelu(Var x) {
    auto fwd = [this, x]() -> Mat { return kernels::gelu<T>(value(x)); };
    auto bwd = [this, x](const Mat& g) {
      if (needs(x)) node(x).grad += kernels::gelu_backward<T>(value(x), g);
    };
    return push({x}, fwd, bwd);
  }

  /// Causal multi-head self-attention; see kernels::causal_attention.
  Var causal_attention(Var qkv, int n_seq, int n_heads) {
    const auto& q = value(qkv);
    if (q.cols() % 3 != 0 || (q.cols() / 3) % n_heads != 0 || n_seq <= 0 ||
        q.rows() % n_seq != 0)
      throw std::invalid_argument("causal_attention: bad shapes");
    auto probs = std::make_shared<std::vector<Mat>>();
    auto fwd = [this, qkv, n_seq, n_heads, probs]() -> Mat {
      return kernels::causal_attention<T>(value(qkv), n_seq, n_heads, probs.get());
    };
    auto bwd = [this, qkv, n_seq, n_heads, probs](const Mat& g) {
      if (needs(qkv))
        kernels::causal_attention_backward<T>(g, value(qkv), *probs, n_seq, n_heads,
                                              node(qkv).grad);
    };
    return push({qkv}, fwd, bwd);
  }

  /// Row gather: out.row(i) = table.row(ids[i]).
  Var gather_rows(Var table, std::vector<int> ids) {
    for (int id : ids)
      if (id < 0 || id >= value(table).rows())
        throw std::out_of_range("gather_rows: index out of range");
    auto shared = std::make_shared<const std::vector<int>>(std::move(ids));
    auto fwd = [this, table, shared]() -> Mat {
      const Mat& t = value(table);
      Mat out(static_cast<Eigen::Index>(shared->size()), t.cols());
      for (std::size_t i = 0; i < shared->size(); ++i)
        out.row(static_cast<Eigen::Index>(i)) = t.row((*shared)[i]);
      return out;
    };
    auto bwd = [this, table, shared](const Mat& g) {
      if (!needs(table)) return;
      Mat& dt = node(table).grad;
      for (std::size_t i = 0; i < shared->size(); ++i)
        dt.row((*shared)[i]) += g.row(static_cast<Eigen::Index>(i));
    };
    return push({table}, fwd, bwd);
  }

  Var log_softmax(Var x) {
    auto fwd = [this, x]() -> Mat { return kernels::log_softmax<T>(value(x)); };
    int self = static_cast<int>(nodes_.size());
    auto bwd = [this, x, self](const Mat& g) {
      if (!needs(x)) return;
      const Mat& out = nodes_[static_cast<std::size_t>(self)].value;
      Mat p = out.array().exp();
      Eigen::Matrix<T, Eigen::Dynamic, 1> rs = g.rowwise().sum();
      Mat dx = g - (p.array().colwise() * rs.array()).matrix();
      node(x).grad += dx;
    };
    return push({x}, fwd, bwd);
  }

  /// Next-token cross-entropy in nats. Rows whose target is negative are
  /// ignored. With kMean the sum is divided by the number of counted rows.
  Var cross_entropy(Var logits, std::vector<int> targets, Reduction reduction = Reduction::kMean,
                    const Mat* logit_mask = nullptr) {
    if (static_cast<Eigen::Index>(targets.size()) != value(logits).rows())
      throw std::invalid_argument("cross_entropy: target count mismatch");
    for (int t : targets)
      if (t >= value(logits).cols()) throw std::out_of_range("cross_entropy: target out of range");
    Var src = logits;
    if (logit_mask) src = add_row(logits, constant(*logit_mask));
    auto shared = std::make_shared<const std::vector<int>>(std::move(targets));
    auto fwd = [this, src, shared, reduction]() -> Mat {
      Mat lp = kernels::log_softmax<T>(value(src));
      T total = 0;
      int count = 0;
      for (std::size_t i = 0; i < shared->size(); ++i) {
        int t = (*shared)[i];
        if (t < 0) continue;
        total -= lp(static_cast<Eigen::Index>(i), t);
        ++count;
      }
      if (reduction == Reduction::kMean && count > 0) total /= static_cast<T>(count);
      Mat out(1, 1);
      out(0, 0) = total;
      return out;
    };
    auto bwd = [this, src, shared, reduction](const Mat& g) {
      if (!needs(src)) return;
      Mat p = kernels::log_softmax<T>(value(src)).array().exp();
      int count = 0;
      for (int t : *shared) count += t >= 0 ? 1 : 0;
      T factor = g(0, 0);
      if (reduction == Reduction::kMean && count > 0) factor /= static_cast<T>(count);
      Mat& dz = node(src).grad;
      for (std::size_t i = 0; i < shared->size(); ++i) {
        int t = (*shared)[i];
        if (t < 0) continue;
        auto r = static_cast<Eigen::Index>(i);
        dz.row(r) += factor * p.row(r);
        dz(r, t) -= factor;
      }
    };
    return push({src}, fwd, bwd);
  }

  /// Mean over rows of KL(softmax(target_logits) || softmax(logits)), in nats.
  Var kl_divergence(Var target_logits, Var logits) {
    check_same(target_logits, logits, "kl_divergence");
    auto fwd = [this, target_logits, logits]() -> Mat {
      Mat lp = kernels::log_softmax<T>(value(target_logits));
      Mat lq = kernels::log_softmax<T>(value(logits));
      Mat out(1, 1);
      out(0, 0) = (lp.array().exp() * (lp - lq).array()).sum() / static_cast<T>(lp.rows());
      return out;
    };
    auto bwd = [this, target_logits, logits](const Mat& g) {
      Mat lp = kernels::log_softmax<T>(value(target_logits));
      Mat lq = kernels::log_softmax<T>(value(logits));
      Mat p = lp.array().exp();
      const T factor = g(0, 0) / static_cast<T>(lp.rows());
      if (needs(logits)) node(logits).grad += factor * (Mat(lq.array().exp()) - p);
      if (needs(target_logits)) {
        Mat diff = lp - lq;
        Eigen::Matrix<T, Eigen::Dynamic, 1> row_kl = (p.array() * diff.array()).rowwise().sum();
        Mat d = p.array() * (diff.array().colwise() - row_kl.array());
        node(target_logits).grad += factor * d;
      }
    };
    return push({target_logits, logits}, fwd, bwd);
  }

  Var sum(Var a) {
    auto fwd = [this, a]() -> Mat {
      Mat out(1, 1);
      out(0, 0) = value(a).sum();
      return out;
    };
    auto bwd = [this, a](const Mat& g) {
      if (needs(a)) node(a).grad.array() += g(0, 0);
    };
    return push({a}, fwd, bwd);
  }

  Var mean(Var a) {
    return scale(sum(a), T(1) / static_cast<T>(value(a).size()));
  }

  /// a / ||a||_F.
  Var normalize(Var a) {
    int self = static_cast<int>(nodes_.size());
    auto fwd = [this, a]() -> Mat {
      T n = value(a).norm();
      if (!(n > T(0))) throw std::domain_error("normalize: zero-norm input");
      return value(a) / n;
    };
    auto bwd = [this, a, self](const Mat& g) {
      if (!needs(a)) return;
      const Mat& out = nodes_[static_cast<std::size_t>(self)].value;
      T n = value(a).norm();
      T dot = (out.array() * g.array()).sum();
      node(a).grad += (g - dot * out) / n;
    };
    return push({a}, fwd, bwd);
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::function<Mat()> forward;
    std::function<void(const Mat&)> backward;
  };

  Node& node(Var v) {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw std::out_of_range("GradientTape: invalid variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw std::out_of_range("GradientTape: invalid variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  bool needs(Var v) const { return node(v).requires_grad; }

  Var push_leaf(Mat value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var push(std::initializer_list<Var> inputs, std::function<Mat()> fwd,
           std::function<void(const Mat&)> bwd) {
    Node n;
    for (Var in : inputs) n.requires_grad = n.requires_grad || needs(in);
    n.value = fwd();
    n.forward = std::move(fwd);
    if (n.requires_grad) n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void check_same(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
  void check_inner(Var a, Var b, bool transpose_b) const {
    auto inner = transpose_b ? value(b).cols() : value(b).rows();
    if (value(a).cols() != inner) throw std::invalid_argument("matmul: inner dimension mismatch");
  }

  std::vector<Node> nodes_;
};

extern template class GradientTape<float>;
extern template class GradientTape<double>;

}  // namespace tuned_lens::numerics
