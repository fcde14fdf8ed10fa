#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tuned_lens/data.hpp"
#include "tuned_lens/lens.hpp"
#include "tuned_lens/matrix.hpp"
#include "tuned_lens/model.hpp"
#include "tuned_lens/numerics.hpp"

namespace tuned_lens::anomaly {

/// Delimiter lines and instruction appended to a prompt by the injection attack.
std::string attack_text(const std::string& wrong_answer);

/// Appends the attack with a seeded random incorrect option (leading
/// whitespace stripped). Gold is unchanged. Throws for fewer than two options.
data::McItem inject_prompt(const data::McItem& item, std::uint64_t seed);

enum class DemoMode { kNone, kCorrect, kIncorrect };

/// Demonstrations whose flag matches the mode, concatenated, then the prompt.
std::string build_context(const data::McItem& item, DemoMode demos = DemoMode::kNone);

/// (L+1) x C summed log-probabilities of each option's tokens under the lens
/// at every layer; the last row is the model itself.
struct Trajectory {
  Matrix logprobs;
  /// Last hidden state of the context at each layer (rows 0..L).
  Matrix last_hidden;

  /// Binary tasks: per-layer logprob(option 0) - logprob(option 1).
  /// Otherwise the row-major flattening of logprobs.
  Vector features() const;
};

/// Throws std::length_error if context + option exceeds the model's context.
/// `lens` null means the plain logit lens.
Trajectory trajectory(const model::Transformer& m, const lens::TunedLens* lens,
                      const data::McItem& item, DemoMode demos = DemoMode::kNone);

// ---- detectors --------------------------------------------------------------

class Detector {
 public:
  virtual ~Detector() = default;
  /// Rows are training points. May only be called once.
  virtual void fit(const Matrix& x) = 0;
  /// Higher means more anomalous.
  virtual double score(const Eigen::Ref<const RowVector>& x) const = 0;
  Vector score_all(const Matrix& x) const;
};

/// c(n) = 2 H(n-1) - 2 (n-1) / n with exact harmonic numbers; c(1) = 0.
double iforest_c(double n);

class IsolationForest : public Detector {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0;
    int left = -1;
    int right = -1;
    int size = 0;  // training points reaching the node
  };
  struct Tree {
    std::vector<Node> nodes;     // nodes[0] is the root
    std::vector<int> sample;     // training rows used by the tree
  };

  explicit IsolationForest(int n_trees = 100, int subsample = 256, std::uint64_t seed = 0);
  void fit(const Matrix& x) override;
  double score(const Eigen::Ref<const RowVector>& x) const override;
  /// Path length of x in one tree, including the c(size) leaf adjustment.
  double path_length(const Tree& tree, const Eigen::Ref<const RowVector>& x) const;

  const std::vector<Tree>& trees() const { return trees_; }
  int subsample_size() const { return psi_; }

 private:
  int n_trees_;
  int subsample_;
  std::uint64_t seed_;
  int psi_ = 0;
  std::vector<Tree> trees_;
};

/// Local outlier factor with queries scored against the training set.
/// Training LRDs exclude each point itself; duplicates count as neighbours
/// at distance 0, with reachability distances floored at 1e-12.
class Lof : public Detector {
 public:
  /// k < 0 selects min(20, n - 1) at fit time; an explicit k > n - 1 throws.
  explicit Lof(int k = -1);
  void fit(const Matrix& x) override;
  double score(const Eigen::Ref<const RowVector>& x) const override;

  int k() const { return k_; }
  const Vector& k_distances() const { return k_dist_; }
  const Vector& lrd() const { return lrd_; }

 private:
  // Indices of the k nearest training points (ties at the k-distance
  // included) and that k-distance. `skip` excludes one training row.
  std::vector<int> neighbours(const Eigen::Ref<const RowVector>& x, int skip, double* k_dist) const;

  int k_request_;
  int k_ = 0;
  Matrix train_;
  Vector k_dist_;
  Vector lrd_;
};

/// Relative Mahalanobis score: MD^2(x; mu, Sigma + 1e-6 I) minus
/// MD^2(x; mu, s^2 I) with s^2 the mean per-dimension variance. When
/// n <= d the data is first projected onto its top `pca_dims` principal
/// components.
class Srm : public Detector {
 public:
  explicit Srm(int pca_dims = 32, bool background = true);
  void fit(const Matrix& x) override;
  double score(const Eigen::Ref<const RowVector>& x) const override;
  const RowVector& mean() const { return mu_; }

 private:
  int pca_dims_;
  bool background_;
  Matrix projection_;  // d x d' (identity when no PCA)
  RowVector mu_;
  Eigen::LLT<Matrix> chol_;
  double iso_var_ = 1;
};

enum class DetectorKind { kIsolationForest, kLof, kSrm };
DetectorKind detector_from_string(const std::string& name);
std::string to_string(DetectorKind kind);
std::unique_ptr<Detector> make_detector(DetectorKind kind, std::uint64_t seed);

// ---- evaluation -------------------------------------------------------------

struct DetectOptions {
  DetectorKind detector = DetectorKind::kLof;
  int n_splits = 10;
  std::uint64_t seed = 0;
  bool inject = true;
  int bootstrap_resamples = 1000;
};

struct DetectResult {
  double auroc = 0;
  numerics::Interval ci;
  /// Final-layer accuracy on clean and on injected prompts (all items);
  /// without injection both are the clean accuracy.
  double acc_normal = 0;
  double acc_injected = 0;
  long n_pos = 0;
  long n_neg = 0;
};

/// Per split: normal items are shuffled, 70% train the detector, and the
/// remaining 30% are halved into clean negatives and positives that are
/// injected when `inject` is set. Scores from all splits are pooled into one
/// AUROC with a stratified bootstrap interval.
DetectResult detect_eval(const data::McTask& task, const model::Transformer& m,
                         const lens::TunedLens* lens, const DetectOptions& options);

/// The split-and-pool protocol on precomputed features: row i of `clean` and
/// `attacked` belong to item i. `attacked` is ignored when inject is off.
/// Accuracies are left at 0.
DetectResult detect_from_features(const Matrix& clean, const Matrix& attacked,
                                  const DetectOptions& options);

enum class Calibration { kNone, kMedian };

/// Accuracy of the per-layer argmax over option log-probabilities, rows
/// 0..L. Median calibration subtracts each option's median score over the
/// task at that layer first.
std::vector<double> layer_accuracy_sweep(const data::McTask& task, const model::Transformer& m,
                                         const lens::TunedLens* lens, DemoMode demos,
                                         Calibration calibration);

/// Same, from precomputed per-item score matrices ((L+1) x C each).
std::vector<double> layer_accuracy(const std::vector<Matrix>& scores, const std::vector<int>& gold,
                                   Calibration calibration);

}  // namespace tuned_lens::anomaly
