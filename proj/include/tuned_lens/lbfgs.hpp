#pragma once

#include <functional>

#include "tuned_lens/matrix.hpp"

namespace tuned_lens::numerics {

/// Objective evaluated at x; writes the gradient into `grad` and returns the
/// function value.
using Objective = std::function<double(const Vector& x, Vector& grad)>;

/// Optional map applied after each accepted step. It may move x and must
/// update the gradient consistently (e.g. rescaling for scale-invariant
/// objectives).
using Retraction = std::function<void(Vector& x, Vector& grad)>;

struct LbfgsOptions {
  int max_iterations = 100;
  int history = 10;
  double gradient_tolerance = 1e-6;
  /// Sufficient-decrease and curvature constants of the strong Wolfe test.
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_line_search_evaluations = 30;
};

enum class LbfgsStatus { kConverged, kMaxIterations, kLineSearchFailed };

struct LbfgsResult {
  Vector x;
  double value = 0;
  Vector gradient;
  int iterations = 0;
  int evaluations = 0;
  LbfgsStatus status = LbfgsStatus::kMaxIterations;
};

struct LineSearchResult {
  bool ok = false;
  double step = 0;
  double value = 0;
  Vector x;
  Vector gradient;
  int evaluations = 0;
};

/// Line search satisfying the strong Wolfe conditions along `direction`,
/// which must be a descent direction at x. Bracketing followed by zoom with
/// safeguarded cubic interpolation.
LineSearchResult strong_wolfe_line_search(const Objective& objective, const Vector& x,
                                          double value, const Vector& gradient,
                                          const Vector& direction, double initial_step,
                                          const LbfgsOptions& options);

/// Limited-memory BFGS minimization. Throws std::runtime_error if the
/// objective returns a non-finite value or gradient.
LbfgsResult lbfgs_minimize(const Objective& objective, Vector x0,
                           const LbfgsOptions& options = {}, const Retraction& retract = {});

}  // namespace tuned_lens::numerics
