#include "tuned_lens/lbfgs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>
#include <stdexcept>

namespace tuned_lens::numerics {

namespace {

double evaluate(const Objective& objective, const Vector& x, Vector& grad) {
  grad.resize(x.size());
  double f = objective(x, grad);
  if (!std::isfinite(f) || !grad.allFinite()) {
    std::ostringstream msg;
    msg << "optimizer diverged: non-finite objective (value " << f << ", |x| " << x.norm()
        << ")";
    throw std::runtime_error(msg.str());
  }
  return f;
}

// Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db), clamped
// to stay well inside [lo, hi]. Falls back to bisection.
double cubic_step(double a, double fa, double da, double b, double fb, double db) {
  double lo = std::min(a, b);
  double hi = std::max(a, b);
  double d1 = da + db - 3 * (fa - fb) / (a - b);
  double disc = d1 * d1 - da * db;
  double mid = 0.5 * (a + b);
  if (disc < 0 || !std::isfinite(disc)) return mid;
  double d2 = std::copysign(std::sqrt(disc), b - a);
  double denom = db - da + 2 * d2;
  if (denom == 0) return mid;
  double t = b - (b - a) * (db + d2 - d1) / denom;
  if (!std::isfinite(t)) return mid;
  double margin = 0.1 * (hi - lo);
  if (t < lo + margin || t > hi - margin) return mid;
  return t;
}

}  // namespace

LineSearchResult strong_wolfe_line_search(const Objective& objective, const Vector& x,
                                          double value, const Vector& gradient,
                                          const Vector& direction, double initial_step,
                                          const LbfgsOptions& options) {
  LineSearchResult out;
  const double d0 = gradient.dot(direction);
  if (!(d0 < 0)) return out;

  Vector g_trial;
  auto phi = [&](double step, double& deriv, Vector& xt) {
    xt = x + step * direction;
    double f = evaluate(objective, xt, g_trial);
    ++out.evaluations;
    deriv = g_trial.dot(direction);
    return f;
  };
  auto accept = [&](double step, double f, const Vector& xt) {
    out.ok = true;
    out.step = step;
    out.value = f;
    out.x = xt;
    out.gradient = g_trial;
    return out;
  };

  double prev_step = 0, prev_f = value, prev_d = d0;
  double step = initial_step;
  Vector xt;
  for (int i = 0; out.evaluations < options.max_line_search_evaluations; ++i) {
    double d = 0;
    double f = phi(step, d, xt);
    bool zoom = false;
    double lo = 0, flo = 0, dlo = 0, hi = 0, fhi = 0, dhi = 0;
    if (f > value + options.c1 * step * d0 || (i > 0 && f >= prev_f)) {
      zoom = true;
      lo = prev_step, flo = prev_f, dlo = prev_d;
      hi = step, fhi = f, dhi = d;
    } else if (std::abs(d) <= -options.c2 * d0) {
      return accept(step, f, xt);
    } else if (d >= 0) {
      zoom = true;
      lo = step, flo = f, dlo = d;
      hi = prev_step, fhi = prev_f, dhi = prev_d;
    }
    if (zoom) {
      while (out.evaluations < options.max_line_search_evaluations) {
        if (std::abs(hi - lo) < 1e-16 * std::max(1.0, std::abs(lo))) break;
        double trial = cubic_step(lo, flo, dlo, hi, fhi, dhi);
        double dt = 0;
        double ft = phi(trial, dt, xt);
        if (ft > value + options.c1 * trial * d0 || ft >= flo) {
          hi = trial, fhi = ft, dhi = dt;
        } else {
          if (std::abs(dt) <= -options.c2 * d0) return accept(trial, ft, xt);
          if (dt * (hi - lo) >= 0) {
            hi = lo, fhi = flo, dhi = dlo;
          }
          lo = trial, flo = ft, dlo = dt;
        }
      }
      // Out of budget: accept the best sufficient-decrease point if any.
      if (lo > 0 && flo <= value + options.c1 * lo * d0) {
        double dl = 0;
        double fl = phi(lo, dl, xt);
        return accept(lo, fl, xt);
      }
      return out;
    }
    prev_step = step, prev_f = f, prev_d = d;
    step *= 2;
  }
  return out;
}

LbfgsResult lbfgs_minimize(const Objective& objective, Vector x0, const LbfgsOptions& options,
                           const Retraction& retract) {
  LbfgsResult res;
  res.x = std::move(x0);
  res.value = evaluate(objective, res.x, res.gradient);
  res.evaluations = 1;
  if (retract) retract(res.x, res.gradient);

  std::deque<Vector> s_hist, y_hist;
  std::deque<double> rho_hist;
  for (res.iterations = 0; res.iterations < options.max_iterations; ++res.iterations) {
    if (res.gradient.norm() < options.gradient_tolerance) {
      res.status = LbfgsStatus::kConverged;
      return res;
    }
    // Two-loop recursion.
    Vector q = res.gradient;
    std::vector<double> alpha(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      auto k = static_cast<std::size_t>(i);
      alpha[k] = rho_hist[k] * s_hist[k].dot(q);
      q -= alpha[k] * y_hist[k];
    }
    double gamma = 1.0;
    if (!s_hist.empty()) gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    q *= gamma;
    for (std::size_t k = 0; k < s_hist.size(); ++k) {
      double beta = rho_hist[k] * y_hist[k].dot(q);
      q += (alpha[k] - beta) * s_hist[k];
    }
    Vector direction = -q;
    double initial = 1.0;
    if (s_hist.empty() || res.gradient.dot(direction) >= 0) {
      s_hist.clear(), y_hist.clear(), rho_hist.clear();
      direction = -res.gradient;
      initial = 1.0 / std::max(res.gradient.norm(), 1e-300);
      initial = std::min(initial, 1.0);
    }

    LineSearchResult ls = strong_wolfe_line_search(objective, res.x, res.value, res.gradient,
                                                   direction, initial, options);
    res.evaluations += ls.evaluations;
    if (!ls.ok) {
      if (!s_hist.empty()) {
        s_hist.clear(), y_hist.clear(), rho_hist.clear();
        continue;
      }
      res.status = LbfgsStatus::kLineSearchFailed;
      return res;
    }
    Vector x_new = std::move(ls.x);
    Vector g_new = std::move(ls.gradient);
    if (retract) retract(x_new, g_new);
    Vector s = x_new - res.x;
    Vector y = g_new - res.gradient;
    double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > options.history) {
        s_hist.pop_front(), y_hist.pop_front(), rho_hist.pop_front();
      }
    }
    res.x = std::move(x_new);
    res.gradient = std::move(g_new);
    res.value = ls.value;
  }
  res.status = res.gradient.norm() < options.gradient_tolerance ? LbfgsStatus::kConverged
                                                                 : LbfgsStatus::kMaxIterations;
  return res;
}

}  // namespace tuned_lens::numerics
