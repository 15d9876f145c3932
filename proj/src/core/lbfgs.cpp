#include "core/lbfgs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace pfedgm {

namespace {

double inf_norm(const Vec& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double l1_norm(const Vec& v) {
  double s = 0.0;
  for (double x : v) s += std::abs(x);
  return s;
}

struct Correction {
  Vec s;
  Vec y;
  double rho;
};

// Two-loop recursion: direction = -H g with H0 = gamma I.
Vec two_loop(const Vec& grad, const std::deque<Correction>& hist) {
  Vec q = grad;
  std::vector<double> alpha(hist.size());
  for (size_t i = hist.size(); i-- > 0;) {
    alpha[i] = hist[i].rho * dot(hist[i].s, q);
    vec_add_scaled(q, hist[i].y, -alpha[i]);
  }
  double gamma = 1.0;
  if (!hist.empty()) {
    const Correction& last = hist.back();
    gamma = dot(last.s, last.y) / dot(last.y, last.y);
  }
  for (double& v : q) v *= gamma;
  for (size_t i = 0; i < hist.size(); ++i) {
    const double beta = hist[i].rho * dot(hist[i].y, q);
    vec_add_scaled(q, hist[i].s, alpha[i] - beta);
  }
  for (double& v : q) v = -v;
  return q;
}

}  // namespace

LbfgsResult lbfgs_minimize(const ObjectiveGrad& fg, Vec x0, const LbfgsConfig& cfg) {
  LbfgsResult res;
  res.x = std::move(x0);
  const size_t n = res.x.size();

  Vec grad(n);
  res.f = fg(res.x, grad);
  res.f_trace.push_back(res.f);
  std::deque<Correction> hist;

  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    if (inf_norm(grad) < cfg.grad_tol) {
      res.converged = true;
      break;
    }
    Vec dir;
    double trial;
    if (hist.empty()) {
      dir = grad;
      for (double& v : dir) v = -v;
      trial = cfg.initial_step * std::min(1.0, 1.0 / l1_norm(grad));
    } else {
      dir = two_loop(grad, hist);
      trial = 1.0;
    }

    double slope = dot(grad, dir);
    if (slope >= 0.0) {
      // Not a descent direction (stale curvature); fall back to steepest descent.
      dir = grad;
      for (double& v : dir) v = -v;
      slope = dot(grad, dir);
      hist.clear();
    }
    if (-slope <= 1e-16 * std::max(1.0, std::abs(res.f))) {
      // Remaining directional decrease is below float resolution.
      res.converged = true;
      break;
    }

    Vec x_new(n);
    Vec grad_new(n);
    double f_new = res.f;
    bool accepted = false;
    for (int bt = 0; bt <= cfg.max_backtracks; ++bt) {
      for (size_t j = 0; j < n; ++j) x_new[j] = res.x[j] + trial * dir[j];
      f_new = fg(x_new, grad_new);
      if (bt == 0 && std::isfinite(f_new)) {
        // One quadratic-interpolation refinement along the ray; exact on
        // quadratic objectives, harmless otherwise.
        const double denom = 2.0 * (f_new - res.f - slope * trial);
        if (denom > 0.0) {
          const double t_q = -slope * trial * trial / denom;
          if (std::isfinite(t_q) && t_q > 1e-3 * trial && t_q < 1e3 * trial) {
            Vec x_q(n);
            Vec grad_q(n);
            for (size_t j = 0; j < n; ++j) x_q[j] = res.x[j] + t_q * dir[j];
            const double f_q = fg(x_q, grad_q);
            if (std::isfinite(f_q) && f_q < f_new) {
              trial = t_q;
              f_new = f_q;
              x_new = std::move(x_q);
              grad_new = std::move(grad_q);
            }
          }
        }
      }
      if (std::isfinite(f_new) && f_new <= res.f + cfg.armijo_c1 * trial * slope) {
        accepted = true;
        break;
      }
      trial *= cfg.backtrack_factor;
    }
    if (!accepted) {
      res.line_search_failed = true;
      break;
    }

    Correction corr;
    corr.s.resize(n);
    corr.y.resize(n);
    for (size_t j = 0; j < n; ++j) {
      corr.s[j] = x_new[j] - res.x[j];
      corr.y[j] = grad_new[j] - grad[j];
    }
    const double sy = dot(corr.s, corr.y);
    if (sy > 1e-12 * dot(corr.y, corr.y)) {  // curvature condition
      corr.rho = 1.0 / sy;
      hist.push_back(std::move(corr));
      if (static_cast<int>(hist.size()) > cfg.memory) hist.pop_front();
    }

    res.x = std::move(x_new);
    grad = std::move(grad_new);
    res.f = f_new;
    res.f_trace.push_back(res.f);
    res.iterations = iter + 1;
  }
  return res;
}

}  // namespace pfedgm
