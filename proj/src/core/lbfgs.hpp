#ifndef PFEDGM_LBFGS_HPP
#define PFEDGM_LBFGS_HPP

#include <functional>

#include "core/numeric.hpp"

namespace pfedgm {

struct LbfgsConfig {
  int memory = 10;
  int max_iterations = 10;
  double initial_step = 1.0;       // first-iteration trial step along -g
  double armijo_c1 = 1e-4;
  double backtrack_factor = 0.5;
  int max_backtracks = 20;
  double grad_tol = 1e-10;         // stop when ||g||_inf falls below
};

struct LbfgsResult {
  Vec x;
  double f = 0.0;
  int iterations = 0;
  bool converged = false;          // gradient tolerance reached
  bool line_search_failed = false; // backtracking exhausted; last accepted iterate kept
  std::vector<double> f_trace;     // f at x0 followed by every accepted step
};

// Objective with gradient: returns f(x) and fills grad (same size as x).
using ObjectiveGrad = std::function<double(const Vec&, Vec&)>;

// Limited-memory BFGS with the two-loop recursion and Armijo backtracking.
// Later iterations try a unit step on the gamma-scaled direction; only
// sufficient-decrease steps are accepted, so f never increases.
LbfgsResult lbfgs_minimize(const ObjectiveGrad& fg, Vec x0, const LbfgsConfig& cfg);

}  // namespace pfedgm

#endif
