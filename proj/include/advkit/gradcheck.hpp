#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "advkit/tensor.hpp"

namespace advkit {

// Central-difference gradient of a scalar function, one coordinate at a time:
//   (f(x + h e_i) - f(x - h e_i)) / 2h
// The function must be deterministic; callers freeze any noise source before
// checking a stochastic layer.
inline Tensor<double> finite_diff_grad(
    const std::function<double(const Tensor<double>&)>& f,
    const Tensor<double>& x, double h) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_grad: h must be > 0");
  Tensor<double> g(x.shape());
  Tensor<double> probe = x;
  for (size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    probe[i] = v + h;
    const double fp = f(probe);
    probe[i] = v - h;
    const double fm = f(probe);
    probe[i] = v;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

struct GradCheckIssue {
  std::string tensor;
  size_t coord = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
};

struct GradCheckReport {
  size_t coords_checked = 0;
  double max_rel_err = 0;
  std::vector<GradCheckIssue> failures;
  bool ok() const { return failures.empty(); }
};

// Relative error with a floor that ignores coordinates where both sides are
// essentially zero.
inline void compare_grads(GradCheckReport& report, const std::string& name,
                          const Tensor<double>& analytic,
                          const Tensor<double>& numeric, double tol,
                          double zero_floor = 1e-8) {
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::abs(a) + std::abs(n);
    ++report.coords_checked;
    if (denom < zero_floor) continue;
    const double rel = std::abs(a - n) / denom;
    report.max_rel_err = std::max(report.max_rel_err, rel);
    if (rel > tol) report.failures.push_back({name, i, a, n, rel});
  }
}

// ---- whole-network property check -------------------------------------------

// Deliberately broken gradient rule, wired in as a fixture to prove the
// checker catches a wrong rule.
enum class GradFault { none, relu_backward };

struct GradSuiteConfig {
  int networks = 100;
  double h = 1e-6;
  double tol = 1e-4;
  uint64_t seed = 20240;
  GradFault fault = GradFault::none;
  bool verbose = false;
};

struct GradSuiteResult {
  int networks_checked = 0;
  size_t coords_checked = 0;
  double max_rel_err = 0;
  std::vector<GradCheckIssue> failures;
  bool ok() const { return failures.empty(); }
};

// Backward vs central finite differences on seeded random small networks
// (dense, conv, pooled, residual and noise-injection variants, <= 3 layers,
// <= 500 parameters, f64, noise frozen). Checks every parameter coordinate
// and the input gradient.
GradSuiteResult run_gradcheck_suite(const GradSuiteConfig& cfg);

}  // namespace advkit
