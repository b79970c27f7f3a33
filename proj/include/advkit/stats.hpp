#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "advkit/attacks.hpp"
#include "advkit/data_io.hpp"
#include "advkit/model.hpp"

namespace advkit {

// ---- numerics ---------------------------------------------------------------

// Regularized incomplete beta I_x(a,b) by Lentz continued fraction.
double incomplete_beta(double a, double b, double x);

// CDF of Student's t with `dof` degrees of freedom.
double student_t_cdf(double t, double dof);

// ---- corrected resampled t-test ----------------------------------------------

struct TTestResult {
  double mean_diff = 0;
  double var_diff = 0;   // sample variance, n-1 denominator
  size_t n = 0;
  double ratio = 0;      // n2/n1, test-to-train size ratio
  double t = 0;
  double p = 1;
  double alpha = 0.003;
  bool significant = false;
  bool degenerate = false;  // zero variance
};

// t = mean(d) / sqrt((1/n + ratio) * var(d)), two-sided p with n-1 dof.
TTestResult corrected_resampled_ttest(const std::vector<double>& diffs,
                                      double ratio, double alpha = 0.003);

// ---- robustness evaluation ----------------------------------------------------

struct AttackAccuracy {
  std::string name;       // "clean", "pgd", "spsa", ...
  double accuracy = 0;    // percent
  size_t samples = 0;
};

struct EvalReport {
  std::vector<AttackAccuracy> rows;
  double effective_robustness = 0;  // min over attack rows
  bool obfuscation_flag = false;    // spsa more than 10 points below pgd
  int eot_L = 1;
  size_t spsa_subset = 0;
  uint64_t seed = 0;
  std::string config_hash;
  double runtime_seconds = 0;  // console diagnostics only, never serialized

  const AttackAccuracy* find(const std::string& name) const;
};

struct EvalConfig {
  float eps = 8.0f / 255.0f;
  std::vector<AttackKind> attacks = {AttackKind::pgd, AttackKind::spsa};
  int pgd_steps = 50;
  int eot_L = 100;           // Monte Carlo draws when the model is stochastic
  size_t spsa_subset = 1000; // random images evaluated under SPSA
  int spsa_steps = 100;
  int spsa_samples = 2048;
  float clip_lo = 0.0f, clip_hi = 1.0f;
  size_t max_samples = 0;    // cap on clean/pgd samples, 0 = full set
  size_t batch = 100;
  uint64_t seed = 1;
};

// Gradient-obfuscation signature: the gradient-free attack succeeds where the
// gradient-based one fails.
inline bool obfuscation_suspected(double spsa_acc, double pgd_acc) {
  return spsa_acc < pgd_acc - 10.0;
}

EvalReport evaluate_robustness(const Model<float>& model, const Dataset& test,
                               const EvalConfig& cfg);

// Accuracy under an arbitrary attack config over a dataset, batched with
// global sample offsets so batching does not change per-sample streams.
double attacked_accuracy(const Model<float>& model, const Dataset& data,
                         const AttackConfig& attack, uint64_t seed,
                         size_t batch = 100);

// PGD accuracy per eps multiplier, alpha rescaled to 2*eps'/steps.
struct CurvePoint {
  double x = 0;
  double accuracy = 0;
};
std::vector<CurvePoint> perturbation_sweep(const Model<float>& model,
                                           const Dataset& data,
                                           const EvalConfig& cfg,
                                           const std::vector<double>& multipliers);

// PGD accuracy per EOT sample count. `flat_warning` is set when the model has
// no stochastic layer (the curve is constant by construction).
std::vector<CurvePoint> eot_sensitivity(const Model<float>& model,
                                        const Dataset& data, const EvalConfig& cfg,
                                        const std::vector<int>& L_values,
                                        bool* flat_warning = nullptr);

// ---- emission ----------------------------------------------------------------

void write_report_csv(const std::string& path, const EvalReport& report);
EvalReport read_report_csv(const std::string& path);
std::string format_report_table(const std::string& title, const EvalReport& report);
void write_curve_csv(const std::string& path, const std::string& x_name,
                     const std::vector<CurvePoint>& curve);

}  // namespace advkit
