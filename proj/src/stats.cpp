#include "advkit/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace advkit {

// ---- numerics ---------------------------------------------------------------

namespace {

// Continued fraction for the incomplete beta (modified Lentz).
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw std::runtime_error("incomplete_beta: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0) || !(b > 0))
    throw std::invalid_argument("incomplete_beta: a,b must be > 0");
  if (x <= 0) return 0;
  if (x >= 1) return 1;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1) / (a + b + 2)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;  // symmetry
}

double student_t_cdf(double t, double dof) {
  if (!(dof > 0)) throw std::invalid_argument("student_t_cdf: dof must be > 0");
  if (t == 0) return 0.5;
  const double x = dof / (dof + t * t);
  const double tail = 0.5 * incomplete_beta(dof / 2.0, 0.5, x);
  return t > 0 ? 1.0 - tail : tail;
}

TTestResult corrected_resampled_ttest(const std::vector<double>& diffs,
                                      double ratio, double alpha) {
  if (diffs.size() < 2)
    throw std::invalid_argument("corrected_resampled_ttest: need at least 2 runs");
  if (!(ratio > 0))
    throw std::invalid_argument("corrected_resampled_ttest: ratio must be > 0");
  TTestResult r;
  r.n = diffs.size();
  r.ratio = ratio;
  r.alpha = alpha;
  const double n = static_cast<double>(diffs.size());
  for (double d : diffs) r.mean_diff += d;
  r.mean_diff /= n;
  for (double d : diffs) r.var_diff += (d - r.mean_diff) * (d - r.mean_diff);
  r.var_diff /= (n - 1);
  if (r.var_diff == 0) {
    r.degenerate = true;
    r.t = r.mean_diff == 0 ? 0 : std::copysign(INFINITY, r.mean_diff);
    r.p = r.mean_diff == 0 ? 1.0 : 0.0;
  } else {
    r.t = r.mean_diff / std::sqrt((1.0 / n + ratio) * r.var_diff);
    r.p = 2.0 * (1.0 - student_t_cdf(std::abs(r.t), n - 1));
  }
  r.significant = r.p < alpha;
  return r;
}

// ---- robustness evaluation ----------------------------------------------------

const AttackAccuracy* EvalReport::find(const std::string& name) const {
  for (const auto& row : rows)
    if (row.name == name) return &row;
  return nullptr;
}

namespace {

// Accuracy with one prediction draw per sample, stream keyed by the global
// sample index so every evaluation path grades a given sample identically.
double clean_accuracy(const Model<float>& model, const Dataset& data,
                      uint64_t seed, size_t batch) {
  size_t correct = 0;
  for (size_t off = 0; off < data.size(); off += batch) {
    const size_t n = std::min(batch, data.size() - off);
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), off);
    Dataset chunk = data.subset(idx);
    NoiseSource<float> noise;
    std::vector<Rng> rngs;
    if (model.has_pnil()) {
      rngs = make_sample_rngs(seed, "predict", off, n, 0);
      noise.rngs = rngs;
    }
    std::vector<int> preds = model.predict(chunk.images, noise);
    for (size_t i = 0; i < n; ++i)
      if (preds[i] == chunk.labels[i]) ++correct;
  }
  return data.size() ? 100.0 * static_cast<double>(correct) /
                           static_cast<double>(data.size())
                     : 0.0;
}

}  // namespace

double attacked_accuracy(const Model<float>& model, const Dataset& data,
                         const AttackConfig& attack, uint64_t seed, size_t batch) {
  if (!is_eval_attack(attack.kind))
    throw std::invalid_argument("evaluation requires a bounded attack, got " +
                                to_string(attack.kind));
  ModelTarget target(model);
  size_t correct = 0;
  for (size_t off = 0; off < data.size(); off += batch) {
    const size_t n = std::min(batch, data.size() - off);
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), off);
    Dataset chunk = data.subset(idx);
    Tensor<float> y = one_hot(chunk.labels, data.classes);
    AdvBatch adv = run_attack(target, chunk.images, y,
                              attack, derive_seed(seed, "attack"), off);
    NoiseSource<float> noise;
    std::vector<Rng> rngs;
    if (model.has_pnil()) {
      rngs = make_sample_rngs(seed, "predict", off, n, 0);
      noise.rngs = rngs;
    }
    std::vector<int> preds = model.predict(adv.x_adv, noise);
    for (size_t i = 0; i < n; ++i)
      if (preds[i] == chunk.labels[i]) ++correct;
  }
  return data.size() ? 100.0 * static_cast<double>(correct) /
                           static_cast<double>(data.size())
                     : 0.0;
}

EvalReport evaluate_robustness(const Model<float>& model, const Dataset& test,
                               const EvalConfig& cfg) {
  if (cfg.attacks.empty())
    throw std::invalid_argument("evaluate_robustness: attack list is empty");
  for (AttackKind k : cfg.attacks)
    if (!is_eval_attack(k))
      throw std::invalid_argument(
          "evaluate_robustness: " + to_string(k) +
          " is a training-only attack; evaluation must stay inside the eps ball");

  Dataset main_set = cfg.max_samples > 0 && cfg.max_samples < test.size()
                         ? test.take(cfg.max_samples)
                         : test;

  EvalReport report;
  report.eot_L = cfg.eot_L;
  report.seed = cfg.seed;

  report.rows.push_back(
      {"clean", clean_accuracy(model, main_set, cfg.seed, cfg.batch),
       main_set.size()});

  const int eot = model.has_pnil() ? cfg.eot_L : 1;
  for (AttackKind kind : cfg.attacks) {
    AttackConfig a;
    a.kind = kind;
    a.eps = cfg.eps;
    a.clip_lo = cfg.clip_lo;
    a.clip_hi = cfg.clip_hi;
    if (kind == AttackKind::pgd) {
      a.steps = cfg.pgd_steps;
      a.eot_L = eot;
      report.rows.push_back(
          {"pgd", attacked_accuracy(model, main_set, a, cfg.seed, cfg.batch),
           main_set.size()});
    } else if (kind == AttackKind::spsa) {
      a.steps = cfg.spsa_steps;
      a.spsa_samples = cfg.spsa_samples;
      // random subset: SPSA is orders of magnitude more expensive per image
      std::vector<size_t> perm(test.size());
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(derive_seed(cfg.seed, "spsa-subset"));
      rng.shuffle(perm);
      const size_t n = std::min(cfg.spsa_subset, test.size());
      perm.resize(n);
      Dataset subset = test.subset(perm);
      report.spsa_subset = n;
      report.rows.push_back(
          {"spsa", attacked_accuracy(model, subset, a, cfg.seed, cfg.batch), n});
    } else {
      a.eot_L = eot;
      report.rows.push_back(
          {to_string(kind),
           attacked_accuracy(model, main_set, a, cfg.seed, cfg.batch),
           main_set.size()});
    }
  }

  double min_acc = std::numeric_limits<double>::infinity();
  for (const auto& row : report.rows)
    if (row.name != "clean") min_acc = std::min(min_acc, row.accuracy);
  report.effective_robustness =
      std::isfinite(min_acc) ? min_acc : report.rows.front().accuracy;

  const AttackAccuracy* s = report.find("spsa");
  const AttackAccuracy* p = report.find("pgd");
  report.obfuscation_flag = s && p && obfuscation_suspected(s->accuracy, p->accuracy);
  return report;
}

std::vector<CurvePoint> perturbation_sweep(const Model<float>& model,
                                           const Dataset& data,
                                           const EvalConfig& cfg,
                                           const std::vector<double>& multipliers) {
  std::vector<CurvePoint> curve;
  const int eot = model.has_pnil() ? cfg.eot_L : 1;
  for (double m : multipliers) {
    const float eps = static_cast<float>(m) * cfg.eps;
    if (eps == 0.0f) {
      curve.push_back({m, clean_accuracy(model, data, cfg.seed, cfg.batch)});
      continue;
    }
    AttackConfig a;
    a.kind = AttackKind::pgd;
    a.eps = eps;
    a.steps = cfg.pgd_steps;
    a.alpha = 2.0f * eps / static_cast<float>(cfg.pgd_steps);
    a.eot_L = eot;
    a.clip_lo = cfg.clip_lo;
    a.clip_hi = cfg.clip_hi;
    curve.push_back({m, attacked_accuracy(model, data, a, cfg.seed, cfg.batch)});
  }
  return curve;
}

std::vector<CurvePoint> eot_sensitivity(const Model<float>& model,
                                        const Dataset& data, const EvalConfig& cfg,
                                        const std::vector<int>& L_values,
                                        bool* flat_warning) {
  if (flat_warning) *flat_warning = !model.has_pnil();
  std::vector<CurvePoint> curve;
  for (int L : L_values) {
    AttackConfig a;
    a.kind = AttackKind::pgd;
    a.eps = cfg.eps;
    a.steps = cfg.pgd_steps;
    a.eot_L = L;
    a.clip_lo = cfg.clip_lo;
    a.clip_hi = cfg.clip_hi;
    curve.push_back({static_cast<double>(L),
                     attacked_accuracy(model, data, a, cfg.seed, cfg.batch)});
  }
  return curve;
}

// ---- emission ----------------------------------------------------------------

void write_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "attack,accuracy_pct,samples\n";
  char buf[128];
  for (const auto& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%zu\n", row.name.c_str(),
                  row.accuracy, row.samples);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "min,%.6f,0\n", report.effective_robustness);
  os << buf;
  os << "obfuscation_flag," << (report.obfuscation_flag ? 1 : 0) << ",0\n";
  os << "eot_L," << report.eot_L << ",0\n";
  os << "spsa_subset," << report.spsa_subset << ",0\n";
  os << "seed," << report.seed << ",0\n";
  if (!os) throw std::runtime_error("write failed: " + path);
}

EvalReport read_report_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  EvalReport report;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string name, acc, n;
    std::getline(ss, name, ',');
    std::getline(ss, acc, ',');
    std::getline(ss, n, ',');
    if (name == "min")
      report.effective_robustness = std::stod(acc);
    else if (name == "obfuscation_flag")
      report.obfuscation_flag = std::stoi(acc) != 0;
    else if (name == "eot_L")
      report.eot_L = std::stoi(acc);
    else if (name == "spsa_subset")
      report.spsa_subset = std::stoul(acc);
    else if (name == "seed")
      report.seed = std::stoull(acc);
    else
      report.rows.push_back({name, std::stod(acc), std::stoul(n)});
  }
  return report;
}

std::string format_report_table(const std::string& title, const EvalReport& report) {
  std::ostringstream os;
  os << title << "\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "  %-12s %10s %10s\n", "attack", "acc[%]", "n");
  os << buf;
  for (const auto& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "  %-12s %10.2f %10zu\n", row.name.c_str(),
                  row.accuracy, row.samples);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "  %-12s %10.2f\n", "min",
                report.effective_robustness);
  os << buf;
  if (report.obfuscation_flag)
    os << "  warning: SPSA accuracy is more than 10 points below PGD — "
          "gradient obfuscation suspected\n";
  return os.str();
}

void write_curve_csv(const std::string& path, const std::string& x_name,
                     const std::vector<CurvePoint>& curve) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << x_name << ",accuracy_pct\n";
  char buf[96];
  for (const auto& pt : curve) {
    std::snprintf(buf, sizeof(buf), "%.6g,%.6f\n", pt.x, pt.accuracy);
    os << buf;
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace advkit
