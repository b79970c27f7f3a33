#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "advkit/attacks.hpp"

using namespace advkit;

namespace {

// loss(x) = sum over batch and features of w_j * x_j; gradient w.r.t. every
// sample is exactly w.
class LinearTarget : public AttackTarget {
 public:
  explicit LinearTarget(std::vector<float> w) : w_(std::move(w)) {}
  Var<float> batch_loss(Tape<float>& tape, Var<float> x, const Tensor<float>&,
                        NoiseSource<float>) const override {
    auto wv = tape.leaf(Tensor<float>({w_.size()}, w_));
    return ops::sum_all(tape, ops::mul(tape, x, wv));
  }
  Tensor<float> sample_losses(const Tensor<float>& x, const Tensor<float>&,
                              NoiseSource<float>) const override {
    const size_t B = x.dim(0), D = x.size() / B;
    Tensor<float> out({B});
    for (size_t b = 0; b < B; ++b) {
      float acc = 0;
      for (size_t j = 0; j < D; ++j) acc += w_[j] * x[b * D + j];
      out[b] = acc;
    }
    return out;
  }

 private:
  std::vector<float> w_;
};

// Convex quadratic loss (x-c)^T A (x-c) per sample, center outside the box.
class QuadraticTarget : public AttackTarget {
 public:
  QuadraticTarget(std::array<double, 2> c, std::array<double, 4> a) : c_(c), a_(a) {}
  double loss_at(double x0, double x1) const {
    const double d0 = x0 - c_[0], d1 = x1 - c_[1];
    return d0 * (a_[0] * d0 + a_[1] * d1) + d1 * (a_[2] * d0 + a_[3] * d1);
  }
  Var<float> batch_loss(Tape<float>& tape, Var<float> x, const Tensor<float>&,
                        NoiseSource<float>) const override {
    auto cv = tape.leaf(Tensor<float>(
        {2}, {static_cast<float>(c_[0]), static_cast<float>(c_[1])}));
    auto av = tape.leaf(Tensor<float>({2, 2},
                                      {static_cast<float>(a_[0]),
                                       static_cast<float>(a_[1]),
                                       static_cast<float>(a_[2]),
                                       static_cast<float>(a_[3])}));
    auto d = ops::sub(tape, x, cv);
    return ops::sum_all(tape, ops::mul(tape, d, ops::matmul(tape, d, av)));
  }
  Tensor<float> sample_losses(const Tensor<float>& x, const Tensor<float>&,
                              NoiseSource<float>) const override {
    const size_t B = x.dim(0);
    Tensor<float> out({B});
    for (size_t b = 0; b < B; ++b)
      out[b] = static_cast<float>(loss_at(x[b * 2], x[b * 2 + 1]));
    return out;
  }

 private:
  std::array<double, 2> c_;
  std::array<double, 4> a_;
};

Model<float> tiny_cnn(bool with_pnil, uint64_t seed = 4242) {
  SmallCnnConfig cfg;
  cfg.conv1_channels = 4;
  cfg.conv2_channels = 6;
  cfg.with_pnil = with_pnil;
  cfg.pnil.b = -1.5f;
  return build_small_cnn<float>({1, 8, 8}, 10, cfg, seed);
}

Tensor<float> random_images(size_t n, size_t side, uint64_t seed) {
  Tensor<float> x({n, 1, side, side});
  Rng rng(seed);
  for (size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform());
  return x;
}

Tensor<float> random_onehot(size_t n, size_t k, uint64_t seed) {
  std::vector<int> labels(n);
  Rng rng(seed);
  for (auto& l : labels) l = static_cast<int>(rng.uniform_int(k));
  return one_hot(labels, k);
}

float linf(const Tensor<float>& delta, size_t b, size_t per) {
  float m = 0;
  for (size_t j = 0; j < per; ++j)
    m = std::max(m, std::abs(delta[b * per + j]));
  return m;
}

bool identical(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("eot gradient is independent of L on a deterministic model") {
  Model<float> m = tiny_cnn(false);
  ModelTarget target(m);
  Tensor<float> x = random_images(3, 8, 1);
  Tensor<float> y = random_onehot(3, 10, 2);
  Tensor<float> g1 = eot_gradient(target, x, y, 1, 5);
  Tensor<float> g7 = eot_gradient(target, x, y, 7, 5);
  CHECK(identical(g1, g7));
}

TEST_CASE("eot gradient equals the mean of per-draw gradients exactly") {
  Model<float> m = tiny_cnn(true);
  ModelTarget target(m);
  Tensor<float> x = random_images(2, 8, 3);
  Tensor<float> y = random_onehot(2, 10, 4);
  const uint64_t seed = 91;
  const int L = 5;
  Tensor<float> fused = eot_gradient(target, x, y, L, seed);

  Tensor<float> acc;
  for (int l = 0; l < L; ++l) {
    std::vector<Rng> rngs = make_sample_rngs(seed, "eot", 0, x.dim(0), l);
    NoiseSource<float> noise;
    noise.rngs = rngs;
    Tensor<float> g = input_gradient(target, x, y, noise);
    if (l == 0)
      acc = std::move(g);
    else
      for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  }
  for (size_t i = 0; i < acc.size(); ++i) acc[i] *= 1.0f / L;
  CHECK(identical(fused, acc));
}

TEST_CASE("eot variance shrinks like 1/L on a stochastic model") {
  Model<float> m = tiny_cnn(true);
  ModelTarget target(m);
  Tensor<float> x = random_images(1, 8, 7);
  Tensor<float> y = random_onehot(1, 10, 8);

  auto estimate_std = [&](int L, int repeats) {
    std::vector<Tensor<float>> grads;
    for (int r = 0; r < repeats; ++r)
      grads.push_back(eot_gradient(target, x, y, L, derive_seed(1000, "rep", r)));
    const size_t n = grads[0].size();
    double total_var = 0;
    for (size_t i = 0; i < n; ++i) {
      double mean = 0;
      for (const auto& g : grads) mean += g[i];
      mean /= repeats;
      double var = 0;
      for (const auto& g : grads) var += (g[i] - mean) * (g[i] - mean);
      total_var += var / (repeats - 1);
    }
    return std::sqrt(total_var / n);
  };

  const double s1 = estimate_std(1, 50);
  const double s100 = estimate_std(100, 50);
  CHECK(s1 > 0);
  // 1/sqrt(100) with slack for the 50-repeat estimate
  CHECK(s100 <= 0.15 * s1);
}

TEST_CASE("fgsm on a positive linear loss walks every coordinate up") {
  LinearTarget target({0.5f, 2.0f, 0.1f});
  Tensor<float> x({2, 3}, {0.4f, 0.5f, 0.6f, 0.2f, 0.3f, 0.4f});
  Tensor<float> y({2, 1}, {1, 1});
  AttackConfig cfg;
  cfg.kind = AttackKind::fgsm;
  cfg.eps = 0.05f;
  AdvBatch adv = fgsm(target, x, y, cfg, 1);
  for (size_t i = 0; i < x.size(); ++i)
    CHECK(adv.x_adv[i] == x[i] + cfg.eps);
  CHECK(adv.success.empty());  // no classifier behind this target
}

TEST_CASE("fgsm attains the brute-force corner maximum of a logistic model") {
  // two-class model, logits = (0, w.x); loss of class 0 increases in w.x
  Model<float> m({2}, 2, 0);
  Tensor<float> w({2, 2});
  w[0 * 2 + 1] = 1.7f;   // w.x coefficient for feature 0
  w[1 * 2 + 1] = -0.9f;  // feature 1
  m.append(Dense<float>{"fc", w, Tensor<float>({2})});
  ModelTarget target(m);

  Tensor<float> x({1, 2}, {0.45f, 0.55f});
  Tensor<float> y = one_hot({0}, 2);
  AttackConfig cfg;
  cfg.kind = AttackKind::fgsm;
  cfg.eps = 0.1f;
  AdvBatch adv = fgsm(target, x, y, cfg, 3);

  auto loss_at = [&](float a, float b) {
    const double z = 1.7 * a - 0.9 * b;
    return std::log1p(std::exp(z));
  };
  double best = -1;
  for (int sa : {-1, 1})
    for (int sb : {-1, 1})
      best = std::max(best, loss_at(x[0] + sa * cfg.eps, x[1] + sb * cfg.eps));
  const double attained = loss_at(adv.x_adv[0], adv.x_adv[1]);
  CHECK(attained == doctest::Approx(best).epsilon(1e-5));
}

TEST_CASE("zero budget is the identity for every attack") {
  Model<float> m = tiny_cnn(true);
  ModelTarget target(m);
  Tensor<float> x = random_images(2, 8, 11);
  Tensor<float> y = random_onehot(2, 10, 12);
  for (AttackKind kind : {AttackKind::fgsm, AttackKind::r_plus_fgsm,
                          AttackKind::rfgsm, AttackKind::nfgsm, AttackKind::pgd,
                          AttackKind::spsa}) {
    AttackConfig cfg;
    cfg.kind = kind;
    cfg.eps = 0.0f;
    if (kind == AttackKind::pgd) cfg.steps = 3;
    if (kind == AttackKind::spsa) {
      cfg.steps = 2;
      cfg.spsa_samples = 8;
    }
    AdvBatch adv = run_attack(target, x, y, cfg, 5);
    CAPTURE(to_string(kind));
    CHECK(identical(adv.x_adv, x));
  }
}

TEST_CASE("rfgsm stays inside the ball and matches the projection oracle") {
  LinearTarget target({1.0f, 0.0f, 0.0f});  // gradient along +e1 only
  const size_t B = 64, D = 3;
  Tensor<float> x({B, D});
  for (size_t i = 0; i < x.size(); ++i) x[i] = 0.5f;
  Tensor<float> y({B, 1});
  AttackConfig cfg;
  cfg.kind = AttackKind::rfgsm;
  cfg.eps = 0.125f;
  const uint64_t seed = 77;
  AdvBatch adv = rfgsm(target, x, y, cfg, seed);

  // reconstruct the random start from the same streams and project by hand
  std::vector<Rng> rngs = make_sample_rngs(seed, "rand-start", 0, B, 0);
  const float alpha = 1.2f * cfg.eps;
  size_t hit_bound = 0;
  for (size_t b = 0; b < B; ++b) {
    float u[D];
    for (size_t j = 0; j < D; ++j) {
      // same float path as the attack: u enters through x0 = x + u
      const float x0 = x[b * D + j] +
                       static_cast<float>(rngs[b].uniform(-cfg.eps, cfg.eps));
      u[j] = x0 - x[b * D + j];
    }
    // e1: oversized step, projected; others: sign(0) = 0 keeps the start
    for (size_t j = 0; j < D; ++j) {
      const float step = j == 0 ? alpha : 0.0f;
      const float expect = std::min(cfg.eps, std::max(-cfg.eps, u[j] + step));
      const float x_adv_expect = x[b * D + j] + expect;
      CHECK(adv.x_adv[b * D + j] == x_adv_expect);
    }
    if (u[0] + alpha >= cfg.eps) ++hit_bound;
    CHECK(linf(adv.delta, b, D) <= cfg.eps + 1e-6f);
  }
  CHECK(hit_bound > B / 2);  // most starts project to exactly +eps
}

TEST_CASE("nfgsm fills the 2-eps cube") {
  LinearTarget target({1.0f, 1.0f, 1.0f});
  const size_t B = 100000, D = 3;
  Tensor<float> x({B, D});
  for (size_t i = 0; i < x.size(); ++i) x[i] = 0.5f;
  Tensor<float> y({B, 1});
  AttackConfig cfg;
  cfg.kind = AttackKind::nfgsm;
  cfg.eps = 0.1f;
  AdvBatch adv = nfgsm(target, x, y, cfg, 2024);
  float lo[D] = {9, 9, 9}, hi[D] = {-9, -9, -9};
  for (size_t b = 0; b < B; ++b) {
    CHECK(linf(adv.delta, b, D) <= 2 * cfg.eps + 1e-6f);
    for (size_t j = 0; j < D; ++j) {
      lo[j] = std::min(lo[j], adv.delta[b * D + j]);
      hi[j] = std::max(hi[j], adv.delta[b * D + j]);
    }
  }
  // positive gradient: delta = uniform(-eps,eps) + eps, so range (0, 2eps)
  for (size_t j = 0; j < D; ++j) CHECK(hi[j] - lo[j] > 1.9f * cfg.eps);
}

TEST_CASE("pgd resolves the documented defaults") {
  AttackConfig cfg;
  cfg.kind = AttackKind::pgd;
  cfg.eps = 0.03f;
  CHECK(cfg.resolved_steps() == 50);
  CHECK(cfg.resolved_alpha() == doctest::Approx(2 * 0.03 / 50));
  AttackConfig s;
  s.kind = AttackKind::spsa;
  CHECK(s.resolved_steps() == 100);
  CHECK(s.spsa_samples == 2048);
}

TEST_CASE("pgd endpoint matches the grid-search maximum on a quadratic") {
  // center far outside the box, positive-definite A
  QuadraticTarget target({-0.2, -0.1}, {1.0, 0.3, 0.3, 2.0});
  Tensor<float> x({1, 2}, {0.3f, 0.6f});
  Tensor<float> y({1, 1});
  AttackConfig cfg;
  cfg.kind = AttackKind::pgd;
  cfg.eps = 0.1f;
  cfg.steps = 50;
  AdvBatch adv = pgd(target, x, y, cfg, 9);

  double grid_max = -1e18, grid_min = 1e18;
  for (int i = 0; i <= 100; ++i)
    for (int j = 0; j <= 100; ++j) {
      const double a = x[0] - cfg.eps + 2.0 * cfg.eps * i / 100.0;
      const double b = x[1] - cfg.eps + 2.0 * cfg.eps * j / 100.0;
      const double l = target.loss_at(a, b);
      grid_max = std::max(grid_max, l);
      grid_min = std::min(grid_min, l);
    }
  const double endpoint = target.loss_at(adv.x_adv[0], adv.x_adv[1]);
  CHECK(endpoint >= grid_max - 0.01 * (grid_max - grid_min));
  CHECK(linf(adv.delta, 0, 2) <= cfg.eps + 1e-6f);
}

TEST_CASE("pgd with one full-size step and no random start is fgsm") {
  Model<float> m = tiny_cnn(true);
  ModelTarget target(m);
  Tensor<float> x = random_images(3, 8, 21);
  Tensor<float> y = random_onehot(3, 10, 22);
  AttackConfig f;
  f.kind = AttackKind::fgsm;
  f.eps = 0.06f;
  AttackConfig p;
  p.kind = AttackKind::pgd;
  p.eps = 0.06f;
  p.steps = 1;
  p.alpha = 0.06f;
  p.pgd_random_start = false;
  AdvBatch a = fgsm(target, x, y, f, 31);
  AdvBatch b = pgd(target, x, y, p, 31);
  CHECK(identical(a.x_adv, b.x_adv));
}

TEST_CASE("spsa estimator is unbiased on a linear loss") {
  // E[(w.v)v] = w for Rademacher v; 2048 x 20 samples, 2% per coordinate
  LinearTarget target({2.0f, 1.5f});
  Tensor<float> x({1, 2}, {0.5f, 0.5f});
  Tensor<float> y({1, 1});
  Tensor<float> acc({1, 2});
  const int repeats = 20;
  for (int r = 0; r < repeats; ++r) {
    Tensor<float> g = spsa_gradient_estimate(target, x, y, 2048, 0.01f,
                                             derive_seed(55, "rep", r));
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  }
  CHECK(std::abs(acc[0] / repeats - 2.0f) / 2.0f < 0.02f);
  CHECK(std::abs(acc[1] / repeats - 1.5f) / 1.5f < 0.02f);
}

TEST_CASE("spsa increases the loss and respects the budget") {
  LinearTarget target({1.0f, -2.0f, 0.5f});
  Tensor<float> x({2, 3}, {0.5f, 0.5f, 0.5f, 0.4f, 0.6f, 0.5f});
  Tensor<float> y({2, 1});
  AttackConfig cfg;
  cfg.kind = AttackKind::spsa;
  cfg.eps = 0.1f;
  cfg.steps = 40;
  cfg.spsa_samples = 64;
  AdvBatch adv = spsa(target, x, y, cfg, 8);
  Tensor<float> before = target.sample_losses(x, y, {});
  Tensor<float> after = target.sample_losses(adv.x_adv, y, {});
  for (size_t b = 0; b < 2; ++b) {
    CHECK(after[b] > before[b]);
    CHECK(linf(adv.delta, b, 3) <= cfg.eps + 1e-6f);
  }
  // linear loss: the optimum is the signed corner; SPSA should get close
  for (size_t b = 0; b < 2; ++b) {
    CHECK(adv.delta[b * 3 + 0] > 0.5f * cfg.eps);
    CHECK(adv.delta[b * 3 + 1] < -0.5f * cfg.eps);
  }
}

TEST_CASE("r+fgsm with zero random step reduces to fgsm") {
  Model<float> m = tiny_cnn(false);
  ModelTarget target(m);
  Tensor<float> x = random_images(2, 8, 41);
  Tensor<float> y = random_onehot(2, 10, 42);
  AttackConfig f;
  f.kind = AttackKind::fgsm;
  f.eps = 0.05f;
  AttackConfig r;
  r.kind = AttackKind::r_plus_fgsm;
  r.eps = 0.05f;
  r.rand_step = 0.0f;
  AdvBatch a = fgsm(target, x, y, f, 7);
  AdvBatch b = r_plus_fgsm(target, x, y, r, 7);
  CHECK(identical(a.x_adv, b.x_adv));
}

TEST_CASE("r+fgsm delta lives on the two-level lattice") {
  LinearTarget target({1.0f, -1.0f, 2.0f});
  const size_t B = 200, D = 3;
  Tensor<float> x({B, D});
  for (size_t i = 0; i < x.size(); ++i) x[i] = 0.5f;
  Tensor<float> y({B, 1});
  AttackConfig cfg;
  cfg.kind = AttackKind::r_plus_fgsm;
  cfg.eps = 0.25f;         // eps and eps/2 exactly representable
  cfg.rand_step = 0.125f;  // eps/2
  AdvBatch adv = r_plus_fgsm(target, x, y, cfg, 99);
  // each coordinate: +-eps/2 from the random sign, then +-eps/2 from the
  // gradient sign (never 0 on this loss)
  const std::set<float> allowed{-0.25f, 0.0f, 0.25f};
  for (size_t i = 0; i < adv.delta.size(); ++i) {
    CHECK(allowed.count(adv.delta[i]) == 1);
    CHECK(std::abs(adv.delta[i]) <= cfg.eps + 1e-6f);
  }
  AttackConfig bad = cfg;
  bad.rand_step = 0.3f;  // >= eps
  CHECK_THROWS_AS(r_plus_fgsm(target, x, y, bad, 1), std::invalid_argument);
}

TEST_CASE("attack budgets hold on a stochastic cnn with clipping") {
  Model<float> m = tiny_cnn(true);
  ModelTarget target(m);
  const size_t B = 50, per = 64;
  Tensor<float> x = random_images(B, 8, 61);
  Tensor<float> y = random_onehot(B, 10, 62);
  for (AttackKind kind : {AttackKind::fgsm, AttackKind::r_plus_fgsm,
                          AttackKind::rfgsm, AttackKind::pgd, AttackKind::spsa}) {
    AttackConfig cfg;
    cfg.kind = kind;
    cfg.eps = 8.0f / 255.0f;
    if (kind == AttackKind::pgd) cfg.steps = 5;
    if (kind == AttackKind::spsa) {
      cfg.steps = 3;
      cfg.spsa_samples = 16;
    }
    AdvBatch adv = run_attack(target, x, y, cfg, 1234);
    CAPTURE(to_string(kind));
    REQUIRE(adv.success.size() == B);
    for (size_t b = 0; b < B; ++b)
      CHECK(linf(adv.delta, b, per) <= cfg.eps + 1e-6f);
    for (size_t i = 0; i < adv.x_adv.size(); ++i) {
      CHECK(adv.x_adv[i] >= 0.0f);
      CHECK(adv.x_adv[i] <= 1.0f);
    }
  }
}

TEST_CASE("attacks are deterministic in (seed, config, model)") {
  Model<float> m = tiny_cnn(true);
  ModelTarget target(m);
  Tensor<float> x = random_images(4, 8, 71);
  Tensor<float> y = random_onehot(4, 10, 72);
  AttackConfig cfg;
  cfg.kind = AttackKind::pgd;
  cfg.eps = 0.05f;
  cfg.steps = 4;
  cfg.eot_L = 2;
  AdvBatch a = pgd(target, x, y, cfg, 5);
  AdvBatch b = pgd(target, x, y, cfg, 5);
  AdvBatch c = pgd(target, x, y, cfg, 6);
  CHECK(identical(a.x_adv, b.x_adv));
  CHECK(a.success == b.success);
  CHECK_FALSE(identical(a.x_adv, c.x_adv));
}

TEST_CASE("sharding by sample offset does not change results") {
  Model<float> m = tiny_cnn(true);
  ModelTarget target(m);
  const size_t B = 6;
  Tensor<float> x = random_images(B, 8, 81);
  Tensor<float> y = random_onehot(B, 10, 82);
  AttackConfig cfg;
  cfg.kind = AttackKind::pgd;
  cfg.eps = 0.04f;
  cfg.steps = 3;
  cfg.eot_L = 2;
  const uint64_t seed = 17;
  AdvBatch whole = pgd(target, x, y, cfg, seed, 0);

  // same work split into two shards with matching global offsets
  auto slice = [&](size_t from, size_t to) {
    std::vector<size_t> shape = x.shape();
    shape[0] = to - from;
    Tensor<float> xs(shape);
    Tensor<float> ys({to - from, 10});
    std::copy(x.data() + from * 64, x.data() + to * 64, xs.data());
    std::copy(y.data() + from * 10, y.data() + to * 10, ys.data());
    return std::pair{xs, ys};
  };
  auto [x1, y1] = slice(0, 2);
  auto [x2, y2] = slice(2, B);
  AdvBatch s1 = pgd(target, x1, y1, cfg, seed, 0);
  AdvBatch s2 = pgd(target, x2, y2, cfg, seed, 2);
  for (size_t i = 0; i < 2 * 64; ++i) CHECK(whole.x_adv[i] == s1.x_adv[i]);
  for (size_t i = 0; i < (B - 2) * 64; ++i)
    CHECK(whole.x_adv[2 * 64 + i] == s2.x_adv[i]);
}

TEST_CASE("nfgsm is rejected by config validation for bad fields") {
  AttackConfig cfg;
  cfg.kind = AttackKind::fgsm;
  cfg.eps = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.eps = 0.1f;
  cfg.eot_L = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
