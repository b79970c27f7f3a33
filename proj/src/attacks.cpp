#include "advkit/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace advkit {

namespace {

constexpr size_t kSpsaChunk = 256;  // forward-batch cap inside SPSA

void clip_into(Tensor<float>& x, const AttackConfig& cfg) {
  if (!cfg.clip) return;
  for (size_t i = 0; i < x.size(); ++i)
    x[i] = std::min(cfg.clip_hi, std::max(cfg.clip_lo, x[i]));
}

float sgn(float v) { return v > 0 ? 1.0f : (v < 0 ? -1.0f : 0.0f); }

AdvBatch finish(const AttackTarget& target, const Tensor<float>& x_clean,
                Tensor<float> x_adv, const Tensor<float>& y, uint64_t seed,
                size_t sample_offset) {
  AdvBatch out;
  out.delta = sub(x_adv, x_clean);
  out.x_adv = std::move(x_adv);
  NoiseSource<float> noise;
  std::vector<Rng> rngs;
  if (target.stochastic()) {
    rngs = make_sample_rngs(seed, "grade", sample_offset, out.x_adv.dim(0), 0);
    noise.rngs = rngs;
  }
  std::vector<int> preds = target.predict(out.x_adv, noise);
  if (!preds.empty()) {
    std::vector<int> truth = labels_of(y);
    out.success.resize(preds.size());
    for (size_t i = 0; i < preds.size(); ++i)
      out.success[i] = preds[i] != truth[i] ? 1 : 0;
  }
  return out;
}

}  // namespace

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "none") return AttackKind::none;
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "r+fgsm" || s == "r_plus_fgsm") return AttackKind::r_plus_fgsm;
  if (s == "rfgsm") return AttackKind::rfgsm;
  if (s == "nfgsm") return AttackKind::nfgsm;
  if (s == "pgd") return AttackKind::pgd;
  if (s == "spsa") return AttackKind::spsa;
  throw std::invalid_argument("unknown attack kind '" + s + "'");
}

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::none: return "none";
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::r_plus_fgsm: return "r+fgsm";
    case AttackKind::rfgsm: return "rfgsm";
    case AttackKind::nfgsm: return "nfgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::spsa: return "spsa";
  }
  return "?";
}

bool is_eval_attack(AttackKind k) {
  return k == AttackKind::fgsm || k == AttackKind::r_plus_fgsm ||
         k == AttackKind::rfgsm || k == AttackKind::pgd || k == AttackKind::spsa;
}

void AttackConfig::validate() const {
  if (eps < 0) throw std::invalid_argument("attack: eps must be >= 0");
  if (eot_L < 1) throw std::invalid_argument("attack: eot_L must be >= 1");
  if (steps == 0 || steps < -1) throw std::invalid_argument("attack: steps must be >= 1");
  if (clip && !(clip_lo < clip_hi))
    throw std::invalid_argument("attack: clip range is empty");
  if (kind == AttackKind::spsa) {
    if (spsa_samples < 1) throw std::invalid_argument("attack: spsa_samples must be >= 1");
    if (!(spsa_delta > 0)) throw std::invalid_argument("attack: spsa_delta must be > 0");
  }
  if (kind == AttackKind::r_plus_fgsm) {
    const float r = resolved_rand_step();
    if (r > 0 && r >= eps)
      throw std::invalid_argument("attack: r+fgsm random step must be < eps");
    if (r < 0) throw std::invalid_argument("attack: random step must be >= 0");
  }
}

float AttackConfig::resolved_alpha() const {
  if (alpha >= 0) return alpha;
  switch (kind) {
    case AttackKind::rfgsm: return 1.2f * eps;
    case AttackKind::pgd: return 2.0f * eps / static_cast<float>(resolved_steps());
    default: return eps;
  }
}

int AttackConfig::resolved_steps() const {
  if (steps > 0) return steps;
  switch (kind) {
    case AttackKind::pgd: return 50;
    case AttackKind::spsa: return 100;
    default: return 1;
  }
}

float AttackConfig::resolved_rand_step() const {
  return rand_step >= 0 ? rand_step : eps / 2.0f;
}

// ---- model target -----------------------------------------------------------

Var<float> ModelTarget::batch_loss(Tape<float>& tape, Var<float> x,
                                   const Tensor<float>& y,
                                   NoiseSource<float> noise) const {
  auto fwd = model_->forward(tape, x, noise, /*param_grads=*/false);
  return ops::softmax_cross_entropy(tape, fwd.logits, y);
}

Tensor<float> ModelTarget::sample_losses(const Tensor<float>& x,
                                         const Tensor<float>& y,
                                         NoiseSource<float> noise) const {
  Tensor<float> z = model_->logits(x, noise);
  const size_t B = z.dim(0), K = z.dim(1);
  Tensor<float> out({B});
  for (size_t b = 0; b < B; ++b) {
    const float* row = z.data() + b * K;
    float m = row[0];
    for (size_t j = 1; j < K; ++j) m = std::max(m, row[j]);
    double denom = 0;
    for (size_t j = 0; j < K; ++j) denom += std::exp(static_cast<double>(row[j] - m));
    const double log_denom = std::log(denom);
    for (size_t j = 0; j < K; ++j)
      if (y[b * K + j] == 1.0f)
        out[b] = static_cast<float>(log_denom - static_cast<double>(row[j] - m));
  }
  return out;
}

std::vector<int> ModelTarget::predict(const Tensor<float>& x,
                                      NoiseSource<float> noise) const {
  return model_->predict(x, noise);
}

// ---- gradients ----------------------------------------------------------------

Tensor<float> input_gradient(const AttackTarget& target, const Tensor<float>& x,
                             const Tensor<float>& y, NoiseSource<float> noise) {
  Tape<float> tape;
  Var<float> xv = tape.leaf(x, true);
  Var<float> loss = target.batch_loss(tape, xv, y, noise);
  tape.backward(loss);
  const Tensor<float>* g = tape.grad(xv);
  if (!g) throw std::logic_error("input_gradient: loss does not depend on x");
  return *g;
}

Tensor<float> eot_gradient(const AttackTarget& target, const Tensor<float>& x,
                           const Tensor<float>& y, int L, uint64_t seed,
                           size_t sample_offset, uint64_t draw_base) {
  if (L < 1) throw std::invalid_argument("eot_gradient: L must be >= 1");
  if (!target.stochastic())
    return input_gradient(target, x, y, NoiseSource<float>{});
  Tensor<float> acc;
  for (int l = 0; l < L; ++l) {
    std::vector<Rng> rngs =
        make_sample_rngs(seed, "eot", sample_offset, x.dim(0), draw_base + l);
    NoiseSource<float> noise;
    noise.rngs = rngs;
    Tensor<float> g = input_gradient(target, x, y, noise);
    if (l == 0)
      acc = std::move(g);
    else
      for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  }
  const float inv = 1.0f / static_cast<float>(L);
  for (size_t i = 0; i < acc.size(); ++i) acc[i] *= inv;
  return acc;
}

// ---- one-step attacks ----------------------------------------------------------

AdvBatch fgsm(const AttackTarget& target, const Tensor<float>& x,
              const Tensor<float>& y, const AttackConfig& cfg, uint64_t seed,
              size_t sample_offset) {
  cfg.validate();
  Tensor<float> g = eot_gradient(target, x, y, cfg.eot_L, seed, sample_offset);
  Tensor<float> x_adv = x;
  for (size_t i = 0; i < x_adv.size(); ++i) x_adv[i] += cfg.eps * sgn(g[i]);
  clip_into(x_adv, cfg);
  return finish(target, x, std::move(x_adv), y, seed, sample_offset);
}

AdvBatch r_plus_fgsm(const AttackTarget& target, const Tensor<float>& x,
                     const Tensor<float>& y, const AttackConfig& cfg,
                     uint64_t seed, size_t sample_offset) {
  cfg.validate();
  const float a = cfg.resolved_rand_step();
  const size_t B = x.dim(0), per = B ? x.size() / B : 0;
  std::vector<Rng> rngs = make_sample_rngs(seed, "rand-step", sample_offset, B, 0);
  Tensor<float> x0 = x;
  for (size_t i = 0; i < B; ++i)
    for (size_t j = 0; j < per; ++j)
      x0[i * per + j] += a * sgn(static_cast<float>(rngs[i].gauss()));
  Tensor<float> g = eot_gradient(target, x0, y, cfg.eot_L, seed, sample_offset);
  Tensor<float> x_adv = x0;
  const float step = cfg.eps - a;
  for (size_t i = 0; i < x_adv.size(); ++i) x_adv[i] += step * sgn(g[i]);
  clip_into(x_adv, cfg);
  return finish(target, x, std::move(x_adv), y, seed, sample_offset);
}

AdvBatch rfgsm(const AttackTarget& target, const Tensor<float>& x,
               const Tensor<float>& y, const AttackConfig& cfg, uint64_t seed,
               size_t sample_offset) {
  cfg.validate();
  const float alpha = cfg.resolved_alpha();
  const size_t B = x.dim(0), per = B ? x.size() / B : 0;
  std::vector<Rng> rngs = make_sample_rngs(seed, "rand-start", sample_offset, B, 0);
  Tensor<float> x0 = x;
  for (size_t i = 0; i < B; ++i)
    for (size_t j = 0; j < per; ++j)
      x0[i * per + j] += static_cast<float>(rngs[i].uniform(-cfg.eps, cfg.eps));
  Tensor<float> g = eot_gradient(target, x0, y, cfg.eot_L, seed, sample_offset);
  Tensor<float> x_adv = x;
  for (size_t i = 0; i < x_adv.size(); ++i) {
    // oversized step from the random start, projected back onto the eps ball
    float d = (x0[i] - x[i]) + alpha * sgn(g[i]);
    d = std::min(cfg.eps, std::max(-cfg.eps, d));
    x_adv[i] += d;
  }
  clip_into(x_adv, cfg);
  return finish(target, x, std::move(x_adv), y, seed, sample_offset);
}

AdvBatch nfgsm(const AttackTarget& target, const Tensor<float>& x,
               const Tensor<float>& y, const AttackConfig& cfg, uint64_t seed,
               size_t sample_offset) {
  cfg.validate();
  const size_t B = x.dim(0), per = B ? x.size() / B : 0;
  std::vector<Rng> rngs = make_sample_rngs(seed, "noise", sample_offset, B, 0);
  Tensor<float> x_bn = x;
  for (size_t i = 0; i < B; ++i)
    for (size_t j = 0; j < per; ++j)
      x_bn[i * per + j] += static_cast<float>(rngs[i].uniform(-cfg.eps, cfg.eps));
  Tensor<float> g = eot_gradient(target, x_bn, y, cfg.eot_L, seed, sample_offset);
  Tensor<float> x_adv = x_bn;
  // full-size FGSM step from the noisy point; deliberately not projected back
  // around x, so perturbations fill the whole 2*eps cube
  for (size_t i = 0; i < x_adv.size(); ++i) x_adv[i] += cfg.eps * sgn(g[i]);
  clip_into(x_adv, cfg);
  return finish(target, x, std::move(x_adv), y, seed, sample_offset);
}

// ---- pgd -----------------------------------------------------------------------

AdvBatch pgd(const AttackTarget& target, const Tensor<float>& x,
             const Tensor<float>& y, const AttackConfig& cfg, uint64_t seed,
             size_t sample_offset) {
  cfg.validate();
  const int steps = cfg.resolved_steps();
  const float alpha = cfg.resolved_alpha();
  const size_t B = x.dim(0), per = B ? x.size() / B : 0;
  Tensor<float> delta(x.shape());
  if (cfg.pgd_random_start) {
    std::vector<Rng> rngs = make_sample_rngs(seed, "rand-start", sample_offset, B, 0);
    for (size_t i = 0; i < B; ++i)
      for (size_t j = 0; j < per; ++j)
        delta[i * per + j] = static_cast<float>(rngs[i].uniform(-cfg.eps, cfg.eps));
  }
  Tensor<float> x_cur(x.shape());
  for (int it = 0; it < steps; ++it) {
    for (size_t i = 0; i < x_cur.size(); ++i) x_cur[i] = x[i] + delta[i];
    clip_into(x_cur, cfg);
    Tensor<float> g =
        eot_gradient(target, x_cur, y, cfg.eot_L, seed, sample_offset,
                     static_cast<uint64_t>(it) * static_cast<uint64_t>(cfg.eot_L));
    for (size_t i = 0; i < delta.size(); ++i) {
      float d = delta[i] + alpha * sgn(g[i]);
      delta[i] = std::min(cfg.eps, std::max(-cfg.eps, d));
    }
  }
  Tensor<float> x_adv = x;
  for (size_t i = 0; i < x_adv.size(); ++i) x_adv[i] += delta[i];
  clip_into(x_adv, cfg);
  return finish(target, x, std::move(x_adv), y, seed, sample_offset);
}

// ---- spsa ----------------------------------------------------------------------

Tensor<float> spsa_gradient_estimate(const AttackTarget& target,
                                     const Tensor<float>& x,
                                     const Tensor<float>& y, int samples,
                                     float delta, uint64_t seed,
                                     size_t sample_offset, uint64_t draw_base) {
  const size_t B = x.dim(0), per = B ? x.size() / B : 0;
  const size_t K = y.dim(1);
  Tensor<float> g(x.shape());
  std::vector<Rng> dir_rngs = make_sample_rngs(seed, "spsa-dir", sample_offset, B, draw_base);
  // Each original sample is expanded into paired +-delta*v probes, evaluated
  // in bounded chunks.
  for (size_t b = 0; b < B; ++b) {
    std::vector<float> dirs(static_cast<size_t>(samples) * per);
    for (size_t k = 0; k < static_cast<size_t>(samples); ++k)
      for (size_t j = 0; j < per; ++j)
        dirs[k * per + j] = static_cast<float>(dir_rngs[b].sign());
    uint64_t query = 0;
    for (size_t k0 = 0; k0 < static_cast<size_t>(samples); k0 += kSpsaChunk) {
      const size_t kn = std::min(kSpsaChunk, static_cast<size_t>(samples) - k0);
      std::vector<size_t> chunk_shape = x.shape();
      chunk_shape[0] = 2 * kn;
      Tensor<float> probes(chunk_shape);
      Tensor<float> ychunk({2 * kn, K});
      for (size_t k = 0; k < kn; ++k) {
        const float* v = dirs.data() + (k0 + k) * per;
        float* plus = probes.data() + (2 * k) * per;
        float* minus = probes.data() + (2 * k + 1) * per;
        const float* xb = x.data() + b * per;
        for (size_t j = 0; j < per; ++j) {
          plus[j] = xb[j] + delta * v[j];
          minus[j] = xb[j] - delta * v[j];
        }
        for (size_t j = 0; j < K; ++j) {
          ychunk[(2 * k) * K + j] = y[b * K + j];
          ychunk[(2 * k + 1) * K + j] = y[b * K + j];
        }
      }
      NoiseSource<float> noise;
      std::vector<Rng> noise_rngs;
      if (target.stochastic()) {
        // one independent draw per query row
        noise_rngs.reserve(2 * kn);
        const uint64_t base = derive_seed(seed, "spsa-noise");
        for (size_t k = 0; k < 2 * kn; ++k)
          noise_rngs.emplace_back(
              derive_seed(base, sample_offset + b, draw_base * 1000003 + query + k));
        noise.rngs = noise_rngs;
      }
      query += 2 * kn;
      Tensor<float> losses = target.sample_losses(probes, ychunk, noise);
      float* gb = g.data() + b * per;
      for (size_t k = 0; k < kn; ++k) {
        const float diff = (losses[2 * k] - losses[2 * k + 1]) / (2 * delta);
        const float* v = dirs.data() + (k0 + k) * per;
        for (size_t j = 0; j < per; ++j) gb[j] += diff * v[j];
      }
    }
    const float inv = 1.0f / static_cast<float>(samples);
    float* gb = g.data() + b * per;
    for (size_t j = 0; j < per; ++j) gb[j] *= inv;
  }
  return g;
}

AdvBatch spsa(const AttackTarget& target, const Tensor<float>& x,
              const Tensor<float>& y, const AttackConfig& cfg, uint64_t seed,
              size_t sample_offset) {
  cfg.validate();
  const int steps = cfg.resolved_steps();
  const size_t B = x.dim(0), per = B ? x.size() / B : 0;
  Tensor<float> delta(x.shape());
  Tensor<float> m(x.shape()), v(x.shape());
  const float b1 = 0.9f, b2 = 0.999f, adam_eps = 1e-8f;
  for (int it = 0; it < steps; ++it) {
    Tensor<float> x_cur(x.shape());
    for (size_t i = 0; i < x_cur.size(); ++i) x_cur[i] = x[i] + delta[i];
    clip_into(x_cur, cfg);
    Tensor<float> g = spsa_gradient_estimate(target, x_cur, y, cfg.spsa_samples,
                                             cfg.spsa_delta, seed, sample_offset,
                                             static_cast<uint64_t>(it));
    // Adam on -g: ascend the loss
    const float bc1 = 1.0f - std::pow(b1, static_cast<float>(it + 1));
    const float bc2 = 1.0f - std::pow(b2, static_cast<float>(it + 1));
    for (size_t i = 0; i < delta.size(); ++i) {
      const float gi = -g[i];
      m[i] = b1 * m[i] + (1 - b1) * gi;
      v[i] = b2 * v[i] + (1 - b2) * gi * gi;
      const float mh = m[i] / bc1, vh = v[i] / bc2;
      float d = delta[i] - cfg.spsa_lr * mh / (std::sqrt(vh) + adam_eps);
      delta[i] = std::min(cfg.eps, std::max(-cfg.eps, d));
    }
    // keep x + delta inside the valid pixel range as well
    if (cfg.clip) {
      for (size_t i = 0; i < B * per; ++i) {
        const float xi = x[i];
        delta[i] = std::min(cfg.clip_hi - xi, std::max(cfg.clip_lo - xi, delta[i]));
      }
    }
  }
  Tensor<float> x_adv = x;
  for (size_t i = 0; i < x_adv.size(); ++i) x_adv[i] += delta[i];
  return finish(target, x, std::move(x_adv), y, seed, sample_offset);
}

AdvBatch run_attack(const AttackTarget& target, const Tensor<float>& x,
                    const Tensor<float>& y, const AttackConfig& cfg,
                    uint64_t seed, size_t sample_offset) {
  switch (cfg.kind) {
    case AttackKind::fgsm: return fgsm(target, x, y, cfg, seed, sample_offset);
    case AttackKind::r_plus_fgsm:
      return r_plus_fgsm(target, x, y, cfg, seed, sample_offset);
    case AttackKind::rfgsm: return rfgsm(target, x, y, cfg, seed, sample_offset);
    case AttackKind::nfgsm: return nfgsm(target, x, y, cfg, seed, sample_offset);
    case AttackKind::pgd: return pgd(target, x, y, cfg, seed, sample_offset);
    case AttackKind::spsa: return spsa(target, x, y, cfg, seed, sample_offset);
    case AttackKind::none: {
      AdvBatch out;
      out.x_adv = x;
      out.delta = Tensor<float>(x.shape());
      return out;
    }
  }
  throw std::logic_error("run_attack: bad kind");
}

Tensor<float> one_hot(const std::vector<int>& labels, size_t num_classes) {
  Tensor<float> y({labels.size(), num_classes});
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<size_t>(labels[i]) >= num_classes)
      throw std::invalid_argument("one_hot: label " + std::to_string(labels[i]) +
                                  " out of range");
    y[i * num_classes + labels[i]] = 1.0f;
  }
  return y;
}

std::vector<int> labels_of(const Tensor<float>& one_hot) {
  const size_t B = one_hot.dim(0), K = one_hot.dim(1);
  std::vector<int> out(B, -1);
  for (size_t b = 0; b < B; ++b)
    for (size_t j = 0; j < K; ++j)
      if (one_hot[b * K + j] == 1.0f) out[b] = static_cast<int>(j);
  return out;
}

}  // namespace advkit
