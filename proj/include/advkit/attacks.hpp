#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "advkit/model.hpp"
#include "advkit/tensor.hpp"

namespace advkit {

enum class AttackKind { none, fgsm, r_plus_fgsm, rfgsm, nfgsm, pgd, spsa };

AttackKind attack_kind_from_string(const std::string& s);
std::string to_string(AttackKind k);
// Attacks whose output respects the eps ball (everything except nfgsm, which
// is a training-only construction reaching 2*eps).
bool is_eval_attack(AttackKind k);

struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  float eps = 8.0f / 255.0f;   // l-inf budget in input units
  float alpha = -1.0f;         // step size; < 0 selects the kind default
  int steps = -1;              // < 0 selects the kind default
  int eot_L = 1;               // Monte Carlo draws per gradient
  int spsa_samples = 2048;     // random directions per SPSA step
  float spsa_delta = 0.01f;    // SPSA finite-difference scale
  float spsa_lr = 0.01f;       // SPSA Adam learning rate
  float rand_step = -1.0f;     // r+fgsm initial step; < 0 selects eps/2
  bool pgd_random_start = true;
  bool clip = true;            // clamp adversarial pixels to the valid range
  float clip_lo = 0.0f;
  float clip_hi = 1.0f;

  void validate() const;
  float resolved_alpha() const;
  int resolved_steps() const;
  float resolved_rand_step() const;
};

struct AdvBatch {
  Tensor<float> x_adv;
  Tensor<float> delta;            // x_adv - x_clean
  std::vector<uint8_t> success;   // misclassified flags; empty when the target
                                  // has no class predictions
};

// What an attack needs from a victim: a differentiable batch loss, per-sample
// loss values for gradient-free estimation, and (for classifiers) argmax
// predictions. Analytic test problems implement this directly.
class AttackTarget {
 public:
  virtual ~AttackTarget() = default;
  virtual Var<float> batch_loss(Tape<float>& tape, Var<float> x,
                                const Tensor<float>& y,
                                NoiseSource<float> noise) const = 0;
  virtual Tensor<float> sample_losses(const Tensor<float>& x,
                                      const Tensor<float>& y,
                                      NoiseSource<float> noise) const = 0;
  virtual std::vector<int> predict(const Tensor<float>& /*x*/,
                                   NoiseSource<float> /*noise*/) const {
    return {};
  }
  virtual bool stochastic() const { return false; }
};

// Mean cross-entropy of a model's logits.
class ModelTarget : public AttackTarget {
 public:
  explicit ModelTarget(const Model<float>& model) : model_(&model) {}
  Var<float> batch_loss(Tape<float>& tape, Var<float> x, const Tensor<float>& y,
                        NoiseSource<float> noise) const override;
  Tensor<float> sample_losses(const Tensor<float>& x, const Tensor<float>& y,
                              NoiseSource<float> noise) const override;
  std::vector<int> predict(const Tensor<float>& x,
                           NoiseSource<float> noise) const override;
  bool stochastic() const override { return model_->has_pnil(); }
  const Model<float>& model() const { return *model_; }

 private:
  const Model<float>* model_;
};

// Gradient of the batch loss w.r.t. x, single noise draw.
Tensor<float> input_gradient(const AttackTarget& target, const Tensor<float>& x,
                             const Tensor<float>& y, NoiseSource<float> noise);

// Mean of L input gradients with fresh noise per draw. Deterministic targets
// are evaluated once, so the result is independent of L by construction.
Tensor<float> eot_gradient(const AttackTarget& target, const Tensor<float>& x,
                           const Tensor<float>& y, int L, uint64_t seed,
                           size_t sample_offset = 0, uint64_t draw_base = 0);

// SPSA two-point gradient estimate at x from `samples` Rademacher directions.
Tensor<float> spsa_gradient_estimate(const AttackTarget& target,
                                     const Tensor<float>& x,
                                     const Tensor<float>& y, int samples,
                                     float delta, uint64_t seed,
                                     size_t sample_offset = 0,
                                     uint64_t draw_base = 0);

AdvBatch fgsm(const AttackTarget& target, const Tensor<float>& x,
              const Tensor<float>& y, const AttackConfig& cfg, uint64_t seed,
              size_t sample_offset = 0);
AdvBatch r_plus_fgsm(const AttackTarget& target, const Tensor<float>& x,
                     const Tensor<float>& y, const AttackConfig& cfg,
                     uint64_t seed, size_t sample_offset = 0);
AdvBatch rfgsm(const AttackTarget& target, const Tensor<float>& x,
               const Tensor<float>& y, const AttackConfig& cfg, uint64_t seed,
               size_t sample_offset = 0);
AdvBatch nfgsm(const AttackTarget& target, const Tensor<float>& x,
               const Tensor<float>& y, const AttackConfig& cfg, uint64_t seed,
               size_t sample_offset = 0);
AdvBatch pgd(const AttackTarget& target, const Tensor<float>& x,
             const Tensor<float>& y, const AttackConfig& cfg, uint64_t seed,
             size_t sample_offset = 0);
AdvBatch spsa(const AttackTarget& target, const Tensor<float>& x,
              const Tensor<float>& y, const AttackConfig& cfg, uint64_t seed,
              size_t sample_offset = 0);

AdvBatch run_attack(const AttackTarget& target, const Tensor<float>& x,
                    const Tensor<float>& y, const AttackConfig& cfg,
                    uint64_t seed, size_t sample_offset = 0);

// One-hot encoding for integer labels.
Tensor<float> one_hot(const std::vector<int>& labels, size_t num_classes);
std::vector<int> labels_of(const Tensor<float>& one_hot);

}  // namespace advkit
