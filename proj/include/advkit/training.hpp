#pragma once

#include <functional>
#include <string>
#include <vector>

#include "advkit/attacks.hpp"
#include "advkit/data_io.hpp"
#include "advkit/model.hpp"

namespace advkit {

// Triangular learning-rate wave: lo at the cycle boundaries, hi at the
// midpoint, linear in between.
double cyclical_lr(int64_t iteration, double lo, double hi, int64_t cycle_len);

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  std::vector<Tensor<float>> m;
  std::vector<Tensor<float>> v;
  int64_t t = 0;
};

AdamState make_adam_state(const std::vector<std::pair<std::string, Tensor<float>*>>& params);

// Standard bias-corrected Adam update, in parameter-registry order.
void adam_step(std::vector<std::pair<std::string, Tensor<float>*>>& params,
               const std::vector<const Tensor<float>*>& grads, AdamState& state,
               float lr, const AdamConfig& cfg);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 100;
  AttackConfig attack;            // nfgsm / rfgsm / fgsm, or none for clean
  AdamConfig adam;
  float lr_lo = 1e-3f;
  float lr_hi = 6e-3f;
  int cycle_len = -1;             // iterations per lr cycle; <0 = 4 epochs
  int patience = 10;              // early stop on adversarial validation loss
  int val_pgd_steps = 10;         // cheap PGD for the per-epoch validation loss
  int val_subset = 1000;          // validation samples used per epoch (0 = all)
  uint64_t seed = 1;
  std::string checkpoint_dir;     // empty = no files, best kept in memory
  bool restore_best = true;
  bool verbose = false;

  void validate() const;
};

struct CheckpointRecord {
  int epoch = 0;
  double adv_val_loss = 0;
  std::string path;
  bool best = false;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double clean_val_acc = 0;
  double adv_val_loss = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<CheckpointRecord> checkpoints;
  std::vector<EpochLog> log;
  int best_epoch = -1;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Adversarial training: per batch, adversarial examples are generated with
// the configured one-step attack, the loss is taken on those inputs, and the
// parameters get one Adam step under the cyclical schedule. Per epoch the
// adversarial validation loss (cheap PGD) decides checkpoint selection.
TrainResult adversarial_train(Model<float>& model, const Dataset& train,
                              const Dataset& val, const TrainConfig& cfg);

// Sweeps the learning rate linearly over [lo, hi] for `iters` steps on a
// copy of the model and reports (lr, smoothed loss) pairs. Stops early when
// the smoothed loss exceeds 4x its starting value.
struct LrProbe {
  double lr = 0;
  double smoothed_loss = 0;
};
struct LrRangeResult {
  std::vector<LrProbe> curve;
  bool diverged = false;
};
LrRangeResult lr_range_test(Model<float> model, const Dataset& train,
                            const TrainConfig& cfg, float lr_from, float lr_to,
                            int iters);

// Mean loss and accuracy of a model on a dataset (single noise draw per
// sample, streams keyed by global sample index).
double dataset_loss(const Model<float>& model, const Dataset& data,
                    uint64_t seed, size_t batch = 100);
double dataset_accuracy(const Model<float>& model, const Dataset& data,
                        uint64_t seed, size_t batch = 100);

}  // namespace advkit
