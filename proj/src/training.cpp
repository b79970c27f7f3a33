#include "advkit/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "advkit/checkpoint.hpp"

namespace advkit {

double cyclical_lr(int64_t iteration, double lo, double hi, int64_t cycle_len) {
  if (cycle_len < 2) throw std::invalid_argument("cyclical_lr: cycle_len must be >= 2");
  if (!(lo < hi)) throw std::invalid_argument("cyclical_lr: need lo < hi");
  const double pos = static_cast<double>(iteration % cycle_len) /
                     static_cast<double>(cycle_len);
  const double tri = 1.0 - std::abs(2.0 * pos - 1.0);  // 0 at ends, 1 at midpoint
  return lo + (hi - lo) * tri;
}

AdamState make_adam_state(
    const std::vector<std::pair<std::string, Tensor<float>*>>& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto& [name, p] : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

void adam_step(std::vector<std::pair<std::string, Tensor<float>*>>& params,
               const std::vector<const Tensor<float>*>& grads, AdamState& state,
               float lr, const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
  ++state.t;
  const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(state.t));
  const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(state.t));
  for (size_t k = 0; k < params.size(); ++k) {
    Tensor<float>& p = *params[k].second;
    const Tensor<float>& g = *grads[k];
    Tensor<float>& m = state.m[k];
    Tensor<float>& v = state.v[k];
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
      const float mh = m[i] / bc1;
      const float vh = v[i] / bc2;
      p[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (!(lr_lo < lr_hi)) throw std::invalid_argument("train: need lr_lo < lr_hi");
  if (attack.kind != AttackKind::none) {
    if (attack.kind != AttackKind::nfgsm && attack.kind != AttackKind::rfgsm &&
        attack.kind != AttackKind::fgsm)
      throw std::invalid_argument(
          "train: training attack must be one of nfgsm/rfgsm/fgsm/none, got " +
          to_string(attack.kind));
    attack.validate();
  }
}

namespace {

struct BatchView {
  Tensor<float> x;
  Tensor<float> y;
};

BatchView gather_batch(const Dataset& data, const std::vector<size_t>& order,
                       size_t begin, size_t end) {
  std::vector<size_t> idx(order.begin() + begin, order.begin() + end);
  Dataset sub = data.subset(idx);
  return {std::move(sub.images), one_hot(sub.labels, data.classes)};
}

// One optimizer step on (x_adv, y); returns the batch loss.
double train_step(Model<float>& model,
                  std::vector<std::pair<std::string, Tensor<float>*>>& params,
                  AdamState& adam, const Tensor<float>& x, const Tensor<float>& y,
                  float lr, const TrainConfig& cfg, uint64_t noise_seed) {
  Tape<float> tape;
  Var<float> xv = tape.leaf(x, false);
  std::vector<Rng> rngs;
  NoiseSource<float> noise;
  if (model.has_pnil()) {
    rngs = make_sample_rngs(noise_seed, "train-noise", 0, x.dim(0), 0);
    noise.rngs = rngs;
  }
  auto fwd = model.forward(tape, xv, noise, /*param_grads=*/true);
  Var<float> loss = ops::softmax_cross_entropy(tape, fwd.logits, y);
  const double loss_value = tape.value(loss)[0];
  if (!std::isfinite(loss_value)) return loss_value;  // caller raises
  if (params.empty()) return loss_value;
  tape.backward(loss);
  std::vector<const Tensor<float>*> grads;
  grads.reserve(params.size());
  for (size_t k = 0; k < params.size(); ++k) {
    if (fwd.params[k].first != params[k].first)
      throw std::logic_error("train: parameter registry order changed");
    const Tensor<float>* g = tape.grad(fwd.params[k].second);
    if (!g) throw std::logic_error("train: no gradient for " + params[k].first);
    grads.push_back(g);
  }
  adam_step(params, grads, adam, lr, cfg.adam);
  return loss_value;
}

double adversarial_val_loss(const Model<float>& model, const Dataset& val,
                            const TrainConfig& cfg, int epoch) {
  Dataset subset = cfg.val_subset > 0 && static_cast<size_t>(cfg.val_subset) < val.size()
                       ? val.take(static_cast<size_t>(cfg.val_subset))
                       : val;
  const uint64_t seed = derive_seed(cfg.seed, "val", static_cast<uint64_t>(epoch));
  ModelTarget target(model);
  AttackConfig pgd_cfg;
  pgd_cfg.kind = AttackKind::pgd;
  pgd_cfg.eps = cfg.attack.eps;
  pgd_cfg.steps = cfg.val_pgd_steps;
  pgd_cfg.clip = cfg.attack.clip;
  pgd_cfg.clip_lo = cfg.attack.clip_lo;
  pgd_cfg.clip_hi = cfg.attack.clip_hi;
  const size_t batch = 100;
  double total = 0;
  for (size_t off = 0; off < subset.size(); off += batch) {
    const size_t n = std::min(batch, subset.size() - off);
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), off);
    Dataset chunk = subset.subset(idx);
    Tensor<float> y = one_hot(chunk.labels, subset.classes);
    Tensor<float> x_adv;
    if (cfg.attack.kind == AttackKind::none || pgd_cfg.eps == 0) {
      x_adv = chunk.images;
    } else {
      x_adv = pgd(target, chunk.images, y, pgd_cfg, seed, off).x_adv;
    }
    NoiseSource<float> noise;
    std::vector<Rng> rngs;
    if (model.has_pnil()) {
      rngs = make_sample_rngs(seed, "val-noise", off, n, 0);
      noise.rngs = rngs;
    }
    Tensor<float> losses = target.sample_losses(x_adv, y, noise);
    for (size_t i = 0; i < losses.size(); ++i) total += losses[i];
  }
  return total / static_cast<double>(subset.size());
}

}  // namespace

double dataset_loss(const Model<float>& model, const Dataset& data, uint64_t seed,
                    size_t batch) {
  ModelTarget target(model);
  double total = 0;
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
    Tensor<float> losses =
        target.sample_losses(chunk.images, one_hot(chunk.labels, data.classes), noise);
    for (size_t i = 0; i < losses.size(); ++i) total += losses[i];
  }
  return data.size() ? total / static_cast<double>(data.size()) : 0.0;
}

double dataset_accuracy(const Model<float>& model, const Dataset& data,
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
    for (size_t i = 0; i < preds.size(); ++i)
      if (preds[i] == chunk.labels[i]) ++correct;
  }
  return data.size() ? 100.0 * static_cast<double>(correct) /
                           static_cast<double>(data.size())
                     : 0.0;
}

TrainResult adversarial_train(Model<float>& model, const Dataset& train,
                              const Dataset& val, const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result;
  if (cfg.epochs == 0) return result;
  if (train.size() == 0) throw std::invalid_argument("train: empty training set");

  auto params = model.params();
  AdamState adam = make_adam_state(params);
  const int64_t iters_per_epoch =
      (static_cast<int64_t>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t cycle =
      cfg.cycle_len > 0 ? cfg.cycle_len : std::max<int64_t>(2, 4 * iters_per_epoch);

  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  ModelTarget target(model);

  namespace fs = std::filesystem;
  if (!cfg.checkpoint_dir.empty()) fs::create_directories(cfg.checkpoint_dir);

  double best_loss = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  TensorFile best_params;
  int since_best = 0;
  int64_t it = 0;

  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0;
    double lr = cfg.lr_lo;
    for (size_t begin = 0; begin < train.size();
         begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end =
          std::min(train.size(), begin + static_cast<size_t>(cfg.batch_size));
      BatchView batch = gather_batch(train, order, begin, end);
      Tensor<float> x_adv;
      if (cfg.attack.kind == AttackKind::none) {
        x_adv = std::move(batch.x);
      } else {
        const uint64_t attack_seed =
            derive_seed(cfg.seed, "attack", static_cast<uint64_t>(it));
        x_adv = run_attack(target, batch.x, batch.y, cfg.attack, attack_seed).x_adv;
      }
      lr = static_cast<float>(cyclical_lr(it, cfg.lr_lo, cfg.lr_hi, cycle));
      const uint64_t noise_seed =
          derive_seed(cfg.seed, "train-noise", static_cast<uint64_t>(it));
      const double loss =
          train_step(model, params, adam, x_adv, batch.y, lr, cfg, noise_seed);
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "training diverged: non-finite loss at epoch " << epoch << ", batch "
           << begin / cfg.batch_size << ", lr " << lr;
        throw TrainingDiverged(os.str());
      }
      epoch_loss += loss * static_cast<double>(end - begin);
      ++it;
    }
    epoch_loss /= static_cast<double>(train.size());

    const double adv_loss = adversarial_val_loss(model, val, cfg, epoch);
    const double clean_acc =
        dataset_accuracy(model, val, derive_seed(cfg.seed, "val-clean",
                                                 static_cast<uint64_t>(epoch)));
    result.log.push_back({epoch, epoch_loss, clean_acc, adv_loss, lr});

    CheckpointRecord rec;
    rec.epoch = epoch;
    rec.adv_val_loss = adv_loss;
    std::map<std::string, std::string> meta{
        {"epoch", std::to_string(epoch)},
        {"adv_val_loss", std::to_string(adv_loss)}};
    if (!cfg.checkpoint_dir.empty()) {
      char name[64];
      std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch);
      rec.path = (fs::path(cfg.checkpoint_dir) / name).string();
      save_checkpoint(rec.path, model, meta);
    }
    if (adv_loss < best_loss) {
      best_loss = adv_loss;
      best_epoch = epoch;
      since_best = 0;
      best_params.tensors.clear();
      for (const auto& [name, t] : model.params())
        best_params.tensors.emplace_back(name, *t);
      best_params.meta = meta;
    } else {
      ++since_best;
    }
    result.checkpoints.push_back(rec);
    if (cfg.verbose)
      std::printf("epoch %3d  loss %.4f  clean val %.1f%%  adv val loss %.4f\n",
                  epoch, epoch_loss, clean_acc, adv_loss);
    if (cfg.patience > 0 && since_best >= cfg.patience) break;
  }

  for (auto& rec : result.checkpoints) rec.best = rec.epoch == best_epoch;
  result.best_epoch = best_epoch;
  if (cfg.restore_best && best_epoch >= 0) {
    for (auto& [name, t] : model.params()) {
      const Tensor<float>* src = best_params.find(name);
      if (src) *t = *src;
    }
  }
  if (!cfg.checkpoint_dir.empty() && best_epoch >= 0) {
    save_checkpoint((fs::path(cfg.checkpoint_dir) / "best.ckpt").string(), model,
                    best_params.meta);
  }
  return result;
}

LrRangeResult lr_range_test(Model<float> model, const Dataset& train,
                            const TrainConfig& cfg, float lr_from, float lr_to,
                            int iters) {
  if (iters < 2) throw std::invalid_argument("lr_range_test: need at least 2 iters");
  LrRangeResult out;
  auto params = model.params();
  AdamState adam = make_adam_state(params);
  ModelTarget target(model);
  Rng shuffle_rng(derive_seed(cfg.seed, "lr-find"));
  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle_rng.shuffle(order);
  size_t cursor = 0;
  double smoothed = 0;
  bool first = true;
  double initial = 0;
  const double beta = 0.95;  // EMA over the noisy batch losses
  for (int k = 0; k < iters; ++k) {
    const double lr = lr_from + (lr_to - lr_from) * static_cast<double>(k) /
                                    static_cast<double>(iters - 1);
    if (cursor + static_cast<size_t>(cfg.batch_size) > train.size()) {
      shuffle_rng.shuffle(order);
      cursor = 0;
    }
    const size_t end = std::min(train.size(), cursor + static_cast<size_t>(cfg.batch_size));
    BatchView batch = gather_batch(train, order, cursor, end);
    cursor = end;
    Tensor<float> x_adv;
    if (cfg.attack.kind == AttackKind::none) {
      x_adv = std::move(batch.x);
    } else {
      x_adv = run_attack(target, batch.x, batch.y, cfg.attack,
                         derive_seed(cfg.seed, "lr-attack", k))
                  .x_adv;
    }
    const double loss = train_step(model, params, adam, x_adv, batch.y,
                                   static_cast<float>(lr), cfg,
                                   derive_seed(cfg.seed, "lr-noise", k));
    if (!std::isfinite(loss)) {
      out.diverged = true;
      break;
    }
    smoothed = first ? loss : beta * smoothed + (1 - beta) * loss;
    if (first) {
      initial = smoothed;
      first = false;
    }
    out.curve.push_back({lr, smoothed});
    if (smoothed > 4.0 * initial) {
      out.diverged = true;
      break;
    }
  }
  return out;
}

}  // namespace advkit
