#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "advkit/ops.hpp"
#include "advkit/rng.hpp"

namespace advkit {

enum class Mode { train, eval };

// Noise feed for stochastic layers. Either one generator per batch sample
// (fresh standard-normal draws, row-major within a sample) or a frozen noise
// tensor, used when gradients are checked against finite differences.
template <class T>
struct NoiseSource {
  std::span<Rng> rngs{};
  const Tensor<T>* frozen = nullptr;
  bool available() const { return frozen != nullptr || !rngs.empty(); }
};

// Per-sample generators for one noise draw. Every stream is derived from
// (seed, tag, global sample index, draw index), so results are independent of
// how a sample set is batched or sharded.
inline std::vector<Rng> make_sample_rngs(uint64_t seed, std::string_view tag,
                                         size_t sample_offset, size_t n,
                                         uint64_t draw) {
  std::vector<Rng> rngs;
  rngs.reserve(n);
  const uint64_t base = derive_seed(seed, tag);
  for (size_t i = 0; i < n; ++i)
    rngs.emplace_back(derive_seed(base, sample_offset + i, draw));
  return rngs;
}

template <class T>
Tensor<T> draw_noise(const std::vector<size_t>& shape, std::span<Rng> rngs) {
  Tensor<T> n(shape);
  const size_t batch = shape.empty() ? 0 : shape[0];
  if (rngs.size() != batch)
    throw std::invalid_argument("draw_noise: " + std::to_string(rngs.size()) +
                                " generators for batch of " + std::to_string(batch));
  const size_t per = batch ? n.size() / batch : 0;
  for (size_t i = 0; i < batch; ++i)
    for (size_t j = 0; j < per; ++j)
      n[i * per + j] = static_cast<T>(rngs[i].gauss());
  return n;
}

// ---- layers ----------------------------------------------------------------

template <class T>
struct Conv2d {
  std::string name;
  Tensor<T> w;  // (Co,Ci,K,K)
  Tensor<T> b;  // (Co)
  size_t stride = 1;
  size_t pad = 1;
};

template <class T>
struct Dense {
  std::string name;
  Tensor<T> w;  // (In,Out)
  Tensor<T> b;  // (Out)
};

struct Relu {};
struct Flatten {};
struct GlobalAvgPool {};

struct MaxPool {
  size_t k = 2;
  size_t stride = 2;
};

// Pixelwise noise injection. Learns one weight and one bias per input
// feature, computes the log-variance sigma = x*w + b and resamples
//   x' = x + n * exp(sigma / 2),   n ~ N(0,1) per feature,
// in train and eval mode alike. sigma/2 is clamped from above so exp cannot
// overflow.
template <class T>
struct Pnil {
  std::string name;
  Tensor<T> w;  // shaped like one sample
  Tensor<T> b;
  T log_std_clamp = T(10);
};

// Two 3x3 convolutions plus a skip; the skip is a 1x1 projection whenever
// shape changes, identity otherwise. ReLU after the join.
template <class T>
struct ResBlock {
  Conv2d<T> conv1;
  Conv2d<T> conv2;
  std::optional<Conv2d<T>> proj;
};

template <class T>
using Layer = std::variant<Conv2d<T>, Dense<T>, Relu, MaxPool, Flatten,
                           GlobalAvgPool, Pnil<T>, ResBlock<T>>;

// ---- forward pieces --------------------------------------------------------

template <class T>
struct PnilForward {
  Var<T> x_out;
  Var<T> sigma;
};

template <class T>
PnilForward<T> pnil_forward(Tape<T>& tape, Var<T> x, Var<T> w, Var<T> b,
                            const Tensor<T>& noise, T log_std_clamp) {
  if (tape.value(x).shape() != noise.shape())
    throw std::invalid_argument("pnil: noise shape " + shape_str(noise.shape()) +
                                " does not match input " +
                                shape_str(tape.value(x).shape()));
  auto sigma = ops::add(tape, ops::mul(tape, x, w), b);
  auto half = ops::clamp_max(tape, ops::scale(tape, sigma, T(0.5)), log_std_clamp);
  auto stddev = ops::exp(tape, half);
  auto n = tape.leaf(noise, false);
  auto out = ops::add(tape, x, ops::mul(tape, n, stddev));
  return {out, sigma};
}

// ---- model -----------------------------------------------------------------

template <class T>
class Model {
 public:
  struct ForwardResult {
    Var<T> logits;
    std::vector<std::pair<std::string, Var<T>>> params;
  };

  Model() = default;
  Model(std::vector<size_t> in_shape, size_t num_classes, uint64_t init_seed)
      : in_shape_(std::move(in_shape)), num_classes_(num_classes),
        init_seed_(init_seed) {}

  void append(Layer<T> layer) { layers_.push_back(std::move(layer)); }

  const std::vector<size_t>& in_shape() const { return in_shape_; }
  size_t num_classes() const { return num_classes_; }
  uint64_t init_seed() const { return init_seed_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }
  const std::vector<Layer<T>>& layers() const { return layers_; }

  bool has_pnil() const {
    for (const auto& l : layers_)
      if (std::holds_alternative<Pnil<T>>(l)) return true;
    return false;
  }

  // Ordered parameter registry; throws if a name repeats.
  std::vector<std::pair<std::string, Tensor<T>*>> params() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto add = [&out](const std::string& n, Tensor<T>* t) {
      for (const auto& [name, ptr] : out)
        if (name == n) throw std::logic_error("duplicate parameter name: " + n);
      out.emplace_back(n, t);
    };
    for (auto& l : layers_) {
      std::visit(
          [&](auto& layer) {
            using L = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<L, Conv2d<T>> || std::is_same_v<L, Dense<T>>) {
              add(layer.name + ".w", &layer.w);
              add(layer.name + ".b", &layer.b);
            } else if constexpr (std::is_same_v<L, Pnil<T>>) {
              add(layer.name + ".w", &layer.w);
              add(layer.name + ".b", &layer.b);
            } else if constexpr (std::is_same_v<L, ResBlock<T>>) {
              add(layer.conv1.name + ".w", &layer.conv1.w);
              add(layer.conv1.name + ".b", &layer.conv1.b);
              add(layer.conv2.name + ".w", &layer.conv2.w);
              add(layer.conv2.name + ".b", &layer.conv2.b);
              if (layer.proj) {
                add(layer.proj->name + ".w", &layer.proj->w);
                add(layer.proj->name + ".b", &layer.proj->b);
              }
            }
          },
          l);
    }
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> params() const {
    auto mutable_params = const_cast<Model*>(this)->params();
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    out.reserve(mutable_params.size());
    for (auto& [n, p] : mutable_params) out.emplace_back(n, p);
    return out;
  }

  size_t param_count() const {
    size_t n = 0;
    for (const auto& [name, p] : params()) n += p->size();
    return n;
  }

  // Runs the network, leafing every parameter onto the tape. With
  // param_grads=false the parameters are recorded as constants, so a backward
  // pass produces only input gradients (the attack path).
  ForwardResult forward(Tape<T>& tape, Var<T> x, const NoiseSource<T>& noise,
                        bool param_grads = true) const {
    ForwardResult res;
    auto leaf_param = [&](const std::string& n, const Tensor<T>& t) {
      Var<T> v = tape.leaf(t, param_grads);
      if (param_grads) res.params.emplace_back(n, v);
      return v;
    };
    // parameters are leafed in registry order, independent of dataflow order
    auto conv_apply_with = [&](const Conv2d<T>& c, Var<T> h, Var<T> wv, Var<T> bv) {
      auto z = ops::conv2d(tape, h, wv, c.stride, c.pad);
      return ops::add(tape, z, ops::reshape(tape, bv, {c.b.size(), 1, 1}));
    };
    auto conv_apply = [&](const Conv2d<T>& c, Var<T> h) {
      auto wv = leaf_param(c.name + ".w", c.w);
      auto bv = leaf_param(c.name + ".b", c.b);
      return conv_apply_with(c, h, wv, bv);
    };
    Var<T> h = x;
    for (const auto& l : layers_) {
      std::visit(
          [&](const auto& layer) {
            using L = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<L, Conv2d<T>>) {
              h = conv_apply(layer, h);
            } else if constexpr (std::is_same_v<L, Dense<T>>) {
              auto wv = leaf_param(layer.name + ".w", layer.w);
              auto bv = leaf_param(layer.name + ".b", layer.b);
              h = ops::add(tape, ops::matmul(tape, h, wv), bv);
            } else if constexpr (std::is_same_v<L, Relu>) {
              h = ops::relu(tape, h);
            } else if constexpr (std::is_same_v<L, MaxPool>) {
              h = ops::max_pool2d(tape, h, layer.k, layer.stride);
            } else if constexpr (std::is_same_v<L, Flatten>) {
              h = ops::batch_flatten(tape, h);
            } else if constexpr (std::is_same_v<L, GlobalAvgPool>) {
              h = ops::global_avg_pool(tape, h);
            } else if constexpr (std::is_same_v<L, Pnil<T>>) {
              auto wv = leaf_param(layer.name + ".w", layer.w);
              auto bv = leaf_param(layer.name + ".b", layer.b);
              Tensor<T> n;
              const Tensor<T>* np = noise.frozen;
              if (!np) {
                if (noise.rngs.empty())
                  throw std::logic_error("pnil: model is stochastic but no noise "
                                         "source was provided");
                n = draw_noise<T>(tape.value(h).shape(), noise.rngs);
                np = &n;
              }
              h = pnil_forward(tape, h, wv, bv, *np, layer.log_std_clamp).x_out;
            } else if constexpr (std::is_same_v<L, ResBlock<T>>) {
              auto w1 = leaf_param(layer.conv1.name + ".w", layer.conv1.w);
              auto b1 = leaf_param(layer.conv1.name + ".b", layer.conv1.b);
              auto w2 = leaf_param(layer.conv2.name + ".w", layer.conv2.w);
              auto b2 = leaf_param(layer.conv2.name + ".b", layer.conv2.b);
              Var<T> skip = h;
              if (layer.proj) skip = conv_apply(*layer.proj, h);
              auto z = conv_apply_with(layer.conv1, h, w1, b1);
              z = ops::relu(tape, z);
              z = conv_apply_with(layer.conv2, z, w2, b2);
              h = ops::relu(tape, ops::add(tape, z, skip));
            }
          },
          l);
    }
    res.logits = h;
    return res;
  }

  // Forward-only logits (no backward closures recorded).
  Tensor<T> logits(const Tensor<T>& x, const NoiseSource<T>& noise) const {
    Tape<T> tape;
    tape.set_grad_enabled(false);
    auto res = forward(tape, tape.leaf(x), noise, false);
    return tape.value(res.logits);
  }

  std::vector<int> predict(const Tensor<T>& x, const NoiseSource<T>& noise) const {
    Tensor<T> z = logits(x, noise);
    const size_t B = z.dim(0), K = z.dim(1);
    std::vector<int> out(B);
    for (size_t b = 0; b < B; ++b) {
      size_t best = 0;
      for (size_t j = 1; j < K; ++j)
        if (z[b * K + j] > z[b * K + best]) best = j;
      out[b] = static_cast<int>(best);
    }
    return out;
  }

  template <class U>
  Model<U> cast() const {
    Model<U> m(in_shape_, num_classes_, init_seed_);
    m.set_mode(mode_);
    for (const auto& l : layers_) {
      std::visit(
          [&m](const auto& layer) {
            using L = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<L, Conv2d<T>>) {
              m.append(Conv2d<U>{layer.name, layer.w.template cast<U>(),
                                 layer.b.template cast<U>(), layer.stride,
                                 layer.pad});
            } else if constexpr (std::is_same_v<L, Dense<T>>) {
              m.append(Dense<U>{layer.name, layer.w.template cast<U>(),
                                layer.b.template cast<U>()});
            } else if constexpr (std::is_same_v<L, Relu>) {
              m.append(Relu{});
            } else if constexpr (std::is_same_v<L, MaxPool>) {
              m.append(layer);
            } else if constexpr (std::is_same_v<L, Flatten>) {
              m.append(Flatten{});
            } else if constexpr (std::is_same_v<L, GlobalAvgPool>) {
              m.append(GlobalAvgPool{});
            } else if constexpr (std::is_same_v<L, Pnil<T>>) {
              m.append(Pnil<U>{layer.name, layer.w.template cast<U>(),
                               layer.b.template cast<U>(),
                               static_cast<U>(layer.log_std_clamp)});
            } else if constexpr (std::is_same_v<L, ResBlock<T>>) {
              auto cast_conv = [](const Conv2d<T>& c) {
                return Conv2d<U>{c.name, c.w.template cast<U>(),
                                 c.b.template cast<U>(), c.stride, c.pad};
              };
              ResBlock<U> rb{cast_conv(layer.conv1), cast_conv(layer.conv2), {}};
              if (layer.proj) rb.proj = cast_conv(*layer.proj);
              m.append(std::move(rb));
            }
          },
          l);
    }
    return m;
  }

 private:
  std::vector<size_t> in_shape_;
  size_t num_classes_ = 0;
  uint64_t init_seed_ = 0;
  Mode mode_ = Mode::train;
  std::vector<Layer<T>> layers_;
};

// ---- builders --------------------------------------------------------------

struct PnilInit {
  float w = 0.0f;
  // exp(b/2) ~= 0.22 on [0,1] inputs; unit noise at init drowns the signal
  float b = -3.0f;
};

struct SmallCnnConfig {
  size_t conv1_channels = 16;
  size_t conv2_channels = 32;
  size_t kernel = 3;
  size_t pool = 2;
  bool with_pnil = false;
  PnilInit pnil;
};

struct Resnet11Config {
  std::vector<size_t> block_channels = {16, 32, 32, 64, 64};
  size_t stem_channels = 16;
  bool with_pnil = false;
  PnilInit pnil;
};

namespace detail {

template <class T>
Tensor<T> he_normal(std::vector<size_t> shape, size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(s * rng.gauss());
  return t;
}

template <class T>
Conv2d<T> make_conv(const std::string& name, size_t ci, size_t co, size_t k,
                    size_t stride, size_t pad, Rng& rng) {
  return Conv2d<T>{name, he_normal<T>({co, ci, k, k}, ci * k * k, rng),
                   Tensor<T>({co}), stride, pad};
}

}  // namespace detail

// Two convolutions followed by a fully-connected head; optional noise
// injection as the very first layer.
template <class T>
Model<T> build_small_cnn(std::vector<size_t> in_shape, size_t num_classes,
                         const SmallCnnConfig& cfg, uint64_t init_seed) {
  if (in_shape.size() != 3)
    throw std::invalid_argument("build_small_cnn: in_shape must be (C,H,W)");
  if (num_classes < 2)
    throw std::invalid_argument("build_small_cnn: need at least 2 classes");
  Rng rng(derive_seed(init_seed, "init"));
  Model<T> m(in_shape, num_classes, init_seed);
  const size_t C = in_shape[0], H = in_shape[1], W = in_shape[2];
  if (cfg.with_pnil)
    m.append(Pnil<T>{"pnil", Tensor<T>::full({C, H, W}, T(cfg.pnil.w)),
                     Tensor<T>::full({C, H, W}, T(cfg.pnil.b))});
  const size_t pad = cfg.kernel / 2;
  m.append(detail::make_conv<T>("conv1", C, cfg.conv1_channels, cfg.kernel, 1, pad, rng));
  m.append(Relu{});
  m.append(MaxPool{cfg.pool, cfg.pool});
  m.append(detail::make_conv<T>("conv2", cfg.conv1_channels, cfg.conv2_channels,
                                cfg.kernel, 1, pad, rng));
  m.append(Relu{});
  m.append(MaxPool{cfg.pool, cfg.pool});
  m.append(Flatten{});
  const size_t h2 = H / cfg.pool / cfg.pool, w2 = W / cfg.pool / cfg.pool;
  const size_t flat = cfg.conv2_channels * h2 * w2;
  m.append(Dense<T>{"fc", detail::he_normal<T>({flat, num_classes}, flat, rng),
                    Tensor<T>({num_classes})});
  return m;
}

// Stem convolution, five residual blocks (stride 2 wherever the channel count
// grows), global average pooling and a dense head: 11 weighted layers.
template <class T>
Model<T> build_resnet11(std::vector<size_t> in_shape, size_t num_classes,
                        const Resnet11Config& cfg, uint64_t init_seed) {
  if (in_shape.size() != 3)
    throw std::invalid_argument("build_resnet11: in_shape must be (C,H,W)");
  Rng rng(derive_seed(init_seed, "init"));
  Model<T> m(in_shape, num_classes, init_seed);
  const size_t C = in_shape[0], H = in_shape[1], W = in_shape[2];
  if (cfg.with_pnil)
    m.append(Pnil<T>{"pnil", Tensor<T>::full({C, H, W}, T(cfg.pnil.w)),
                     Tensor<T>::full({C, H, W}, T(cfg.pnil.b))});
  m.append(detail::make_conv<T>("stem", C, cfg.stem_channels, 3, 1, 1, rng));
  m.append(Relu{});
  size_t ch = cfg.stem_channels;
  for (size_t i = 0; i < cfg.block_channels.size(); ++i) {
    const size_t out_ch = cfg.block_channels[i];
    const size_t stride = out_ch != ch ? 2 : 1;
    const std::string base = "block" + std::to_string(i + 1);
    ResBlock<T> rb{detail::make_conv<T>(base + ".conv1", ch, out_ch, 3, stride, 1, rng),
                   detail::make_conv<T>(base + ".conv2", out_ch, out_ch, 3, 1, 1, rng),
                   {}};
    if (stride != 1 || out_ch != ch)
      rb.proj = detail::make_conv<T>(base + ".proj", ch, out_ch, 1, stride, 0, rng);
    m.append(std::move(rb));
    ch = out_ch;
  }
  m.append(GlobalAvgPool{});
  m.append(Dense<T>{"fc", detail::he_normal<T>({ch, num_classes}, ch, rng),
                    Tensor<T>({num_classes})});
  return m;
}

}  // namespace advkit
