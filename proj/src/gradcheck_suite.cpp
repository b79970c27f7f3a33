#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string_view>

#include "advkit/gradcheck.hpp"
#include "advkit/model.hpp"
#include "advkit/rng.hpp"

namespace advkit {

namespace {

Tensor<double> gauss_tensor(std::vector<size_t> shape, Rng& rng, double scale) {
  Tensor<double> t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.gauss();
  return t;
}

struct Instance {
  Model<double> model;
  Tensor<double> x;
  Tensor<double> y;
  Tensor<double> pnil_noise;  // empty when the net has no noise layer
};

// Architectures rotate through dense, conv+pool, noise-injection and
// residual nets, all within the 500-parameter budget.
Instance build_instance(uint64_t seed, int arch) {
  Rng rng(seed);
  Instance inst;
  const size_t B = 2, K = 3;
  switch (arch) {
    case 0: {  // dense -> relu -> dense
      const size_t D = 4 + rng.uniform_int(6), Hn = 3 + rng.uniform_int(5);
      Model<double> m({D}, K, seed);
      m.append(Dense<double>{"fc1", gauss_tensor({D, Hn}, rng, 0.7),
                             gauss_tensor({Hn}, rng, 0.2)});
      m.append(Relu{});
      m.append(Dense<double>{"fc2", gauss_tensor({Hn, K}, rng, 0.7),
                             gauss_tensor({K}, rng, 0.2)});
      inst.model = std::move(m);
      inst.x = gauss_tensor({B, D}, rng, 1.0);
      break;
    }
    case 1: {  // conv -> relu -> pool -> flatten -> dense
      const size_t C = 1 + rng.uniform_int(2), S = 6;
      const size_t Co = 2 + rng.uniform_int(2);
      Model<double> m({C, S, S}, K, seed);
      m.append(Conv2d<double>{"conv", gauss_tensor({Co, C, 3, 3}, rng, 0.5),
                              gauss_tensor({Co}, rng, 0.1), 1, 1});
      m.append(Relu{});
      m.append(MaxPool{2, 2});
      m.append(Flatten{});
      const size_t flat = Co * (S / 2) * (S / 2);
      m.append(Dense<double>{"fc", gauss_tensor({flat, K}, rng, 0.4),
                             gauss_tensor({K}, rng, 0.1)});
      inst.model = std::move(m);
      inst.x = gauss_tensor({B, C, S, S}, rng, 1.0);
      break;
    }
    case 2: {  // pnil -> conv -> relu -> flatten -> dense
      const size_t C = 1, S = 5, Co = 3;
      Model<double> m({C, S, S}, K, seed);
      m.append(Pnil<double>{"pnil", gauss_tensor({C, S, S}, rng, 0.4),
                            gauss_tensor({C, S, S}, rng, 0.4)});
      m.append(Conv2d<double>{"conv", gauss_tensor({Co, C, 3, 3}, rng, 0.5),
                              gauss_tensor({Co}, rng, 0.1), 1, 0});
      m.append(Relu{});
      m.append(Flatten{});
      const size_t flat = Co * (S - 2) * (S - 2);
      m.append(Dense<double>{"fc", gauss_tensor({flat, K}, rng, 0.4),
                             gauss_tensor({K}, rng, 0.1)});
      inst.model = std::move(m);
      inst.x = gauss_tensor({B, C, S, S}, rng, 1.0);
      inst.pnil_noise = gauss_tensor({B, C, S, S}, rng, 1.0);
      break;
    }
    default: {  // stem conv -> residual block (projected) -> gap -> dense
      const size_t C = 2, S = 4;
      Model<double> m({C, S, S}, K, seed);
      m.append(Conv2d<double>{"stem", gauss_tensor({3, C, 3, 3}, rng, 0.4),
                              gauss_tensor({3}, rng, 0.1), 1, 1});
      m.append(Relu{});
      ResBlock<double> rb{
          Conv2d<double>{"b.conv1", gauss_tensor({4, 3, 3, 3}, rng, 0.3),
                         gauss_tensor({4}, rng, 0.1), 2, 1},
          Conv2d<double>{"b.conv2", gauss_tensor({4, 4, 3, 3}, rng, 0.3),
                         gauss_tensor({4}, rng, 0.1), 1, 1},
          Conv2d<double>{"b.proj", gauss_tensor({4, 3, 1, 1}, rng, 0.4),
                         gauss_tensor({4}, rng, 0.1), 2, 0}};
      m.append(std::move(rb));
      m.append(GlobalAvgPool{});
      m.append(Dense<double>{"fc", gauss_tensor({4, K}, rng, 0.5),
                             gauss_tensor({K}, rng, 0.1)});
      inst.model = std::move(m);
      inst.x = gauss_tensor({B, C, S, S}, rng, 1.0);
      break;
    }
  }
  std::vector<int> labels(B);
  for (size_t i = 0; i < B; ++i) labels[i] = static_cast<int>(rng.uniform_int(K));
  inst.y = Tensor<double>({B, K});
  for (size_t i = 0; i < B; ++i) inst.y[i * K + labels[i]] = 1.0;
  return inst;
}

double loss_of(const Model<double>& model, const Tensor<double>& x,
               const Tensor<double>& y, const Tensor<double>& frozen) {
  Tape<double> tape;
  tape.set_grad_enabled(false);
  NoiseSource<double> noise;
  if (frozen.size() > 0) noise.frozen = &frozen;
  auto fwd = model.forward(tape, tape.leaf(x), noise, false);
  auto loss = ops::softmax_cross_entropy(tape, fwd.logits, y);
  return tape.value(loss)[0];
}

// Central differences at h resolve a gradient coordinate only when it is
// either below the zero floor or comfortably above the subtraction roundoff
// (~eps*|f|/h, about 2.5e-10 here). Draws with coordinates inside that dead
// band cannot be judged by the oracle and are re-sampled.
bool gradients_resolvable(const Tensor<double>& g) {
  for (size_t i = 0; i < g.size(); ++i) {
    const double a = std::abs(g[i]);
    if (a > 1e-9 && a < 3e-6) return false;
  }
  return true;
}

// Finite differences step both ways by h; any ReLU preactivation or pooling
// tie within reach of that step would corrupt the numeric gradient, so such
// draws are re-sampled.
bool well_conditioned(Tape<double>& tape, Var<double> loss, double margin) {
  for (int32_t id = 0; id <= loss.id; ++id) {
    Var<double> v{id};
    const char* op = tape.op_name(v);
    if (std::string_view(op) == "relu") {
      for (Var<double> in : tape.op_inputs(v)) {
        const Tensor<double>& z = tape.value(in);
        for (size_t i = 0; i < z.size(); ++i)
          if (std::abs(z[i]) < margin) return false;
      }
    } else if (std::string_view(op) == "max_pool2d") {
      // suite nets only use 2x2 stride-2 windows
      for (Var<double> in : tape.op_inputs(v)) {
        const Tensor<double>& z = tape.value(in);
        const auto& s = z.shape();
        const size_t H = s[2], W = s[3];
        for (size_t nc = 0; nc < s[0] * s[1]; ++nc)
          for (size_t ho = 0; ho + 1 < H; ho += 2) {
            for (size_t wo = 0; wo + 1 < W; wo += 2) {
              const double* p = z.data() + nc * H * W;
              double vals[4] = {p[ho * W + wo], p[ho * W + wo + 1],
                                p[(ho + 1) * W + wo], p[(ho + 1) * W + wo + 1]};
              std::sort(vals, vals + 4);
              if (vals[3] - vals[2] < margin) return false;
            }
          }
      }
    }
  }
  return true;
}

void check_instance(const Instance& inst, const GradSuiteConfig& cfg,
                    GradCheckReport& report) {
  NoiseSource<double> noise;
  if (inst.pnil_noise.size() > 0) noise.frozen = &inst.pnil_noise;

  Tape<double> tape;
  Var<double> xv = tape.leaf(inst.x, true);
  auto fwd = inst.model.forward(tape, xv, noise, true);
  Var<double> loss = ops::softmax_cross_entropy(tape, fwd.logits, inst.y);
  tape.backward(loss);

  // input gradient
  compare_grads(report, "input", *tape.grad(xv),
                finite_diff_grad(
                    [&](const Tensor<double>& probe) {
                      return loss_of(inst.model, probe, inst.y, inst.pnil_noise);
                    },
                    inst.x, cfg.h),
                cfg.tol);

  // every parameter tensor
  Model<double> probe_model = inst.model;
  auto probe_params = probe_model.params();
  for (size_t k = 0; k < probe_params.size(); ++k) {
    const Tensor<double> original = *probe_params[k].second;
    Tensor<double> numeric = finite_diff_grad(
        [&](const Tensor<double>& t) {
          *probe_params[k].second = t;
          return loss_of(probe_model, inst.x, inst.y, inst.pnil_noise);
        },
        original, cfg.h);
    *probe_params[k].second = original;
    const Tensor<double>* analytic = tape.grad(fwd.params[k].second);
    if (!analytic) throw std::logic_error("gradcheck: missing analytic gradient");
    compare_grads(report, probe_params[k].first, *analytic, numeric, cfg.tol);
  }
}

// Fixture with a broken relu rule: forward is fine, backward ignores the
// gate. The suite must flag it.
void check_faulty_relu(uint64_t seed, const GradSuiteConfig& cfg,
                       GradCheckReport& report) {
  Rng rng(seed);
  const size_t B = 2, D = 6, Hn = 5, K = 3;
  Tensor<double> x = gauss_tensor({B, D}, rng, 1.0);
  Tensor<double> w1 = gauss_tensor({D, Hn}, rng, 0.8);
  Tensor<double> w2 = gauss_tensor({Hn, K}, rng, 0.8);
  Tensor<double> y({B, K});
  y[0 * K + 0] = 1;
  y[1 * K + 2] = 1;

  auto bad_relu = [](Tape<double>& t, Var<double> a) {
    const Tensor<double>& va = t.value(a);
    Tensor<double> out(va.shape());
    for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] > 0 ? va[i] : 0;
    return t.record("bad_relu", std::move(out), {a},
                    [a](Tape<double>& tp, const Tensor<double>& g,
                        const Tensor<double>&) {
                      tp.accumulate(a, g);  // wrong: no gating
                    });
  };

  auto eval = [&](const Tensor<double>& w1v, Tape<double>* grad_tape,
                  Var<double>* w1_var) {
    Tape<double> local;
    Tape<double>& tape = grad_tape ? *grad_tape : local;
    auto xv = tape.leaf(x);
    auto w1l = tape.leaf(w1v, true);
    auto w2l = tape.leaf(w2, true);
    auto h = bad_relu(tape, ops::matmul(tape, xv, w1l));
    auto loss = ops::softmax_cross_entropy(tape, ops::matmul(tape, h, w2l), y);
    if (grad_tape) {
      *w1_var = w1l;
      tape.backward(loss);
    }
    return tape.value(loss)[0];
  };

  Tape<double> tape;
  Var<double> w1v;
  eval(w1, &tape, &w1v);
  Tensor<double> numeric = finite_diff_grad(
      [&](const Tensor<double>& probe) { return eval(probe, nullptr, nullptr); },
      w1, cfg.h);
  compare_grads(report, "faulty.w1", *tape.grad(w1v), numeric, cfg.tol);
}

}  // namespace

GradSuiteResult run_gradcheck_suite(const GradSuiteConfig& cfg) {
  GradSuiteResult result;
  if (cfg.fault == GradFault::relu_backward) {
    GradCheckReport report;
    check_faulty_relu(derive_seed(cfg.seed, "fault"), cfg, report);
    result.networks_checked = 1;
    result.coords_checked = report.coords_checked;
    result.max_rel_err = report.max_rel_err;
    result.failures = std::move(report.failures);
    return result;
  }
  for (int net = 0; net < cfg.networks; ++net) {
    const int arch = net % 4;
    Instance inst;
    bool found = false;
    for (uint64_t salt = 0; salt < 64 && !found; ++salt) {
      inst = build_instance(derive_seed(cfg.seed, "net", net, salt), arch);
      if (inst.model.param_count() > 500)
        throw std::logic_error("gradcheck: instance exceeds parameter budget");
      NoiseSource<double> noise;
      if (inst.pnil_noise.size() > 0) noise.frozen = &inst.pnil_noise;
      Tape<double> tape;
      Var<double> xv = tape.leaf(inst.x, true);
      auto fwd = inst.model.forward(tape, xv, noise, true);
      Var<double> loss = ops::softmax_cross_entropy(tape, fwd.logits, inst.y);
      found = well_conditioned(tape, loss, 100 * cfg.h);
      if (found) {
        tape.backward(loss);
        found = gradients_resolvable(*tape.grad(xv));
        for (const auto& [name, var] : fwd.params)
          found = found && gradients_resolvable(*tape.grad(var));
      }
    }
    if (!found) throw std::logic_error("gradcheck: no well-conditioned draw found");
    GradCheckReport report;
    check_instance(inst, cfg, report);
    ++result.networks_checked;
    result.coords_checked += report.coords_checked;
    result.max_rel_err = std::max(result.max_rel_err, report.max_rel_err);
    for (auto& f : report.failures) {
      f.tensor = "net" + std::to_string(net) + "." + f.tensor;
      if (result.failures.size() < 32) result.failures.push_back(f);
    }
    if (cfg.verbose)
      std::printf("net %3d (arch %d): %zu coords, max rel err %.3g\n", net, arch,
                  report.coords_checked, report.max_rel_err);
  }
  return result;
}

}  // namespace advkit
