#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "advkit/checkpoint.hpp"
#include "advkit/gradcheck.hpp"
#include "advkit/model.hpp"

using namespace advkit;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "advkit_model_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("pnil with large negative bias is a pass-through") {
  // W=0, B=-40: exp(sigma/2) ~ 2e-9, noise contributes below f32 epsilon
  Tape<float> tape;
  Tensor<float> x({2, 1, 2, 2}, {0.1f, 0.4f, 0.9f, 0.3f, 0.5f, 0.2f, 0.8f, 0.6f});
  Tensor<float> noise({2, 1, 2, 2});
  Rng rng(3);
  for (size_t i = 0; i < noise.size(); ++i) noise[i] = static_cast<float>(rng.gauss());
  auto xv = tape.leaf(x);
  auto w = tape.leaf(Tensor<float>::zeros({1, 2, 2}));
  auto b = tape.leaf(Tensor<float>::full({1, 2, 2}, -40.0f));
  auto out = pnil_forward(tape, xv, w, b, noise, 10.0f);
  for (size_t i = 0; i < x.size(); ++i)
    CHECK(tape.value(out.x_out)[i] == doctest::Approx(x[i]).epsilon(1e-6));
}

TEST_CASE("pnil with zero params injects unit noise") {
  // W=0, B=0: x' - x is standard normal; empirical std over 1e6 draws
  const size_t n = 1'000'000;
  Tape<float> tape;
  Tensor<float> x({1, 1, 1, n});
  Tensor<float> noise({1, 1, 1, n});
  Rng rng(77);
  for (size_t i = 0; i < n; ++i) noise[i] = static_cast<float>(rng.gauss());
  auto out = pnil_forward(tape, tape.leaf(x), tape.leaf(Tensor<float>::zeros({1, 1, n})),
                          tape.leaf(Tensor<float>::zeros({1, 1, n})), noise, 10.0f);
  double sum = 0, sum2 = 0;
  const Tensor<float>& xo = tape.value(out.x_out);
  for (size_t i = 0; i < n; ++i) {
    const double d = xo[i] - x[i];
    sum += d;
    sum2 += d * d;
  }
  const double mean = sum / n;
  const double std = std::sqrt(sum2 / n - mean * mean);
  CHECK(std > 0.995);
  CHECK(std < 1.005);
}

TEST_CASE("pnil scalar feature matches the seeded oracle exactly") {
  // x=0.5, W=2, B=-1: sigma = 0, x' = 0.5 + gauss(seed)
  const uint64_t seed = 99123;
  std::vector<Rng> rngs{Rng(seed)};
  Tape<float> tape;
  auto xv = tape.leaf(Tensor<float>({1, 1, 1, 1}, {0.5f}));
  auto w = tape.leaf(Tensor<float>({1, 1, 1}, {2.0f}));
  auto b = tape.leaf(Tensor<float>({1, 1, 1}, {-1.0f}));
  Tensor<float> noise = draw_noise<float>({1, 1, 1, 1}, rngs);
  auto out = pnil_forward(tape, xv, w, b, noise, 10.0f);
  CHECK(tape.value(out.sigma)[0] == 0.0f);
  const float expected = 0.5f + static_cast<float>(Rng(seed).gauss());
  CHECK(tape.value(out.x_out)[0] == expected);
}

TEST_CASE("pnil gradient matches the closed form and finite differences") {
  // loss = sum(x'): dL/dw_j = n_j * exp(sigma_j/2)/2 * x_j
  Rng rng(8);
  Tensor<double> x({1, 1, 2, 2}, {0.3, -0.7, 1.1, 0.5});
  Tensor<double> w({1, 2, 2}, {0.2, -0.4, 0.1, 0.7});
  Tensor<double> b({1, 2, 2}, {-1.0, -0.5, -2.0, 0.3});
  Tensor<double> noise({1, 1, 2, 2});
  for (size_t i = 0; i < 4; ++i) noise[i] = rng.gauss();

  Tape<double> tape;
  auto xv = tape.leaf(x, true);
  auto wv = tape.leaf(w, true);
  auto bv = tape.leaf(b, true);
  auto out = pnil_forward(tape, xv, wv, bv, noise, 10.0);
  auto loss = ops::sum_all(tape, out.x_out);
  tape.backward(loss);

  const Tensor<double>& gw = *tape.grad(wv);
  for (size_t j = 0; j < 4; ++j) {
    const double sigma = x[j] * w[j] + b[j];
    const double expected = noise[j] * std::exp(sigma / 2) * 0.5 * x[j];
    CHECK(gw[j] == doctest::Approx(expected).epsilon(1e-12));
  }

  GradCheckReport report;
  auto eval = [&](const Tensor<double>& wprobe) {
    Tape<double> t;
    auto o = pnil_forward(t, t.leaf(x), t.leaf(wprobe), t.leaf(b), noise, 10.0);
    auto l = ops::sum_all(t, o.x_out);
    return t.value(l)[0];
  };
  compare_grads(report, "pnil.w", gw, finite_diff_grad(eval, w, 1e-6), 1e-6);
  CHECK(report.ok());
}

TEST_CASE("pnil is stochastic across seeds and reproducible per seed") {
  Model<float> m = build_small_cnn<float>({1, 8, 8}, 10,
                                          {.conv1_channels = 4, .conv2_channels = 4,
                                           .with_pnil = true},
                                          7);
  m.set_mode(Mode::eval);
  Tensor<float> x({2, 1, 8, 8});
  Rng rng(5);
  for (size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform());

  auto run = [&](uint64_t seed) {
    std::vector<Rng> rngs = make_sample_rngs(seed, "predict", 0, 2, 0);
    NoiseSource<float> noise;
    noise.rngs = rngs;
    return m.logits(x, noise);
  };
  Tensor<float> a = run(1), b = run(1), c = run(2);
  bool same_ab = true, same_ac = true;
  for (size_t i = 0; i < a.size(); ++i) {
    same_ab = same_ab && a[i] == b[i];
    same_ac = same_ac && a[i] == c[i];
  }
  CHECK(same_ab);
  CHECK_FALSE(same_ac);
}

TEST_CASE("small cnn shapes and parameter registry") {
  Model<float> plain = build_small_cnn<float>({1, 28, 28}, 10, {}, 1);
  Tensor<float> x({3, 1, 28, 28});
  Tensor<float> z = plain.logits(x, {});
  CHECK(z.shape() == std::vector<size_t>{3, 10});

  // parameter count, by hand:
  //   conv1 16*1*3*3+16, conv2 32*16*3*3+32, fc 32*7*7*10+10
  const size_t expected = (16 * 1 * 3 * 3 + 16) + (32 * 16 * 3 * 3 + 32) +
                          (32 * 7 * 7 * 10 + 10);
  CHECK(plain.param_count() == expected);

  SmallCnnConfig cfg;
  cfg.with_pnil = true;
  Model<float> with_pnil = build_small_cnn<float>({1, 28, 28}, 10, cfg, 1);
  CHECK(with_pnil.param_count() == expected + 2 * 1 * 28 * 28);
  bool saw_w = false, saw_b = false;
  for (const auto& [name, t] : with_pnil.params()) {
    if (name == "pnil.w") {
      saw_w = true;
      CHECK(t->shape() == std::vector<size_t>{1, 28, 28});
    }
    if (name == "pnil.b") {
      saw_b = true;
      CHECK(t->shape() == std::vector<size_t>{1, 28, 28});
    }
  }
  CHECK(saw_w);
  CHECK(saw_b);
  CHECK(with_pnil.has_pnil());
  CHECK_FALSE(plain.has_pnil());
}

TEST_CASE("resnet11 shapes") {
  Model<float> m = build_resnet11<float>({3, 32, 32}, 10, {}, 3);
  Tensor<float> x({2, 3, 32, 32});
  Tensor<float> z = m.logits(x, {});
  CHECK(z.shape() == std::vector<size_t>{2, 10});
  // 11 weighted layers: stem + 5 blocks x 2 convs (projections and the dense
  // head not counted)
  size_t convs = 0;
  for (const auto& [name, t] : m.params())
    if (t->rank() == 4 && name.find("proj") == std::string::npos) ++convs;
  CHECK(convs == 11);
}

TEST_CASE("resnet11 gradient check on a down-scaled variant") {
  Resnet11Config cfg;
  cfg.stem_channels = 4;
  cfg.block_channels = {4, 6, 6, 8, 8};
  Model<double> m = build_resnet11<double>({3, 4, 4}, 3, cfg, 11);
  Rng rng(21);
  Tensor<double> x({2, 3, 4, 4});
  for (size_t i = 0; i < x.size(); ++i) x[i] = rng.gauss();
  Tensor<double> y({2, 3});
  y[0 * 3 + 1] = 1;
  y[1 * 3 + 2] = 1;

  Tape<double> tape;
  auto xv = tape.leaf(x, true);
  auto fwd = m.forward(tape, xv, {}, true);
  auto loss = ops::softmax_cross_entropy(tape, fwd.logits, y);
  tape.backward(loss);

  auto loss_of = [&](const Model<double>& model, const Tensor<double>& xx) {
    Tape<double> t;
    t.set_grad_enabled(false);
    auto f = model.forward(t, t.leaf(xx), {}, false);
    return t.value(ops::softmax_cross_entropy(t, f.logits, y))[0];
  };

  GradCheckReport report;
  compare_grads(report, "input", *tape.grad(xv),
                finite_diff_grad([&](const Tensor<double>& probe) {
                  return loss_of(m, probe);
                }, x, 1e-6),
                1e-4);

  Model<double> probe = m;
  auto probe_params = probe.params();
  for (size_t k = 0; k < probe_params.size(); ++k) {
    const Tensor<double> original = *probe_params[k].second;
    Tensor<double> numeric = finite_diff_grad(
        [&](const Tensor<double>& t) {
          *probe_params[k].second = t;
          return loss_of(probe, x);
        },
        original, 1e-6);
    *probe_params[k].second = original;
    compare_grads(report, probe_params[k].first,
                  *tape.grad(fwd.params[k].second), numeric, 1e-4);
  }
  for (const auto& f : report.failures)
    MESSAGE(f.tensor, "[", f.coord, "] analytic=", f.analytic,
            " numeric=", f.numeric);
  CHECK(report.ok());
  CHECK(report.coords_checked == m.param_count() + x.size());
}

TEST_CASE("residual block against composed forward calls") {
  Rng rng(31);
  auto rand_conv = [&](std::string name, size_t ci, size_t co, size_t stride,
                       size_t pad, size_t k) {
    Conv2d<double> c{std::move(name), Tensor<double>({co, ci, k, k}),
                     Tensor<double>({co}), stride, pad};
    for (size_t i = 0; i < c.w.size(); ++i) c.w[i] = 0.3 * rng.gauss();
    for (size_t i = 0; i < c.b.size(); ++i) c.b[i] = 0.1 * rng.gauss();
    return c;
  };
  Conv2d<double> c1 = rand_conv("b.conv1", 3, 5, 2, 1, 3);
  Conv2d<double> c2 = rand_conv("b.conv2", 5, 5, 1, 1, 3);
  Conv2d<double> pr = rand_conv("b.proj", 3, 5, 2, 0, 1);
  Tensor<double> x({2, 3, 6, 6});
  for (size_t i = 0; i < x.size(); ++i) x[i] = rng.gauss();

  Model<double> m({3, 6, 6}, 5, 0);
  m.append(ResBlock<double>{c1, c2, pr});

  Tape<double> t1;
  t1.set_grad_enabled(false);
  auto block_out = m.forward(t1, t1.leaf(x), {}, false).logits;

  // the same block written as raw op calls
  Tape<double> t2;
  auto xv = t2.leaf(x);
  auto apply = [&](const Conv2d<double>& c, Var<double> h) {
    auto z = ops::conv2d(t2, h, t2.leaf(c.w), c.stride, c.pad);
    return ops::add(t2, z, ops::reshape(t2, t2.leaf(c.b), {c.b.size(), 1, 1}));
  };
  auto skip = apply(pr, xv);
  auto z = ops::relu(t2, apply(c1, xv));
  z = apply(c2, z);
  auto manual = ops::relu(t2, ops::add(t2, z, skip));

  const Tensor<double>&a = t1.value(block_out), &b = t2.value(manual);
  REQUIRE(a.shape() == b.shape());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  // zero second conv: the block reduces to relu of the projected skip path
  Conv2d<double> c2z = c2;
  std::fill(c2z.w.data(), c2z.w.data() + c2z.w.size(), 0.0);
  std::fill(c2z.b.data(), c2z.b.data() + c2z.b.size(), 0.0);
  Model<double> mz({3, 6, 6}, 5, 0);
  mz.append(ResBlock<double>{c1, c2z, pr});
  Tape<double> t3;
  t3.set_grad_enabled(false);
  auto zero_out = mz.forward(t3, t3.leaf(x), {}, false).logits;
  Tape<double> t4;
  auto only_skip = [&](Var<double> h) {
    auto zz = ops::conv2d(t4, h, t4.leaf(pr.w), pr.stride, pr.pad);
    return ops::add(t4, zz, ops::reshape(t4, t4.leaf(pr.b), {pr.b.size(), 1, 1}));
  };
  auto expect = ops::relu(t4, only_skip(t4.leaf(x)));
  const Tensor<double>&za = t3.value(zero_out), &zb = t4.value(expect);
  for (size_t i = 0; i < za.size(); ++i) CHECK(za[i] == zb[i]);
}

TEST_CASE("cross entropy analytic values") {
  // uniform logits over 10 classes: loss = ln 10
  Tape<double> tape;
  auto z = tape.leaf(Tensor<double>({2, 10}));
  Tensor<double> y({2, 10});
  y[0 * 10 + 3] = 1;
  y[1 * 10 + 7] = 1;
  auto loss = ops::softmax_cross_entropy(tape, z, y);
  CHECK(tape.value(loss)[0] == doctest::Approx(std::log(10.0)).epsilon(1e-9));

  // saturated correct class
  Tape<double> t2;
  Tensor<double> zs({1, 10});
  zs[0 * 10 + 4] = 50.0;
  Tensor<double> ys({1, 10});
  ys[0 * 10 + 4] = 1;
  auto l2 = ops::softmax_cross_entropy(t2, t2.leaf(zs), ys);
  CHECK(t2.value(l2)[0] >= 0.0);
  CHECK(t2.value(l2)[0] <= 1e-15);
}

TEST_CASE("cross entropy matches a high-precision oracle on random logits") {
  Rng rng(17);
  const size_t B = 4, K = 7;
  Tensor<float> z({B, K});
  for (size_t i = 0; i < z.size(); ++i) z[i] = static_cast<float>(3 * rng.gauss());
  std::vector<int> labels;
  for (size_t b = 0; b < B; ++b) labels.push_back(static_cast<int>(rng.uniform_int(K)));
  Tensor<float> y({B, K});
  for (size_t b = 0; b < B; ++b) y[b * K + labels[b]] = 1;

  Tape<float> tape;
  auto loss = ops::softmax_cross_entropy(tape, tape.leaf(z), y);

  // direct f64 route, no max-subtraction shortcut
  double expect = 0;
  for (size_t b = 0; b < B; ++b) {
    long double denom = 0;
    for (size_t j = 0; j < K; ++j) denom += std::exp(static_cast<long double>(z[b * K + j]));
    expect += static_cast<double>(-std::log(std::exp(static_cast<long double>(
                                               z[b * K + labels[b]])) /
                                           denom));
  }
  expect /= B;
  CHECK(tape.value(loss)[0] == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("cross entropy rejects labels that are not one-hot") {
  Tape<float> tape;
  auto z = tape.leaf(Tensor<float>({1, 3}));
  CHECK_THROWS(ops::softmax_cross_entropy(tape, z, Tensor<float>({1, 3}, {1, 1, 0})));
  CHECK_THROWS(ops::softmax_cross_entropy(tape, z, Tensor<float>({1, 3}, {0.5f, 0.5f, 0})));
  CHECK_THROWS(ops::softmax_cross_entropy(tape, z, Tensor<float>({1, 3}, {0, 0, 0})));
}

TEST_CASE("deterministic model is deterministic in eval mode") {
  Model<float> m = build_small_cnn<float>({1, 8, 8}, 10,
                                          {.conv1_channels = 4, .conv2_channels = 4},
                                          77);
  m.set_mode(Mode::eval);
  Tensor<float> x({2, 1, 8, 8});
  Rng rng(5);
  for (size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform());
  Tensor<float> a = m.logits(x, {}), b = m.logits(x, {});
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("checkpoint round trip and shape errors") {
  Model<float> m = build_small_cnn<float>({1, 8, 8}, 4,
                                          {.conv1_channels = 3, .conv2_channels = 5,
                                           .with_pnil = true},
                                          123);
  const auto path = temp_file("roundtrip.ckpt").string();
  save_checkpoint(path, m, {{"epoch", "7"}, {"adv_val_loss", "0.25"}});

  Model<float> fresh = build_small_cnn<float>({1, 8, 8}, 4,
                                              {.conv1_channels = 3,
                                               .conv2_channels = 5,
                                               .with_pnil = true},
                                              999);
  auto meta = load_checkpoint(path, fresh);
  CHECK(meta.at("epoch") == "7");
  CHECK(meta.at("adv_val_loss") == "0.25");
  auto a = m.params();
  auto b = fresh.params();
  REQUIRE(a.size() == b.size());
  for (size_t k = 0; k < a.size(); ++k) {
    REQUIRE(a[k].second->size() == b[k].second->size());
    for (size_t i = 0; i < a[k].second->size(); ++i)
      CHECK((*a[k].second)[i] == (*b[k].second)[i]);
  }

  Model<float> other = build_small_cnn<float>({1, 10, 10}, 4,
                                              {.conv1_channels = 3,
                                               .conv2_channels = 5,
                                               .with_pnil = true},
                                              999);
  CHECK_THROWS_WITH_AS(load_checkpoint(path, other), doctest::Contains("pnil.w"),
                       std::runtime_error);
}

TEST_CASE("tensor file byte layout") {
  // hand-assembled file: one tensor "t" of shape (2,), values {1.0f, -2.0f},
  // metadata "epoch=3"
  const auto path = temp_file("bytes.ckpt").string();
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    const unsigned char bytes[] = {
        'A', 'F', 'C', 'K',
        1, 0, 0, 0,              // version
        1, 0, 0, 0,              // count
        1, 0, 0, 0, 't',         // name
        1, 0, 0, 0,              // rank
        2, 0, 0, 0, 0, 0, 0, 0,  // extent
        0x00, 0x00, 0x80, 0x3f,  // 1.0f
        0x00, 0x00, 0x00, 0xc0,  // -2.0f
    };
    os.write(reinterpret_cast<const char*>(bytes), sizeof(bytes));
    os << "epoch=3\n";
  }
  TensorFile file = load_tensor_file(path);
  REQUIRE(file.tensors.size() == 1);
  CHECK(file.tensors[0].first == "t");
  CHECK(file.tensors[0].second.shape() == std::vector<size_t>{2});
  CHECK(file.tensors[0].second[0] == 1.0f);
  CHECK(file.tensors[0].second[1] == -2.0f);
  CHECK(file.meta.at("epoch") == "3");

  // writer produces the identical bytes
  TensorFile out;
  out.tensors.emplace_back("t", Tensor<float>({2}, {1.0f, -2.0f}));
  out.meta["epoch"] = "3";
  const auto path2 = temp_file("bytes2.ckpt").string();
  save_tensor_file(path2, out);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);

  CHECK_THROWS(load_tensor_file("/nonexistent/path.ckpt"));
}

TEST_CASE("duplicate parameter names are rejected") {
  Model<float> m({4}, 2, 0);
  m.append(Dense<float>{"fc", Tensor<float>({4, 2}), Tensor<float>({2})});
  m.append(Dense<float>{"fc", Tensor<float>({2, 2}), Tensor<float>({2})});
  CHECK_THROWS_AS(m.params(), std::logic_error);
}
