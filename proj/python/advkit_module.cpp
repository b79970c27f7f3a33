// Python bindings for the main operations: model building, the noise
// injection layer, attacks, training, evaluation and the statistics helpers.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "advkit/attacks.hpp"
#include "advkit/checkpoint.hpp"
#include "advkit/data_io.hpp"
#include "advkit/gradcheck.hpp"
#include "advkit/model.hpp"
#include "advkit/parallel.hpp"
#include "advkit/stats.hpp"
#include "advkit/training.hpp"

namespace py = pybind11;
using namespace advkit;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<float> tensor_from(const FloatArray& arr) {
  std::vector<size_t> shape(arr.ndim());
  for (py::ssize_t d = 0; d < arr.ndim(); ++d)
    shape[d] = static_cast<size_t>(arr.shape(d));
  std::vector<float> data(arr.data(), arr.data() + arr.size());
  return Tensor<float>(std::move(shape), std::move(data));
}

py::array_t<float> array_from(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

Dataset dataset_from(const FloatArray& images, const std::vector<int>& labels,
                     size_t classes) {
  Dataset d;
  d.images = tensor_from(images);
  if (d.images.rank() != 4)
    throw std::invalid_argument("images must have shape (N,C,H,W)");
  if (d.images.dim(0) != labels.size())
    throw std::invalid_argument("images and labels disagree on sample count");
  d.labels = labels;
  d.classes = classes;
  return d;
}

AttackConfig attack_config_from_kwargs(const std::string& kind, double eps,
                                       const py::kwargs& kw) {
  AttackConfig cfg;
  cfg.kind = attack_kind_from_string(kind);
  cfg.eps = static_cast<float>(eps);
  if (kw.contains("alpha")) cfg.alpha = kw["alpha"].cast<float>();
  if (kw.contains("steps")) cfg.steps = kw["steps"].cast<int>();
  if (kw.contains("eot_L")) cfg.eot_L = kw["eot_L"].cast<int>();
  if (kw.contains("spsa_samples")) cfg.spsa_samples = kw["spsa_samples"].cast<int>();
  if (kw.contains("spsa_delta")) cfg.spsa_delta = kw["spsa_delta"].cast<float>();
  if (kw.contains("spsa_lr")) cfg.spsa_lr = kw["spsa_lr"].cast<float>();
  if (kw.contains("rand_step")) cfg.rand_step = kw["rand_step"].cast<float>();
  if (kw.contains("random_start"))
    cfg.pgd_random_start = kw["random_start"].cast<bool>();
  if (kw.contains("clip")) cfg.clip = kw["clip"].cast<bool>();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(advkit, m) {
  m.doc() = "adversarial training toolkit: noise-injection defenses, one-step "
            "adversarial training and a gradient-based/gradient-free attack suite";
  m.attr("__version__") = "1.0.0";

  py::class_<Model<float>>(m, "Model")
      .def_property_readonly("param_count", &Model<float>::param_count)
      .def_property_readonly("has_pnil", &Model<float>::has_pnil)
      .def_property_readonly("num_classes", &Model<float>::num_classes)
      .def("logits",
           [](const Model<float>& self, const FloatArray& x, uint64_t seed) {
             Tensor<float> xt = tensor_from(x);
             NoiseSource<float> noise;
             std::vector<Rng> rngs;
             if (self.has_pnil()) {
               rngs = make_sample_rngs(seed, "predict", 0, xt.dim(0), 0);
               noise.rngs = rngs;
             }
             return array_from(self.logits(xt, noise));
           },
           py::arg("x"), py::arg("seed") = 1)
      .def("predict",
           [](const Model<float>& self, const FloatArray& x, uint64_t seed) {
             Tensor<float> xt = tensor_from(x);
             NoiseSource<float> noise;
             std::vector<Rng> rngs;
             if (self.has_pnil()) {
               rngs = make_sample_rngs(seed, "predict", 0, xt.dim(0), 0);
               noise.rngs = rngs;
             }
             return self.predict(xt, noise);
           },
           py::arg("x"), py::arg("seed") = 1)
      .def("save",
           [](const Model<float>& self, const std::string& path) {
             save_checkpoint(path, self, {});
           })
      .def("load",
           [](Model<float>& self, const std::string& path) {
             load_checkpoint(path, self);
           })
      .def("parameters", [](Model<float>& self) {
        py::dict out;
        for (const auto& [name, t] : self.params())
          out[py::str(name)] = array_from(*t);
        return out;
      });

  m.def(
      "build_small_cnn",
      [](std::vector<size_t> in_shape, size_t classes, bool pnil, uint64_t seed,
         size_t conv1, size_t conv2, float pnil_w, float pnil_b) {
        SmallCnnConfig cfg;
        cfg.with_pnil = pnil;
        cfg.conv1_channels = conv1;
        cfg.conv2_channels = conv2;
        cfg.pnil = {pnil_w, pnil_b};
        return build_small_cnn<float>(std::move(in_shape), classes, cfg, seed);
      },
      py::arg("in_shape"), py::arg("num_classes") = 10, py::arg("pnil") = false,
      py::arg("seed") = 1, py::arg("conv1_channels") = 16,
      py::arg("conv2_channels") = 32, py::arg("pnil_w_init") = 0.0f,
      py::arg("pnil_b_init") = -3.0f);

  m.def(
      "build_resnet11",
      [](std::vector<size_t> in_shape, size_t classes, bool pnil, uint64_t seed) {
        Resnet11Config cfg;
        cfg.with_pnil = pnil;
        return build_resnet11<float>(std::move(in_shape), classes, cfg, seed);
      },
      py::arg("in_shape"), py::arg("num_classes") = 10, py::arg("pnil") = false,
      py::arg("seed") = 1);

  // the noise injection layer as a standalone operation
  m.def(
      "pnil_forward",
      [](const FloatArray& x, const FloatArray& w, const FloatArray& b,
         uint64_t seed, float log_std_clamp) {
        Tensor<float> xt = tensor_from(x);
        Tape<float> tape;
        auto xv = tape.leaf(xt);
        auto wv = tape.leaf(tensor_from(w));
        auto bv = tape.leaf(tensor_from(b));
        std::vector<Rng> rngs = make_sample_rngs(seed, "pnil", 0, xt.dim(0), 0);
        Tensor<float> noise = draw_noise<float>(xt.shape(), rngs);
        auto out = pnil_forward(tape, xv, wv, bv, noise, log_std_clamp);
        return py::make_tuple(array_from(tape.value(out.x_out)),
                              array_from(tape.value(out.sigma)));
      },
      py::arg("x"), py::arg("w"), py::arg("b"), py::arg("seed") = 1,
      py::arg("log_std_clamp") = 10.0f);

  m.def(
      "run_attack",
      [](const Model<float>& model, const FloatArray& x,
         const std::vector<int>& labels, const std::string& kind, double eps,
         uint64_t seed, const py::kwargs& kw) {
        Tensor<float> xt = tensor_from(x);
        AttackConfig cfg = attack_config_from_kwargs(kind, eps, kw);
        ModelTarget target(model);
        AdvBatch adv = run_attack(target, xt, one_hot(labels, model.num_classes()),
                                  cfg, seed);
        py::dict out;
        out["x_adv"] = array_from(adv.x_adv);
        out["delta"] = array_from(adv.delta);
        out["success"] = adv.success;
        return out;
      },
      py::arg("model"), py::arg("x"), py::arg("labels"), py::arg("kind"),
      py::arg("eps"), py::arg("seed") = 1);

  m.def(
      "adversarial_train",
      [](Model<float>& model, const FloatArray& images,
         const std::vector<int>& labels, const FloatArray& val_images,
         const std::vector<int>& val_labels, const std::string& attack,
         double eps, int epochs, int batch_size, double lr_lo, double lr_hi,
         uint64_t seed) {
        Dataset train = dataset_from(images, labels, model.num_classes());
        Dataset val = dataset_from(val_images, val_labels, model.num_classes());
        TrainConfig cfg;
        cfg.attack.kind = attack_kind_from_string(attack);
        cfg.attack.eps = static_cast<float>(eps);
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.lr_lo = static_cast<float>(lr_lo);
        cfg.lr_hi = static_cast<float>(lr_hi);
        cfg.seed = seed;
        cfg.val_subset = 0;
        TrainResult res = adversarial_train(model, train, val, cfg);
        py::list log;
        for (const auto& row : res.log) {
          py::dict d;
          d["epoch"] = row.epoch;
          d["train_loss"] = row.train_loss;
          d["clean_val_acc"] = row.clean_val_acc;
          d["adv_val_loss"] = row.adv_val_loss;
          log.append(d);
        }
        return log;
      },
      py::arg("model"), py::arg("images"), py::arg("labels"),
      py::arg("val_images"), py::arg("val_labels"), py::arg("attack") = "nfgsm",
      py::arg("eps") = 8.0 / 255.0, py::arg("epochs") = 10,
      py::arg("batch_size") = 100, py::arg("lr_lo") = 1e-3,
      py::arg("lr_hi") = 6e-3, py::arg("seed") = 1);

  m.def(
      "evaluate_robustness",
      [](const Model<float>& model, const FloatArray& images,
         const std::vector<int>& labels, double eps, int pgd_steps, int eot_L,
         size_t spsa_subset, int spsa_steps, int spsa_samples, uint64_t seed) {
        Dataset test = dataset_from(images, labels, model.num_classes());
        EvalConfig cfg;
        cfg.eps = static_cast<float>(eps);
        cfg.pgd_steps = pgd_steps;
        cfg.eot_L = eot_L;
        cfg.spsa_subset = spsa_subset;
        cfg.spsa_steps = spsa_steps;
        cfg.spsa_samples = spsa_samples;
        cfg.seed = seed;
        EvalReport rep = evaluate_robustness(model, test, cfg);
        py::dict out;
        for (const auto& row : rep.rows) out[py::str(row.name)] = row.accuracy;
        out["min"] = rep.effective_robustness;
        out["obfuscation_flag"] = rep.obfuscation_flag;
        return out;
      },
      py::arg("model"), py::arg("images"), py::arg("labels"),
      py::arg("eps") = 8.0 / 255.0, py::arg("pgd_steps") = 50,
      py::arg("eot_L") = 100, py::arg("spsa_subset") = 1000,
      py::arg("spsa_steps") = 100, py::arg("spsa_samples") = 2048,
      py::arg("seed") = 1);

  m.def(
      "corrected_resampled_ttest",
      [](const std::vector<double>& diffs, double ratio, double alpha) {
        TTestResult r = corrected_resampled_ttest(diffs, ratio, alpha);
        py::dict out;
        out["t"] = r.t;
        out["p"] = r.p;
        out["mean_diff"] = r.mean_diff;
        out["var_diff"] = r.var_diff;
        out["n"] = r.n;
        out["significant"] = r.significant;
        out["degenerate"] = r.degenerate;
        return out;
      },
      py::arg("diffs"), py::arg("ratio") = 1.0, py::arg("alpha") = 0.003);

  m.def("student_t_cdf", &student_t_cdf, py::arg("t"), py::arg("dof"));
  m.def("cyclical_lr", &cyclical_lr, py::arg("iteration"), py::arg("lo"),
        py::arg("hi"), py::arg("cycle_len"));

  m.def(
      "synth_digits",
      [](size_t n, uint64_t seed) {
        Dataset d = synth_digits(n, seed, "train");
        return py::make_tuple(array_from(d.images), d.labels);
      },
      py::arg("n"), py::arg("seed") = 1);

  m.def(
      "load_idx",
      [](const std::string& images, const std::string& labels) {
        Dataset d = load_idx(images, labels);
        return py::make_tuple(array_from(d.images), d.labels);
      },
      py::arg("images_path"), py::arg("labels_path"));

  m.def(
      "gradcheck",
      [](int networks, uint64_t seed) {
        GradSuiteConfig cfg;
        cfg.networks = networks;
        cfg.seed = seed;
        GradSuiteResult res = run_gradcheck_suite(cfg);
        py::dict out;
        out["ok"] = res.ok();
        out["networks"] = res.networks_checked;
        out["coords"] = res.coords_checked;
        out["max_rel_err"] = res.max_rel_err;
        return out;
      },
      py::arg("networks") = 20, py::arg("seed") = 20240);

  m.def("set_workers", &set_workers, py::arg("n"));
}
