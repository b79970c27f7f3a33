// advkit: adversarial training and robustness evaluation from the command
// line. Subcommands: train, eval, attack, gradcheck, experiment, lr-find,
// report. Exit codes: 0 success, 1 usage or configuration error, 2 numeric
// failure.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "advkit/attacks.hpp"
#include "advkit/checkpoint.hpp"
#include "advkit/config.hpp"
#include "advkit/data_io.hpp"
#include "advkit/gradcheck.hpp"
#include "advkit/model.hpp"
#include "advkit/parallel.hpp"
#include "advkit/stats.hpp"
#include "advkit/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace advkit;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;

const std::vector<std::string> kKnownKeys = {
    // data
    "dataset", "data_root", "train_subset", "test_subset", "val_subset",
    // model
    "model", "pnil", "pnil_w_init", "pnil_b_init", "conv1_channels",
    "conv2_channels",
    // training
    "seed", "epochs", "batch_size", "lr_lo", "lr_hi", "cycle_len", "patience",
    "val_pgd_steps",
    // training attack
    "attack", "eps", "alpha", "steps", "eot_l", "rand_step", "pgd_random_start",
    "clip", "clip_lo", "clip_hi",
    // evaluation
    "eval_attacks", "pgd_steps", "eval_eot_l", "spsa_subset", "spsa_steps",
    "spsa_samples", "eval_max_samples", "eval_batch",
    // experiment protocol
    "cv_repeats", "ttest_ratio", "ttest_alpha"};

std::string resolve_data_root(const RunConfig& cfg, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (cfg.has("data_root")) return cfg.get_string("data_root", "");
  if (const char* env = std::getenv("ADVKIT_DATA_ROOT")) return env;
  return "data";
}

DataPair load_data(const RunConfig& cfg, const std::string& data_root_flag) {
  const std::string name = cfg.get_string("dataset", "synth");
  DataPair pair = load_named_dataset(name, resolve_data_root(cfg, data_root_flag));
  const auto train_subset = static_cast<size_t>(cfg.get_int("train_subset", 0));
  const auto test_subset = static_cast<size_t>(cfg.get_int("test_subset", 0));
  if (train_subset > 0) pair.train = pair.train.take(train_subset);
  if (test_subset > 0) pair.test = pair.test.take(test_subset);
  return pair;
}

Model<float> build_model(const RunConfig& cfg, const Dataset& train, uint64_t seed) {
  const std::string kind = cfg.get_string("model", "small_cnn");
  const bool pnil = cfg.get_bool("pnil", false);
  PnilInit pnil_init{static_cast<float>(cfg.get_number("pnil_w_init", 0.0)),
                     static_cast<float>(cfg.get_number("pnil_b_init", -3.0))};
  if (kind == "small_cnn") {
    SmallCnnConfig mc;
    mc.conv1_channels = static_cast<size_t>(cfg.get_int("conv1_channels", 16));
    mc.conv2_channels = static_cast<size_t>(cfg.get_int("conv2_channels", 32));
    mc.with_pnil = pnil;
    mc.pnil = pnil_init;
    return build_small_cnn<float>(train.sample_shape(), train.classes, mc, seed);
  }
  if (kind == "resnet11") {
    Resnet11Config mc;
    mc.with_pnil = pnil;
    mc.pnil = pnil_init;
    return build_resnet11<float>(train.sample_shape(), train.classes, mc, seed);
  }
  throw std::runtime_error("unknown model '" + kind + "' (small_cnn, resnet11)");
}

AttackConfig attack_from_config(const RunConfig& cfg) {
  AttackConfig a;
  a.kind = attack_kind_from_string(cfg.get_string("attack", "nfgsm"));
  a.eps = static_cast<float>(cfg.get_number("eps", 8.0 / 255.0));
  a.alpha = static_cast<float>(cfg.get_number("alpha", -1.0));
  a.steps = static_cast<int>(cfg.get_int("steps", -1));
  a.eot_L = static_cast<int>(cfg.get_int("eot_l", 1));
  a.rand_step = static_cast<float>(cfg.get_number("rand_step", -1.0));
  a.pgd_random_start = cfg.get_bool("pgd_random_start", true);
  a.clip = cfg.get_bool("clip", true);
  a.clip_lo = static_cast<float>(cfg.get_number("clip_lo", 0.0));
  a.clip_hi = static_cast<float>(cfg.get_number("clip_hi", 1.0));
  return a;
}

TrainConfig train_from_config(const RunConfig& cfg) {
  TrainConfig t;
  t.epochs = static_cast<int>(cfg.get_int("epochs", 30));
  t.batch_size = static_cast<int>(cfg.get_int("batch_size", 100));
  t.attack = attack_from_config(cfg);
  t.lr_lo = static_cast<float>(cfg.get_number("lr_lo", 1e-3));
  t.lr_hi = static_cast<float>(cfg.get_number("lr_hi", 6e-3));
  t.cycle_len = static_cast<int>(cfg.get_int("cycle_len", -1));
  t.patience = static_cast<int>(cfg.get_int("patience", 10));
  t.val_pgd_steps = static_cast<int>(cfg.get_int("val_pgd_steps", 10));
  t.val_subset = static_cast<int>(cfg.get_int("val_subset", 1000));
  t.seed = static_cast<uint64_t>(cfg.get_int("seed", 1));
  return t;
}

EvalConfig eval_from_config(const RunConfig& cfg) {
  EvalConfig e;
  e.eps = static_cast<float>(cfg.get_number("eps", 8.0 / 255.0));
  e.pgd_steps = static_cast<int>(cfg.get_int("pgd_steps", 50));
  e.eot_L = static_cast<int>(cfg.get_int("eval_eot_l", 100));
  e.spsa_subset = static_cast<size_t>(cfg.get_int("spsa_subset", 1000));
  e.spsa_steps = static_cast<int>(cfg.get_int("spsa_steps", 100));
  e.spsa_samples = static_cast<int>(cfg.get_int("spsa_samples", 2048));
  e.max_samples = static_cast<size_t>(cfg.get_int("eval_max_samples", 0));
  e.batch = static_cast<size_t>(cfg.get_int("eval_batch", 100));
  e.seed = static_cast<uint64_t>(cfg.get_int("seed", 1));
  e.clip_lo = static_cast<float>(cfg.get_number("clip_lo", 0.0));
  e.clip_hi = static_cast<float>(cfg.get_number("clip_hi", 1.0));
  e.attacks.clear();
  std::string list = cfg.get_string("eval_attacks", "pgd,spsa");
  std::istringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "clean") continue;  // clean accuracy is always reported
    e.attacks.push_back(attack_kind_from_string(item));
  }
  return e;
}

json config_snapshot(const RunConfig& cfg) {
  json snap = json::object();
  for (const auto& [k, v] : cfg.entries()) snap[k] = v;
  return snap;
}

RunConfig config_from_snapshot(const json& snap) {
  RunConfig cfg;
  for (auto it = snap.begin(); it != snap.end(); ++it)
    cfg.set(it.key(), it.value().get<std::string>());
  return cfg;
}

void write_manifest(const fs::path& path, const std::string& command,
                    const std::string& config_path, const RunConfig& cfg,
                    int workers, const json& artifacts) {
  json m;
  m["command"] = command;
  m["config_path"] = config_path;
  m["seed"] = cfg.get_int("seed", 1);
  m["workers"] = workers;
  m["config"] = config_snapshot(cfg);
  m["artifacts"] = artifacts;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << m.dump(2) << "\n";
}

void write_train_log(const fs::path& path, const TrainResult& result) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,train_loss,clean_val_acc,adv_val_loss,lr\n";
  char buf[160];
  for (const auto& row : result.log) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.4f,%.6f,%.8f\n", row.epoch,
                  row.train_loss, row.clean_val_acc, row.adv_val_loss, row.lr);
    os << buf;
  }
}

// ---- train ---------------------------------------------------------------

int run_train(const RunConfig& cfg, const std::string& config_path,
              const std::string& out_dir, const std::string& data_root,
              int workers, bool verbose) {
  cfg.validate_keys(kKnownKeys);
  fs::create_directories(out_dir);
  DataPair data = load_data(cfg, data_root);
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("seed", 1));
  Model<float> model = build_model(cfg, data.train, derive_seed(seed, "model"));

  TrainConfig tc = train_from_config(cfg);
  tc.checkpoint_dir = (fs::path(out_dir) / "checkpoints").string();
  tc.verbose = verbose;

  std::fprintf(stderr, "training %s on %s (%zu train / %zu val samples)\n",
               cfg.get_string("model", "small_cnn").c_str(),
               data.train.name.c_str(), data.train.size(), data.test.size());
  TrainResult result = adversarial_train(model, data.train, data.test, tc);
  write_train_log(fs::path(out_dir) / "train_log.csv", result);

  json artifacts;
  artifacts["checkpoint_dir"] = tc.checkpoint_dir;
  artifacts["best_checkpoint"] = (fs::path(tc.checkpoint_dir) / "best.ckpt").string();
  artifacts["train_log"] = (fs::path(out_dir) / "train_log.csv").string();
  json ckpts = json::array();
  for (const auto& rec : result.checkpoints) ckpts.push_back(rec.path);
  artifacts["epoch_checkpoints"] = ckpts;
  write_manifest(fs::path(out_dir) / "manifest.json", "train", config_path, cfg,
                 workers, artifacts);
  if (result.best_epoch >= 0)
    std::fprintf(stderr, "best epoch %d (adversarial validation loss %.4f)\n",
                 result.best_epoch,
                 result.checkpoints[result.best_epoch].adv_val_loss);
  return 0;
}

// ---- eval ------------------------------------------------------------------

int run_eval(const RunConfig& cfg, const std::string& config_path,
             const std::string& checkpoint, const std::string& out_dir,
             const std::string& data_root, int workers,
             const std::string& sweep_arg, const std::string& eot_curve_arg) {
  cfg.validate_keys(kKnownKeys);
  fs::create_directories(out_dir);
  DataPair data = load_data(cfg, data_root);
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("seed", 1));
  Model<float> model = build_model(cfg, data.train, derive_seed(seed, "model"));
  if (!checkpoint.empty()) load_checkpoint(checkpoint, model);

  EvalConfig ec = eval_from_config(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport report = evaluate_robustness(model, data.test, ec);
  report.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path report_csv = fs::path(out_dir) / "report.csv";
  write_report_csv(report_csv.string(), report);
  const std::string table =
      format_report_table(data.test.name + " @ eps " +
                              std::to_string(ec.eps) + " (eot_L " +
                              std::to_string(ec.eot_L) + ")",
                          report);
  {
    std::ofstream os(fs::path(out_dir) / "report.txt");
    os << table;
  }
  std::cout << table;
  std::fprintf(stderr, "evaluation took %.1fs\n", report.runtime_seconds);

  json artifacts;
  artifacts["report_csv"] = report_csv.string();
  artifacts["report_txt"] = (fs::path(out_dir) / "report.txt").string();

  auto parse_list = [](const std::string& arg) {
    std::vector<double> out;
    std::istringstream ss(arg);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(parse_rational(item));
    return out;
  };
  if (!sweep_arg.empty()) {
    Dataset subset = ec.max_samples > 0 && ec.max_samples < data.test.size()
                         ? data.test.take(ec.max_samples)
                         : data.test;
    auto curve = perturbation_sweep(model, subset, ec, parse_list(sweep_arg));
    const fs::path p = fs::path(out_dir) / "perturbation_sweep.csv";
    write_curve_csv(p.string(), "eps_multiplier", curve);
    artifacts["perturbation_sweep"] = p.string();
  }
  if (!eot_curve_arg.empty()) {
    std::vector<int> ls;
    for (double v : parse_list(eot_curve_arg)) ls.push_back(static_cast<int>(v));
    Dataset subset = ec.max_samples > 0 && ec.max_samples < data.test.size()
                         ? data.test.take(ec.max_samples)
                         : data.test;
    bool flat = false;
    auto curve = eot_sensitivity(model, subset, ec, ls, &flat);
    if (flat)
      std::fprintf(stderr, "note: model has no noise layer; the EOT curve is "
                           "flat by construction\n");
    const fs::path p = fs::path(out_dir) / "eot_sensitivity.csv";
    write_curve_csv(p.string(), "eot_L", curve);
    artifacts["eot_sensitivity"] = p.string();
  }
  write_manifest(fs::path(out_dir) / "manifest.json", "eval", config_path, cfg,
                 workers, artifacts);
  return 0;
}

// ---- attack (dump adversarial batches) -------------------------------------

int run_attack_dump(const RunConfig& cfg, const std::string& checkpoint,
                    const std::string& out_file, const std::string& data_root,
                    size_t count) {
  cfg.validate_keys(kKnownKeys);
  DataPair data = load_data(cfg, data_root);
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("seed", 1));
  Model<float> model = build_model(cfg, data.train, derive_seed(seed, "model"));
  if (!checkpoint.empty()) load_checkpoint(checkpoint, model);

  Dataset batch = data.test.take(count);
  Tensor<float> y = one_hot(batch.labels, batch.classes);
  AttackConfig attack = attack_from_config(cfg);
  ModelTarget target(model);
  AdvBatch adv = run_attack(target, batch.images, y, attack,
                            derive_seed(seed, "attack"));

  TensorFile dump;
  dump.tensors.emplace_back("x_clean", batch.images);
  dump.tensors.emplace_back("x_adv", adv.x_adv);
  dump.tensors.emplace_back("delta", adv.delta);
  Tensor<float> labels({batch.size()});
  for (size_t i = 0; i < batch.size(); ++i)
    labels[i] = static_cast<float>(batch.labels[i]);
  dump.tensors.emplace_back("labels", labels);
  if (!adv.success.empty()) {
    Tensor<float> success({adv.success.size()});
    for (size_t i = 0; i < adv.success.size(); ++i) success[i] = adv.success[i];
    dump.tensors.emplace_back("success", success);
  }
  dump.meta["attack"] = to_string(attack.kind);
  dump.meta["eps"] = std::to_string(attack.eps);
  dump.meta["seed"] = std::to_string(seed);
  save_tensor_file(out_file, dump);
  size_t fooled = 0;
  for (uint8_t s : adv.success) fooled += s;
  std::fprintf(stderr, "%s: wrote %zu adversarial samples (%zu misclassified)\n",
               out_file.c_str(), batch.size(), fooled);
  return 0;
}

// ---- gradcheck --------------------------------------------------------------

int run_gradcheck(int networks, uint64_t seed, const std::string& fault,
                  bool verbose) {
  GradSuiteConfig cfg;
  cfg.networks = networks;
  cfg.seed = seed;
  cfg.verbose = verbose;
  if (fault == "relu") cfg.fault = GradFault::relu_backward;
  else if (!fault.empty()) throw std::runtime_error("unknown fault '" + fault + "'");

  GradSuiteResult result = run_gradcheck_suite(cfg);
  std::printf("gradcheck: %d networks, %zu coordinates, max rel err %.3g\n",
              result.networks_checked, result.coords_checked, result.max_rel_err);
  if (!result.ok()) {
    std::printf("gradcheck FAILED (%zu coordinates beyond tolerance):\n",
                result.failures.size());
    for (const auto& f : result.failures)
      std::printf("  %s[%zu]: analytic %.8g vs numeric %.8g (rel %.3g)\n",
                  f.tensor.c_str(), f.coord, f.analytic, f.numeric, f.rel_err);
    return kExitNumeric;
  }
  std::printf("gradcheck passed\n");
  return 0;
}

// ---- experiment (5x2 cross-validation protocol) ------------------------------

struct RunOutcome {
  EvalReport report;
};

RunOutcome run_protocol_run(const RunConfig& cfg, const DataPair& data,
                            const CvRun& run, bool with_pnil,
                            const fs::path& run_dir, size_t run_index) {
  if (fs::exists(run_dir / "DONE")) {
    return {read_report_csv((run_dir / "report.csv").string())};
  }
  if (fs::exists(run_dir) && !fs::is_empty(run_dir))
    throw std::runtime_error("corrupted partial state in " + run_dir.string() +
                             " (no DONE marker); remove the directory to rerun");
  fs::create_directories(run_dir);

  RunConfig rc = cfg;
  rc.set("pnil", with_pnil ? "true" : "false");
  Dataset train_fold = data.train.subset(run.train_idx);
  train_fold.classes = data.train.classes;
  Dataset eval_half = data.test.subset(run.eval_idx);
  eval_half.classes = data.test.classes;

  const uint64_t base_seed = static_cast<uint64_t>(cfg.get_int("seed", 1));
  const uint64_t run_seed =
      derive_seed(base_seed, with_pnil ? "pnil" : "baseline", run_index);
  Model<float> model = build_model(rc, train_fold, derive_seed(run_seed, "model"));
  TrainConfig tc = train_from_config(rc);
  tc.seed = run_seed;
  tc.checkpoint_dir = run_dir.string();
  adversarial_train(model, train_fold, eval_half, tc);

  EvalConfig ec = eval_from_config(rc);
  ec.seed = run_seed;
  EvalReport report = evaluate_robustness(model, eval_half, ec);
  write_report_csv((run_dir / "report.csv").string(), report);
  std::ofstream done(run_dir / "DONE");
  done << "ok\n";
  return {report};
}

int run_experiment(const RunConfig& cfg, const std::string& config_path,
                   const std::string& out_dir, const std::string& data_root,
                   int workers) {
  cfg.validate_keys(kKnownKeys);
  fs::create_directories(out_dir);
  DataPair data = load_data(cfg, data_root);
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("seed", 1));
  const size_t repeats = static_cast<size_t>(cfg.get_int("cv_repeats", 5));
  CvPlan plan = make_cv_plan(data.train.size(), data.test.size(), repeats,
                             derive_seed(seed, "cv"));

  const std::vector<std::string> variants = {"baseline", "pnil"};
  std::map<std::string, std::vector<EvalReport>> reports;
  for (const auto& variant : variants) {
    for (size_t r = 0; r < plan.runs.size(); ++r) {
      char name[32];
      std::snprintf(name, sizeof(name), "run_%02zu", r);
      const fs::path run_dir = fs::path(out_dir) / variant / name;
      std::fprintf(stderr, "[%s %zu/%zu] %s\n", variant.c_str(), r + 1,
                   plan.runs.size(),
                   fs::exists(run_dir / "DONE") ? "cached" : "training");
      reports[variant].push_back(
          run_protocol_run(cfg, data, plan.runs[r], variant == "pnil", run_dir, r)
              .report);
    }
  }

  // Table rows: mean and std per column, per variant.
  auto column = [](const std::vector<EvalReport>& rs, const std::string& name) {
    std::vector<double> vals;
    for (const auto& r : rs) {
      if (name == "min")
        vals.push_back(r.effective_robustness);
      else if (const AttackAccuracy* row = r.find(name))
        vals.push_back(row->accuracy);
    }
    return vals;
  };
  auto mean_std = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= v.empty() ? 1 : v.size();
    double s2 = 0;
    for (double x : v) s2 += (x - m) * (x - m);
    const double s = v.size() > 1 ? std::sqrt(s2 / (v.size() - 1)) : 0;
    return std::pair{m, s};
  };

  std::vector<double> diffs;
  const auto base_min = column(reports["baseline"], "min");
  const auto pnil_min = column(reports["pnil"], "min");
  for (size_t i = 0; i < base_min.size(); ++i)
    diffs.push_back(pnil_min[i] - base_min[i]);
  const double ratio = cfg.get_number("ttest_ratio", 1.0);
  const double alpha = cfg.get_number("ttest_alpha", 0.003);
  TTestResult tt = corrected_resampled_ttest(diffs, ratio, alpha);

  std::ostringstream table;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-14s %14s %14s %14s %14s\n", "model", "clean",
                "spsa", "pgd", "min");
  table << buf;
  for (const auto& variant : variants) {
    std::snprintf(buf, sizeof(buf), "%-14s", variant.c_str());
    table << buf;
    for (const std::string col : {"clean", "spsa", "pgd", "min"}) {
      const auto vals = column(reports[variant], col);
      if (vals.empty()) {
        std::snprintf(buf, sizeof(buf), " %14s", "-");
      } else {
        auto [m, s] = mean_std(vals);
        const bool star = col == "min" && variant == "pnil" && tt.significant;
        std::snprintf(buf, sizeof(buf), " %8.1f+-%-4.1f%s", m, s, star ? "*" : " ");
      }
      table << buf;
    }
    table << "\n";
  }
  std::snprintf(buf, sizeof(buf),
                "corrected resampled t-test on min (n=%zu, ratio=%.3g): t=%.4f "
                "p=%.6f alpha=%g%s\n",
                tt.n, tt.ratio, tt.t, tt.p, tt.alpha,
                tt.significant ? " -> significant (*)" : "");
  table << buf;
  std::cout << table.str();
  {
    std::ofstream os(fs::path(out_dir) / "experiment_table.txt");
    os << table.str();
  }
  {
    std::ofstream os(fs::path(out_dir) / "experiment_summary.csv");
    os << "variant,run,clean,spsa,pgd,min\n";
    for (const auto& variant : variants)
      for (size_t r = 0; r < reports[variant].size(); ++r) {
        const EvalReport& rep = reports[variant][r];
        auto cell = [&](const std::string& n) {
          const AttackAccuracy* row = rep.find(n);
          return row ? row->accuracy : std::nan("");
        };
        std::snprintf(buf, sizeof(buf), "%s,%zu,%.4f,%.4f,%.4f,%.4f\n",
                      variant.c_str(), r, cell("clean"), cell("spsa"), cell("pgd"),
                      rep.effective_robustness);
        os << buf;
      }
    std::snprintf(buf, sizeof(buf), "ttest,,t=%.6f,p=%.8f,alpha=%g,%s\n", tt.t,
                  tt.p, tt.alpha, tt.significant ? "significant" : "ns");
    os << buf;
  }
  json artifacts;
  artifacts["experiment_table"] = (fs::path(out_dir) / "experiment_table.txt").string();
  artifacts["experiment_summary"] = (fs::path(out_dir) / "experiment_summary.csv").string();
  write_manifest(fs::path(out_dir) / "manifest.json", "experiment", config_path,
                 cfg, workers, artifacts);
  return 0;
}

// ---- lr-find -----------------------------------------------------------------

int run_lr_find(const RunConfig& cfg, const std::string& out_dir,
                const std::string& data_root, double from, double to, int iters) {
  cfg.validate_keys(kKnownKeys);
  fs::create_directories(out_dir);
  DataPair data = load_data(cfg, data_root);
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("seed", 1));
  Model<float> model = build_model(cfg, data.train, derive_seed(seed, "model"));
  TrainConfig tc = train_from_config(cfg);
  LrRangeResult res = lr_range_test(std::move(model), data.train, tc,
                                    static_cast<float>(from),
                                    static_cast<float>(to), iters);
  std::vector<CurvePoint> curve;
  for (const auto& p : res.curve) curve.push_back({p.lr, p.smoothed_loss});
  const fs::path p = fs::path(out_dir) / "lr_curve.csv";
  write_curve_csv(p.string(), "lr", curve);
  double best_lr = 0, best_loss = 1e300;
  for (const auto& pt : res.curve)
    if (pt.smoothed_loss < best_loss) {
      best_loss = pt.smoothed_loss;
      best_lr = pt.lr;
    }
  std::printf("lr range test: %zu probes%s, minimum smoothed loss %.4f at lr %.3g\n",
              res.curve.size(), res.diverged ? " (stopped at divergence)" : "",
              best_loss, best_lr);
  std::printf("suggested bounds: lr_lo %.3g, lr_hi %.3g\n", best_lr / 10, best_lr);
  std::printf("curve written to %s\n", p.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarial training and robustness evaluation toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs/out", data_root, checkpoint;
  std::string replay_path;
  int workers = 0;
  bool verbose = false;
  app.add_option("--workers", workers,
                 "worker thread cap (0 = all cores); results are identical for "
                 "every value");
  app.add_flag("-v,--verbose", verbose, "per-epoch progress");

  auto* train = app.add_subcommand("train", "adversarially train a model");
  train->add_option("--config", config_path, "run config file");
  train->add_option("--replay", replay_path,
                    "re-run from a manifest.json (byte-identical outputs)");
  train->add_option("--out", out_dir, "output directory");
  train->add_option("--data-root", data_root, "dataset root directory");
  std::string ov_attack, ov_eps, ov_epochs, ov_seed, ov_dataset;
  train->add_option("--attack", ov_attack, "override: training attack kind");
  train->add_option("--eps", ov_eps, "override: eps (rationals like 8/255 ok)");
  train->add_option("--epochs", ov_epochs, "override: epoch count");
  train->add_option("--seed", ov_seed, "override: global seed");
  train->add_option("--dataset", ov_dataset, "override: dataset name");

  auto* eval = app.add_subcommand("eval", "evaluate robustness of a checkpoint");
  eval->add_option("--config", config_path, "run config file");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
  eval->add_option("--out", out_dir, "output directory");
  eval->add_option("--data-root", data_root, "dataset root directory");
  std::string sweep_arg, eot_curve_arg;
  eval->add_option("--sweep", sweep_arg,
                   "eps multipliers for a perturbation sweep, e.g. 0.5,1,1.5,2");
  eval->add_option("--eot-curve", eot_curve_arg,
                   "EOT sample counts for a sensitivity curve, e.g. 1,10,100");

  auto* attack_cmd = app.add_subcommand("attack", "dump adversarial batches");
  std::string attack_out = "adv_batch.ckpt";
  size_t attack_count = 100;
  attack_cmd->add_option("--config", config_path, "run config file");
  attack_cmd->add_option("--checkpoint", checkpoint, "model checkpoint");
  attack_cmd->add_option("--out", attack_out, "output tensor file");
  attack_cmd->add_option("--count", attack_count, "number of samples");
  attack_cmd->add_option("--data-root", data_root, "dataset root directory");
  std::string atk_kind, atk_eps;
  attack_cmd->add_option("--kind", atk_kind, "override: attack kind");
  attack_cmd->add_option("--eps", atk_eps, "override: eps");

  auto* gradcheck = app.add_subcommand("gradcheck", "gradient correctness suite");
  int gc_networks = 100;
  uint64_t gc_seed = 20240;
  std::string gc_fault;
  gradcheck->add_option("--networks", gc_networks, "number of random networks");
  gradcheck->add_option("--seed", gc_seed, "suite seed");
  gradcheck->add_option("--inject-fault", gc_fault,
                        "test fixture: corrupt a gradient rule (relu)")
      ->group("");  // hidden

  auto* experiment = app.add_subcommand(
      "experiment", "5x2 cross-validation protocol with and without the noise layer");
  experiment->add_option("--config", config_path, "run config file");
  experiment->add_option("--out", out_dir, "output directory");
  experiment->add_option("--data-root", data_root, "dataset root directory");

  auto* lr_find = app.add_subcommand("lr-find", "learning-rate range test");
  double lr_from = 1e-5, lr_to = 1.0;
  int lr_iters = 100;
  lr_find->add_option("--config", config_path, "run config file");
  lr_find->add_option("--out", out_dir, "output directory");
  lr_find->add_option("--data-root", data_root, "dataset root directory");
  lr_find->add_option("--from", lr_from, "sweep start");
  lr_find->add_option("--to", lr_to, "sweep end");
  lr_find->add_option("--iters", lr_iters, "sweep iterations");

  auto* report_cmd = app.add_subcommand("report", "re-render a saved report");
  std::string report_in;
  report_cmd->add_option("--in", report_in, "report.csv path")->required();

  CLI11_PARSE(app, argc, argv);
  set_workers(workers);

  try {
    auto load_cfg = [&](bool required) {
      if (!config_path.empty()) return RunConfig::from_file(config_path);
      if (required) throw std::runtime_error("--config is required");
      return RunConfig();
    };
    auto apply_override = [](RunConfig& cfg, const std::string& key,
                             const std::string& value) {
      if (!value.empty()) cfg.set(key, value);
    };

    if (*train) {
      RunConfig cfg;
      if (!replay_path.empty()) {
        std::ifstream is(replay_path);
        if (!is) throw std::runtime_error("cannot open manifest " + replay_path);
        json manifest = json::parse(is);
        cfg = config_from_snapshot(manifest.at("config"));
        config_path = manifest.value("config_path", replay_path);
      } else {
        cfg = load_cfg(true);
      }
      apply_override(cfg, "attack", ov_attack);
      apply_override(cfg, "eps", ov_eps);
      apply_override(cfg, "epochs", ov_epochs);
      apply_override(cfg, "seed", ov_seed);
      apply_override(cfg, "dataset", ov_dataset);
      return run_train(cfg, config_path, out_dir, data_root, workers, verbose);
    }
    if (*eval) {
      RunConfig cfg = load_cfg(true);
      return run_eval(cfg, config_path, checkpoint, out_dir, data_root, workers,
                      sweep_arg, eot_curve_arg);
    }
    if (*attack_cmd) {
      RunConfig cfg = load_cfg(true);
      apply_override(cfg, "attack", atk_kind);
      apply_override(cfg, "eps", atk_eps);
      return run_attack_dump(cfg, checkpoint, attack_out, data_root, attack_count);
    }
    if (*gradcheck) return run_gradcheck(gc_networks, gc_seed, gc_fault, verbose);
    if (*experiment) {
      RunConfig cfg = load_cfg(true);
      return run_experiment(cfg, config_path, out_dir, data_root, workers);
    }
    if (*lr_find) {
      RunConfig cfg = load_cfg(true);
      return run_lr_find(cfg, out_dir, data_root, lr_from, lr_to, lr_iters);
    }
    if (*report_cmd) {
      EvalReport rep = read_report_csv(report_in);
      std::cout << format_report_table(report_in, rep);
      return 0;
    }
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}
