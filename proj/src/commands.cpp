#include "pvmc/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "pvmc/checkpoint.hpp"
#include "pvmc/dataset_io.hpp"
#include "pvmc/diagnostics.hpp"
#include "pvmc/errors.hpp"
#include "pvmc/gradcheck.hpp"
#include "pvmc/manifest.hpp"
#include "pvmc/trainer.hpp"

namespace pvmc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return j;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad config value for '") + key +
                      "': " + e.what());
  }
}

json section(const json& j, const char* key) {
  return j.contains(key) ? j.at(key) : json::object();
}

DatasetConfig parse_dataset_config(const json& j,
                                   std::optional<std::uint64_t> seed_override) {
  DatasetConfig c;
  const json ph = section(j, "phantom");
  c.phantom_kind = phantom_kind_from_string(
      get_or<std::string>(ph, "kind", to_string(c.phantom_kind)));
  c.width = get_or(ph, "width", c.width);
  c.height = get_or(ph, "height", c.height);
  c.base_activity = get_or(ph, "base_activity", c.base_activity);
  const json sys = section(j, "system");
  c.kernel =
      kernel_from_string(get_or<std::string>(sys, "kernel", to_string(c.kernel)));
  c.lors_per_voxel = get_or(sys, "lors_per_voxel", c.lors_per_voxel);
  c.correction_spread = get_or(sys, "correction_spread", c.correction_spread);
  const json doses = section(j, "doses");
  c.low_dose = get_or(doses, "low", c.low_dose);
  c.full_dose = get_or(doses, "full", c.full_dose);
  const json pairs = section(j, "pairs");
  c.n_train = get_or(pairs, "train", c.n_train);
  c.n_test = get_or(pairs, "test", c.n_test);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  if (seed_override) c.seed = *seed_override;
  return c;
}

json dataset_config_to_json(const DatasetConfig& c) {
  return json{{"phantom",
               {{"kind", to_string(c.phantom_kind)},
                {"width", c.width},
                {"height", c.height},
                {"base_activity", c.base_activity}}},
              {"system",
               {{"kernel", to_string(c.kernel)},
                {"lors_per_voxel", c.lors_per_voxel},
                {"correction_spread", c.correction_spread}}},
              {"doses", {{"low", c.low_dose}, {"full", c.full_dose}}},
              {"pairs", {{"train", c.n_train}, {"test", c.n_test}}},
              {"seed", c.seed}};
}

NetConfig parse_net_config(const json& j) {
  NetConfig c;
  c.depth = get_or(j, "depth", c.depth);
  c.channels = get_or(j, "channels", c.channels);
  c.validate();
  return c;
}

json net_config_to_json(const NetConfig& c) {
  return json{{"depth", c.depth}, {"channels", c.channels}};
}

TrainConfig parse_train_config(const json& j,
                               std::optional<std::uint64_t> seed_override) {
  TrainConfig c;
  c.epochs = get_or(j, "epochs", c.epochs);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  c.lr_initial = get_or(j, "lr_initial", c.lr_initial);
  c.lr_min = get_or(j, "lr_min", c.lr_min);
  c.plateau_factor = get_or(j, "plateau_factor", c.plateau_factor);
  c.plateau_patience = get_or(j, "plateau_patience", c.plateau_patience);
  c.early_stop_patience = get_or(j, "early_stop_patience", c.early_stop_patience);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  c.lambda_weight = get_or(j, "lambda_weight", c.lambda_weight);
  const json p = section(j, "patches");
  c.patches.sx = get_or(p, "sx", c.patches.sx);
  c.patches.sy = get_or(p, "sy", c.patches.sy);
  c.patches.count = get_or(p, "count", c.patches.count);
  c.k_init = get_or(j, "k_init", c.k_init);
  c.epsilon = get_or(j, "epsilon", c.epsilon);
  c.beta1 = get_or(j, "beta1", c.beta1);
  c.beta2 = get_or(j, "beta2", c.beta2);
  c.eps_opt = get_or(j, "eps_opt", c.eps_opt);
  c.val_fraction = get_or(j, "val_fraction", c.val_fraction);
  c.stop_grad_mean = get_or(j, "stop_grad_mean", c.stop_grad_mean);
  if (seed_override) c.seed = *seed_override;
  c.validate();
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr_initial", c.lr_initial},
              {"lr_min", c.lr_min},
              {"plateau_factor", c.plateau_factor},
              {"plateau_patience", c.plateau_patience},
              {"early_stop_patience", c.early_stop_patience},
              {"seed", c.seed},
              {"lambda_weight", c.lambda_weight},
              {"patches",
               {{"sx", c.patches.sx},
                {"sy", c.patches.sy},
                {"count", c.patches.count}}},
              {"k_init", c.k_init},
              {"epsilon", c.epsilon},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps_opt", c.eps_opt},
              {"val_fraction", c.val_fraction},
              {"stop_grad_mean", c.stop_grad_mean}};
}

double json_safe(double v) {
  // JSON has no inf/nan literals; reports use a large sentinel text instead
  return v;
}

json train_run_to_json(const TrainRun& run, bool include_steps) {
  json hist = json::array();
  for (const auto& r : run.history) {
    hist.push_back({{"epoch", r.epoch},
                    {"l1", r.l1},
                    {"pvmc", r.pvmc},
                    {"total", r.total},
                    {"k", r.k},
                    {"lr", r.lr},
                    {"val_psnr", json_safe(r.val_psnr)},
                    {"val_ssim", r.val_ssim},
                    {"m1", r.m1},
                    {"m2", r.m2}});
  }
  json j;
  j["net_config"] = net_config_to_json(run.net_config);
  j["train_config"] = train_config_to_json(run.config);
  j["history"] = hist;
  j["best_epoch"] = run.best_epoch;
  j["best_val_psnr"] = json_safe(run.best_val_psnr);
  j["diverged"] = run.diverged;
  j["diverged_epoch"] = run.diverged_epoch;
  j["final_k"] = run.final_k;
  j["epochs_run"] = run.epochs_run;
  if (include_steps) {
    json steps = json::array();
    for (const auto& s : run.steps)
      steps.push_back({{"l1", s.l1}, {"pvmc", s.pvmc}, {"total", s.total}});
    j["steps"] = steps;
  }
  return j;
}

void ensure_out_dir(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--out directory is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir);
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - t0)
        .count();
  }
};

// number rendering for JSON reports that may hold +inf PSNR
json num_or_inf(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

json quality_to_json(const QualityReport& q) {
  json per = json::array();
  for (std::size_t i = 0; i < q.psnr_per_image.size(); ++i)
    per.push_back({{"psnr", num_or_inf(q.psnr_per_image[i])},
                   {"ssim", q.ssim_per_image[i]},
                   {"data_range", q.data_range_per_image[i]}});
  return json{{"per_image", per},
              {"psnr_mean", num_or_inf(q.psnr_mean)},
              {"ssim_mean", q.ssim_mean}};
}

json moments_to_json(const MomentReport& m) {
  json j{{"m1", m.m1},       {"m1_se", m.m1_se}, {"m2", m.m2},
         {"m2_se", m.m2_se}, {"cov", m.cov},     {"cov_se", m.cov_se},
         {"n_patches", m.n_patches}, {"k_used", m.k_used},
         {"epsilon", m.epsilon}};
  if (m.has_truth) {
    j["m2_truth"] = m.m2_truth;
    j["m2_truth_se"] = m.m2_truth_se;
  }
  return j;
}

json bias_to_json(const BiasReport& b) {
  return json{{"lhs_mean_yhat_minus_y", b.lhs},
              {"rhs_neg_var_over_k", b.rhs},
              {"gap", b.gap},
              {"gap_se", b.gap_se},
              {"gap_ci_lo", b.gap_ci_lo},
              {"gap_ci_hi", b.gap_ci_hi},
              {"cov_premise", b.cov_premise},
              {"cov_se", b.cov_se},
              {"var_yhat_mean", b.var_yhat_mean},
              {"n_patches", b.n_patches},
              {"k_used", b.k_used}};
}

json pi_to_json(const PiSummary& s) {
  return json{{"median", s.median},
              {"q25", s.q25},
              {"q75", s.q75},
              {"median_abs_dev_from_one", s.median_abs_dev_from_one},
              {"n", s.n}};
}

void write_pgm(const std::string& path, const ImageD& img, double lo,
               double hi) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_pgm: cannot open " + path);
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  for (const double v : img.v) {
    int p = static_cast<int>((v - lo) * scale + 0.5);
    p = std::clamp(p, 0, 255);
    f.put(static_cast<char>(p));
  }
}

template <class T>
ImageD run_inference(const UNet<T>& net, const ImageD& x) {
  return detail::infer_image(net, x);
}

std::string checkpoint_dtype(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "index.json");
  if (!f) throw IoError("missing checkpoint index.json in " + dir);
  json j;
  f >> j;
  return get_or<std::string>(j, "dtype", "f32");
}

}  // namespace

void cmd_simulate(const CmdOptions& opt) {
  Timer timer;
  ensure_out_dir(opt.out_dir);
  const json raw = load_config(opt.config_path);
  const DatasetConfig cfg = parse_dataset_config(raw, opt.seed_override);
  const Dataset ds = make_dataset(cfg);
  const std::vector<std::string> files = save_dataset(ds, opt.out_dir);

  RunManifest m;
  m.command = "simulate";
  m.config = dataset_config_to_json(cfg);
  if (!opt.config_path.empty())
    m.inputs["config"] = sha256_file(opt.config_path);
  hash_outputs(opt.out_dir, files, m);
  m.wall_ms = timer.ms();
  write_manifest(opt.out_dir, m);
  std::printf("simulate: %d train / %d test pairs, analytic_k=%.6f "
              "input_slope=%.6f k_spread=%.3e\n",
              cfg.n_train, cfg.n_test, ds.analytic_k, ds.input_slope,
              ds.k_spread);
}

void cmd_train(const CmdOptions& opt) {
  Timer timer;
  ensure_out_dir(opt.out_dir);
  const json raw = load_config(opt.config_path);
  const std::string dataset_dir = get_or<std::string>(raw, "dataset", "");
  if (dataset_dir.empty()) throw ConfigError("train: 'dataset' path required");
  const NetConfig net_cfg = parse_net_config(section(raw, "net"));
  const TrainConfig train_cfg =
      parse_train_config(section(raw, "train"), opt.seed_override);
  const std::string precision = get_or<std::string>(raw, "precision", "f32");
  const bool log_steps = get_or(raw, "log_steps", false);

  const Dataset ds = load_dataset(dataset_dir);

  json resolved;
  resolved["dataset"] = dataset_dir;
  resolved["net"] = net_config_to_json(net_cfg);
  resolved["train"] = train_config_to_json(train_cfg);
  resolved["precision"] = precision;
  resolved["log_steps"] = log_steps;

  TrainRun run;
  std::vector<std::string> files;
  auto run_training = [&](auto tag) {
    using T = decltype(tag);
    TrainOutput<T> out = train<T>(ds.train, net_cfg, train_cfg, true);
    save_checkpoint((fs::path(opt.out_dir) / "checkpoint_best").string(),
                    out.best_model, {{"k", out.best_k}});
    save_checkpoint((fs::path(opt.out_dir) / "checkpoint_final").string(),
                    out.final_model, {{"k", out.run.final_k}});
    run = std::move(out.run);
  };
  if (precision == "f64")
    run_training(double{});
  else if (precision == "f32")
    run_training(float{});
  else
    throw ConfigError("train: precision must be 'f32' or 'f64'");

  if (run.diverged)
    std::fprintf(stderr, "train: diverged at epoch %d\n", run.diverged_epoch);

  {
    std::ofstream f(fs::path(opt.out_dir) / "trainrun.json");
    if (!f) throw IoError("train: cannot write trainrun.json");
    f << train_run_to_json(run, log_steps).dump(2) << '\n';
  }
  files.push_back("trainrun.json");
  files.push_back("checkpoint_best/index.json");
  files.push_back("checkpoint_final/index.json");

  RunManifest m;
  m.command = "train";
  m.config = resolved;
  if (!opt.config_path.empty())
    m.inputs["config"] = sha256_file(opt.config_path);
  m.inputs["dataset"] =
      sha256_file((fs::path(dataset_dir) / "dataset.json").string());
  hash_outputs(opt.out_dir, files, m);
  m.wall_ms = timer.ms();
  write_manifest(opt.out_dir, m);
  if (run.diverged)
    throw VerificationError("training diverged at epoch " +
                            std::to_string(run.diverged_epoch));
}

namespace {

template <class T>
void eval_with_precision(const CmdOptions& opt, const json& raw,
                         const Dataset& ds, const std::string& checkpoint_dir,
                         const std::string& baseline_dir) {
  Timer timer;
  std::map<std::string, double> scalars;
  UNet<T> net = load_checkpoint<T>(checkpoint_dir, &scalars);
  double k = get_or(raw, "k", scalars.count("k") ? scalars.at("k") : 0.0);
  if (!(k > 0.0))
    throw ConfigError("eval: no positive k (checkpoint scalar or config)");
  const double epsilon = get_or(raw, "epsilon", 1e-6);
  PatchSpec spec;
  const json pj = section(raw, "patches");
  spec.sx = get_or(pj, "sx", 16);
  spec.sy = get_or(pj, "sy", 16);
  const int ppi = get_or(raw, "patches_per_image", 200);
  const int n_boot = get_or(raw, "bootstrap", 1000);
  const std::uint64_t seed = opt.seed_override
                                 ? *opt.seed_override
                                 : get_or<std::uint64_t>(raw, "seed", 3407);
  const bool dump_images = get_or(raw, "dump_images", false);

  auto build_samples = [&](const UNet<T>& model,
                           std::vector<ImageD>& outputs_store) {
    std::vector<EvalSample> samples;
    outputs_store.clear();
    outputs_store.reserve(ds.test.size());
    for (const auto& pair : ds.test)
      outputs_store.push_back(run_inference(model, pair.noisy));
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
      EvalSample s;
      s.x = &ds.test[i].noisy;
      s.y_hat = &outputs_store[i];
      s.truth = &ds.test[i].truth;
      s.target = &ds.test[i].target;
      samples.push_back(s);
    }
    return samples;
  };

  std::vector<ImageD> outs;
  const std::vector<EvalSample> samples = build_samples(net, outs);
  const QualityReport quality = quality_report(samples);
  const MomentReport moments =
      moment_report(samples, k, epsilon, spec, ppi, seed, n_boot);
  const BiasReport bias = bias_report(samples, k, spec, ppi, seed, n_boot);
  const PiSummary pi = consistency_summary(samples, k, epsilon, spec, ppi, seed);
  write_histogram_csv((fs::path(opt.out_dir) / "pi_hist.csv").string(), pi);

  json report;
  report["k_used"] = k;
  report["quality"] = quality_to_json(quality);
  report["moments"] = moments_to_json(moments);
  report["bias"] = bias_to_json(bias);
  report["pi"] = pi_to_json(pi);

  std::vector<std::string> files{"eval_report.json", "pi_hist.csv"};

  if (!baseline_dir.empty()) {
    UNet<T> base = load_checkpoint<T>(baseline_dir);
    std::vector<ImageD> bouts;
    const std::vector<EvalSample> bsamples = build_samples(base, bouts);
    const QualityReport bq = quality_report(bsamples);
    const MomentReport bm =
        moment_report(bsamples, k, epsilon, spec, ppi, seed, n_boot);
    const BiasReport bb = bias_report(bsamples, k, spec, ppi, seed, n_boot);
    const PiSummary bpi =
        consistency_summary(bsamples, k, epsilon, spec, ppi, seed);
    write_histogram_csv(
        (fs::path(opt.out_dir) / "pi_hist_baseline.csv").string(), bpi);
    report["baseline"] = {{"quality", quality_to_json(bq)},
                          {"moments", moments_to_json(bm)},
                          {"bias", bias_to_json(bb)},
                          {"pi", pi_to_json(bpi)}};
    report["paired"] = {
        {"psnr_delta", quality.psnr_mean - bq.psnr_mean},
        {"median_abs_pi_dev_model", pi.median_abs_dev_from_one},
        {"median_abs_pi_dev_baseline", bpi.median_abs_dev_from_one},
        {"bias_gap_model", bias.gap},
        {"bias_gap_baseline", bb.gap}};
    files.push_back("pi_hist_baseline.csv");
  }

  if (dump_images) {
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
      const double hi = grid_max(ds.test[i].target);
      ImageD residual(outs[i].width, outs[i].height);
      for (std::size_t j = 0; j < residual.v.size(); ++j)
        residual.v[j] =
            std::fabs(ds.test[i].noisy.v[j] - outs[i].v[j]);
      char buf[64];
      std::snprintf(buf, sizeof(buf), "img_%03zu", i);
      const std::string stem = buf;
      write_pgm((fs::path(opt.out_dir) / (stem + "_noisy.pgm")).string(),
                ds.test[i].noisy, 0.0, hi);
      write_pgm((fs::path(opt.out_dir) / (stem + "_denoised.pgm")).string(),
                outs[i], 0.0, hi);
      write_pgm((fs::path(opt.out_dir) / (stem + "_target.pgm")).string(),
                ds.test[i].target, 0.0, hi);
      write_pgm((fs::path(opt.out_dir) / (stem + "_residual.pgm")).string(),
                residual, 0.0, hi);
      files.push_back(stem + "_noisy.pgm");
      files.push_back(stem + "_denoised.pgm");
      files.push_back(stem + "_target.pgm");
      files.push_back(stem + "_residual.pgm");
    }
  }

  {
    std::ofstream f(fs::path(opt.out_dir) / "eval_report.json");
    if (!f) throw IoError("eval: cannot write eval_report.json");
    f << report.dump(2) << '\n';
  }

  RunManifest m;
  m.command = "eval";
  m.config = raw;
  m.config["k_resolved"] = k;
  m.inputs["dataset"] = sha256_file(
      (fs::path(get_or<std::string>(raw, "dataset", "")) / "dataset.json")
          .string());
  m.inputs["checkpoint"] =
      sha256_file((fs::path(checkpoint_dir) / "index.json").string());
  hash_outputs(opt.out_dir, files, m);
  m.wall_ms = timer.ms();
  write_manifest(opt.out_dir, m);
  std::printf("eval: psnr=%.4f ssim=%.5f median_pi=%.4f\n", quality.psnr_mean,
              quality.ssim_mean, pi.median);
}

}  // namespace

void cmd_eval(const CmdOptions& opt) {
  ensure_out_dir(opt.out_dir);
  const json raw = load_config(opt.config_path);
  const std::string dataset_dir = get_or<std::string>(raw, "dataset", "");
  const std::string checkpoint_dir = get_or<std::string>(raw, "checkpoint", "");
  if (dataset_dir.empty() || checkpoint_dir.empty())
    throw ConfigError("eval: 'dataset' and 'checkpoint' paths required");
  const std::string baseline_dir =
      get_or<std::string>(raw, "baseline_checkpoint", "");
  const Dataset ds = load_dataset(dataset_dir);
  if (ds.test.empty()) throw ConfigError("eval: dataset has no test pairs");
  if (checkpoint_dtype(checkpoint_dir) == "f64")
    eval_with_precision<double>(opt, raw, ds, checkpoint_dir, baseline_dir);
  else
    eval_with_precision<float>(opt, raw, ds, checkpoint_dir, baseline_dir);
}

void cmd_ablate(const CmdOptions& opt) {
  Timer timer;
  ensure_out_dir(opt.out_dir);
  const json raw = load_config(opt.config_path);
  const std::string dataset_dir = get_or<std::string>(raw, "dataset", "");
  if (dataset_dir.empty()) throw ConfigError("ablate: 'dataset' path required");
  const NetConfig net_cfg = parse_net_config(section(raw, "net"));
  const TrainConfig base =
      parse_train_config(section(raw, "train"), opt.seed_override);
  const std::vector<double> lambdas = get_or<std::vector<double>>(
      raw, "lambdas", {0.0, 1e-2, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6});
  const std::vector<int> patch_sizes =
      get_or<std::vector<int>>(raw, "patch_sizes", {16});

  const Dataset ds = load_dataset(dataset_dir);
  const std::vector<AblationRow> rows =
      ablate<float>(ds, net_cfg, base, lambdas, patch_sizes, true);

  {
    std::ofstream f(fs::path(opt.out_dir) / "ablation.csv");
    if (!f) throw IoError("ablate: cannot write ablation.csv");
    f << "lambda,patch,patch_used,psnr,ssim,final_k,mean_pi,failed,error\n";
    f.precision(10);
    for (const auto& r : rows)
      f << r.lambda << ',' << r.patch << ',' << r.patch_used << ',' << r.psnr
        << ',' << r.ssim << ',' << r.final_k << ',' << r.mean_pi << ','
        << (r.failed ? 1 : 0) << ',' << r.error << '\n';
  }

  RunManifest m;
  m.command = "ablate";
  m.config = raw;
  m.config["lambdas"] = lambdas;
  m.config["patch_sizes"] = patch_sizes;
  m.config["net"] = net_config_to_json(net_cfg);
  m.config["train"] = train_config_to_json(base);
  if (!opt.config_path.empty())
    m.inputs["config"] = sha256_file(opt.config_path);
  m.inputs["dataset"] =
      sha256_file((fs::path(dataset_dir) / "dataset.json").string());
  hash_outputs(opt.out_dir, {"ablation.csv"}, m);
  m.wall_ms = timer.ms();
  write_manifest(opt.out_dir, m);
}

void cmd_calibrate_k(const CmdOptions& opt) {
  Timer timer;
  ensure_out_dir(opt.out_dir);
  const json raw = load_config(opt.config_path);
  const std::string dataset_dir = get_or<std::string>(raw, "dataset", "");
  if (dataset_dir.empty())
    throw ConfigError("calibrate-k: 'dataset' path required");
  const NetConfig net_cfg = parse_net_config(section(raw, "net"));
  const TrainConfig base =
      parse_train_config(section(raw, "train"), opt.seed_override);
  const int n_splits = get_or(raw, "splits", 3);
  if (n_splits < 2) throw ConfigError("calibrate-k: splits must be >= 2");

  const Dataset ds = load_dataset(dataset_dir);
  if (static_cast<int>(ds.train.size()) < n_splits)
    throw ConfigError("calibrate-k: fewer train pairs than splits");

  std::vector<double> ks;
  std::vector<std::vector<double>> trajectories;
  const std::size_t chunk = ds.train.size() / n_splits;
  for (int s = 0; s < n_splits; ++s) {
    const std::size_t lo = s * chunk;
    const std::size_t hi = (s + 1 == n_splits) ? ds.train.size() : lo + chunk;
    std::vector<DatasetPair> split(ds.train.begin() + lo, ds.train.begin() + hi);
    TrainOutput<float> out = train<float>(split, net_cfg, base);
    if (out.run.diverged)
      throw VerificationError("calibrate-k: split " + std::to_string(s) +
                              " diverged");
    ks.push_back(out.run.final_k);
    std::vector<double> traj;
    for (const auto& r : out.run.history) traj.push_back(r.k);
    trajectories.push_back(std::move(traj));
    std::printf("calibrate-k: split=%d final_k=%.6f\n", s, ks.back());
  }

  double max_rel_diff = 0.0;
  for (std::size_t i = 0; i < ks.size(); ++i)
    for (std::size_t j = i + 1; j < ks.size(); ++j)
      max_rel_diff = std::max(
          max_rel_diff, std::fabs(ks[i] - ks[j]) / std::min(ks[i], ks[j]));

  json report;
  report["k_per_split"] = ks;
  report["max_pairwise_rel_diff"] = max_rel_diff;
  report["analytic_k"] = ds.analytic_k;
  report["input_slope"] = ds.input_slope;
  {
    std::ofstream f(fs::path(opt.out_dir) / "calibration.json");
    if (!f) throw IoError("calibrate-k: cannot write calibration.json");
    f << report.dump(2) << '\n';
  }
  {
    std::ofstream f(fs::path(opt.out_dir) / "k_trajectory.csv");
    if (!f) throw IoError("calibrate-k: cannot write k_trajectory.csv");
    f << "epoch";
    for (int s = 0; s < n_splits; ++s) f << ",k_split" << s;
    f << '\n';
    f.precision(10);
    std::size_t max_len = 0;
    for (const auto& t : trajectories) max_len = std::max(max_len, t.size());
    for (std::size_t e = 0; e < max_len; ++e) {
      f << e;
      for (const auto& t : trajectories)
        f << ',' << (e < t.size() ? std::to_string(t[e]) : "");
      f << '\n';
    }
  }

  RunManifest m;
  m.command = "calibrate-k";
  m.config = raw;
  m.config["net"] = net_config_to_json(net_cfg);
  m.config["train"] = train_config_to_json(base);
  m.config["splits"] = n_splits;
  if (!opt.config_path.empty())
    m.inputs["config"] = sha256_file(opt.config_path);
  m.inputs["dataset"] =
      sha256_file((fs::path(dataset_dir) / "dataset.json").string());
  hash_outputs(opt.out_dir, {"calibration.json", "k_trajectory.csv"}, m);
  m.wall_ms = timer.ms();
  write_manifest(opt.out_dir, m);
  std::printf("calibrate-k: max pairwise relative difference %.4f%%\n",
              100.0 * max_rel_diff);
}

void cmd_gradcheck(const CmdOptions& opt) {
  const GradcheckReport rep = run_gradcheck();
  print_gradcheck(rep);
  if (!opt.out_dir.empty()) {
    ensure_out_dir(opt.out_dir);
    json j;
    json ops = json::array();
    for (const auto& op : rep.ops)
      ops.push_back({{"name", op.name},
                     {"max_rel_err", op.max_rel_err},
                     {"tol", op.tol},
                     {"pass", op.pass}});
    j["ops"] = ops;
    j["pvmc_analytic_vs_autodiff"] = rep.pvmc_analytic_vs_autodiff;
    j["pvmc_analytic_vs_fd"] = rep.pvmc_analytic_vs_fd;
    j["pvmc_k_analytic_vs_autodiff"] = rep.pvmc_k_analytic_vs_autodiff;
    j["pvmc_patches_checked"] = rep.pvmc_patches_checked;
    j["negative_control_detected"] = rep.negative_control_detected;
    j["all_pass"] = rep.all_pass;
    std::ofstream f(fs::path(opt.out_dir) / "gradcheck.json");
    f << j.dump(2) << '\n';
    RunManifest m;
    m.command = "gradcheck";
    m.config = json::object();
    hash_outputs(opt.out_dir, {"gradcheck.json"}, m);
    write_manifest(opt.out_dir, m);
  }
  if (!rep.all_pass) throw VerificationError("gradient checks failed");
}

}  // namespace pvmc
