#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "pvmc/adam.hpp"
#include "pvmc/metrics.hpp"
#include "pvmc/patchstats.hpp"
#include "pvmc/simulator.hpp"
#include "pvmc/unet.hpp"

namespace pvmc {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 4;
  double lr_initial = 1e-3;
  double lr_min = 1e-7;
  double plateau_factor = 0.5;
  int plateau_patience = 20;
  int early_stop_patience = 0;  // 0 disables early stopping
  std::uint64_t seed = 3407;
  double lambda_weight = 1e-5;
  PatchSpec patches;  // 16x16, 16 per batch by default
  double k_init = 0.8;
  double epsilon = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_opt = 1e-8;
  double val_fraction = 0.2;
  bool stop_grad_mean = false;  // detach Mean_p(yhat) in the constraint
  bool trace_params = false;    // record a parameter hash per epoch
  // The zero-initialized head makes pi ~ Var/eps on the first batches; a
  // short warmup keeps that transient out of the optimizer moments.
  int pvmc_warmup_epochs = 2;

  void validate() const {
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size >= 1");
    if (!(lr_min <= lr_initial))
      throw ConfigError("TrainConfig: lr_min must be <= lr_initial");
    if (lambda_weight < 0.0)
      throw ConfigError("TrainConfig: lambda_weight must be >= 0");
    if (!(k_init > 0.0)) throw ConfigError("TrainConfig: k_init must be > 0");
    if (!(epsilon > 0.0)) throw ConfigError("TrainConfig: epsilon must be > 0");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
      throw ConfigError("TrainConfig: val_fraction must be in [0, 1)");
  }
};

struct StepRecord {
  double l1 = 0.0, pvmc = 0.0, total = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double l1 = 0.0, pvmc = 0.0, total = 0.0;
  double k = 0.0, lr = 0.0;
  double val_psnr = 0.0, val_ssim = 0.0;
  double m1 = 0.0, m2 = 0.0;
};

struct TrainRun {
  NetConfig net_config;
  TrainConfig config;
  std::vector<EpochRecord> history;
  std::vector<StepRecord> steps;
  std::vector<std::uint64_t> param_trace;  // filled when trace_params is set
  int best_epoch = -1;
  double best_val_psnr = -std::numeric_limits<double>::infinity();
  bool diverged = false;
  int diverged_epoch = -1;
  double final_k = 0.0;
  int epochs_run = 0;
};

template <class T>
struct TrainOutput {
  TrainRun run;
  UNet<T> best_model;
  double best_k = 0.0;
  UNet<T> final_model;
};

namespace detail {

template <class T>
ad::Tensor<T> batch_tensor(const std::vector<DatasetPair>& pairs,
                           const std::vector<int>& idx, bool noisy) {
  const int h = pairs[0].noisy.height, w = pairs[0].noisy.width;
  const int b = static_cast<int>(idx.size());
  std::vector<T> buf(static_cast<std::size_t>(b) * h * w);
  for (int i = 0; i < b; ++i) {
    const ImageD& img = noisy ? pairs[idx[i]].noisy : pairs[idx[i]].target;
    for (std::size_t j = 0; j < img.v.size(); ++j)
      buf[static_cast<std::size_t>(i) * h * w + j] = static_cast<T>(img.v[j]);
  }
  return ad::Tensor<T>::from_data(ad::Shape{b, 1, h, w}, std::move(buf));
}

template <class T>
ImageD infer_image(const UNet<T>& net, const ImageD& x) {
  std::vector<T> buf(x.v.size());
  for (std::size_t i = 0; i < x.v.size(); ++i) buf[i] = static_cast<T>(x.v[i]);
  ad::Tensor<T> xt =
      ad::Tensor<T>::from_data(ad::Shape{1, 1, x.height, x.width}, std::move(buf));
  ad::Tensor<T> yt = net.forward(xt);
  ImageD out(x.width, x.height);
  for (std::size_t i = 0; i < out.v.size(); ++i)
    out.v[i] = static_cast<double>(yt.data()[i]);
  return out;
}

inline void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_int(i);
    std::swap(idx[i - 1], idx[j]);
  }
}

// Validation metrics plus the per-epoch moment summaries.
template <class T>
void validation_pass(const UNet<T>& net, const std::vector<DatasetPair>& val,
                     double k, double epsilon, const PatchSpec& patches,
                     std::uint64_t seed, int epoch, EpochRecord& rec) {
  if (val.empty()) return;
  double psnr_acc = 0.0, ssim_acc = 0.0;
  std::vector<ImageD> outputs;
  outputs.reserve(val.size());
  for (const auto& pair : val) {
    outputs.push_back(infer_image(net, pair.noisy));
    const double range = grid_max(pair.target);
    psnr_acc += psnr(outputs.back(), pair.target, range);
    ssim_acc += ssim(outputs.back(), pair.target, range);
  }
  rec.val_psnr = psnr_acc / static_cast<double>(val.size());
  rec.val_ssim = ssim_acc / static_cast<double>(val.size());

  Rng rng(seed, stream_tag("diag", static_cast<std::uint64_t>(epoch)));
  PatchSpec spec = patches;
  spec.count = 32;
  double m1 = 0.0, m2 = 0.0;
  std::int64_t n_m1 = 0, n_m2 = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const ImageD& x = val[i].noisy;
    const ImageD& yh = outputs[i];
    ImageD r(x.width, x.height);
    for (std::size_t j = 0; j < r.v.size(); ++j) r.v[j] = x.v[j] - yh.v[j];
    for (const double v : r.v) m1 += v;
    n_m1 += static_cast<std::int64_t>(r.v.size());
    std::vector<Patch> ps = sample_patches(x.width, x.height, spec, rng);
    for (const Patch& p : ps) {
      m2 += patch_var_unbiased(r, p) - (k * patch_mean(yh, p) + epsilon);
      ++n_m2;
    }
  }
  rec.m1 = m1 / static_cast<double>(n_m1);
  rec.m2 = m2 / static_cast<double>(n_m2);
}

}  // namespace detail

/// End-to-end optimization of L_total = L1 + lambda * L_PVMC with the slope
/// k learned jointly (as exp(kappa), same optimizer and learning rate as the
/// network). When lambda == 0 the PVMC path contributes nothing and is
/// skipped; the trajectory then matches train_l1_baseline bit for bit.
template <class T>
TrainOutput<T> train(const std::vector<DatasetPair>& pairs,
                     const NetConfig& net_cfg, const TrainConfig& cfg,
                     bool log_progress = false) {
  cfg.validate();
  net_cfg.validate();
  if (pairs.empty()) throw ConfigError("train: empty dataset");

  const int n_val = cfg.val_fraction > 0.0
                        ? std::max(1, static_cast<int>(std::lround(
                                          cfg.val_fraction * pairs.size())))
                        : 0;
  const int n_train = static_cast<int>(pairs.size()) - n_val;
  if (n_train < 1) throw ConfigError("train: empty training split");
  const std::vector<DatasetPair> train_set(pairs.begin(),
                                           pairs.begin() + n_train);
  const std::vector<DatasetPair> val_set(pairs.begin() + n_train, pairs.end());

  const bool use_pvmc = cfg.lambda_weight > 0.0;

  TrainOutput<T> out;
  out.run.net_config = net_cfg;
  out.run.config = cfg;

  UNet<T> net = UNet<T>::init(net_cfg, cfg.seed);
  ad::Tensor<T> kappa =
      ad::Tensor<T>::scalar(static_cast<T>(std::log(cfg.k_init)), true);

  std::vector<ad::Tensor<T>> opt_params = net.params();
  if (use_pvmc) opt_params.push_back(kappa);
  Adam<T> adam(opt_params, {cfg.beta1, cfg.beta2, cfg.eps_opt});
  ReduceOnPlateau sched(cfg.plateau_factor, cfg.plateau_patience, cfg.lr_min);

  double lr = cfg.lr_initial;
  int stale_epochs = 0;

  const int w = pairs[0].noisy.width, h = pairs[0].noisy.height;
  std::vector<int> order(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n_train; ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(cfg.seed, stream_tag("shuffle", static_cast<std::uint64_t>(epoch)));
    detail::shuffle_indices(order, shuffle_rng);

    double e_l1 = 0.0, e_pvmc = 0.0, e_total = 0.0;
    int n_steps = 0;
    bool aborted = false;

    for (int start = 0; start < n_train; start += cfg.batch_size) {
      const int end = std::min(n_train, start + cfg.batch_size);
      std::vector<int> idx(order.begin() + start, order.begin() + end);
      ad::Tensor<T> x = detail::batch_tensor<T>(train_set, idx, true);
      ad::Tensor<T> y = detail::batch_tensor<T>(train_set, idx, false);

      ad::Tensor<T> y_hat = net.forward(x);
      ad::Tensor<T> l1 = ad::mean(ad::abs(ad::sub(y_hat, y)));
      ad::Tensor<T> total;
      double pvmc_value = 0.0;
      const bool pvmc_active = use_pvmc && epoch >= cfg.pvmc_warmup_epochs;
      if (pvmc_active) {
        Rng patch_rng(cfg.seed,
                      stream_tag("patches", static_cast<std::uint64_t>(epoch),
                                 static_cast<std::uint64_t>(n_steps)));
        const std::vector<Patch> patches = sample_patches(
            w, h, cfg.patches, patch_rng, static_cast<int>(idx.size()));
        ad::Tensor<T> k_pos = ad::exp(kappa);
        ad::Tensor<T> pvmc = pvmc_loss(x, y_hat, patches, k_pos, cfg.epsilon,
                                       cfg.stop_grad_mean);
        total = ad::add(l1, ad::scalar_mul(pvmc, cfg.lambda_weight));
        pvmc_value = static_cast<double>(pvmc.item());
      } else {
        total = l1;
      }

      const double total_value = static_cast<double>(total.item());
      if (!std::isfinite(total_value)) {
        out.run.diverged = true;
        out.run.diverged_epoch = epoch;
        aborted = true;
        break;
      }

      ad::backward(total);
      adam.step(lr);
      adam.zero_grad();

      const double l1_value = static_cast<double>(l1.item());
      out.run.steps.push_back({l1_value, pvmc_value, total_value});
      e_l1 += l1_value;
      e_pvmc += pvmc_value;
      e_total += total_value;
      ++n_steps;
    }
    if (aborted) break;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.l1 = e_l1 / n_steps;
    rec.pvmc = e_pvmc / n_steps;
    rec.total = e_total / n_steps;
    rec.k = use_pvmc ? std::exp(static_cast<double>(kappa.item())) : cfg.k_init;
    rec.lr = lr;
    detail::validation_pass(net, val_set, rec.k, cfg.epsilon, cfg.patches,
                            cfg.seed, epoch, rec);
    out.run.history.push_back(rec);
    if (cfg.trace_params) out.run.param_trace.push_back(net.content_hash());
    if (log_progress) {
      std::printf("epoch=%d l1=%.6g pvmc=%.6g k=%.6g psnr=%.6g\n", epoch,
                  rec.l1, rec.pvmc, rec.k, rec.val_psnr);
      std::fflush(stdout);
    }

    if (!val_set.empty()) {
      if (rec.val_psnr > out.run.best_val_psnr) {
        out.run.best_val_psnr = rec.val_psnr;
        out.run.best_epoch = epoch;
        out.best_model = net.clone();
        out.best_k = rec.k;
        stale_epochs = 0;
      } else {
        ++stale_epochs;
      }
      lr = sched.update(rec.val_psnr, lr);
      if (cfg.early_stop_patience > 0 && stale_epochs >= cfg.early_stop_patience) {
        out.run.epochs_run = epoch + 1;
        break;
      }
    }
    out.run.epochs_run = epoch + 1;
  }

  out.final_model = net.clone();
  out.run.final_k =
      use_pvmc ? std::exp(static_cast<double>(kappa.item())) : cfg.k_init;
  if (out.run.best_epoch < 0) {  // no validation set: final model is best
    out.best_model = net.clone();
    out.best_k = out.run.final_k;
  }
  return out;
}

/// Plain L1 trainer (no PVMC term, no learnable k). Kept as an independent
/// loop so the lambda = 0 reduction of `train` can be checked against it.
template <class T>
TrainOutput<T> train_l1_baseline(const std::vector<DatasetPair>& pairs,
                                 const NetConfig& net_cfg,
                                 const TrainConfig& cfg) {
  cfg.validate();
  net_cfg.validate();
  if (pairs.empty()) throw ConfigError("train_l1_baseline: empty dataset");

  const int n_val = cfg.val_fraction > 0.0
                        ? std::max(1, static_cast<int>(std::lround(
                                          cfg.val_fraction * pairs.size())))
                        : 0;
  const int n_train = static_cast<int>(pairs.size()) - n_val;
  if (n_train < 1) throw ConfigError("train_l1_baseline: empty training split");
  const std::vector<DatasetPair> train_set(pairs.begin(),
                                           pairs.begin() + n_train);
  const std::vector<DatasetPair> val_set(pairs.begin() + n_train, pairs.end());

  TrainOutput<T> out;
  out.run.net_config = net_cfg;
  out.run.config = cfg;

  UNet<T> net = UNet<T>::init(net_cfg, cfg.seed);
  Adam<T> adam(net.params(), {cfg.beta1, cfg.beta2, cfg.eps_opt});
  ReduceOnPlateau sched(cfg.plateau_factor, cfg.plateau_patience, cfg.lr_min);
  double lr = cfg.lr_initial;
  int stale_epochs = 0;

  std::vector<int> order(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n_train; ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(cfg.seed, stream_tag("shuffle", static_cast<std::uint64_t>(epoch)));
    detail::shuffle_indices(order, shuffle_rng);

    double e_l1 = 0.0;
    int n_steps = 0;
    bool aborted = false;
    for (int start = 0; start < n_train; start += cfg.batch_size) {
      const int end = std::min(n_train, start + cfg.batch_size);
      std::vector<int> idx(order.begin() + start, order.begin() + end);
      ad::Tensor<T> x = detail::batch_tensor<T>(train_set, idx, true);
      ad::Tensor<T> y = detail::batch_tensor<T>(train_set, idx, false);
      ad::Tensor<T> l1 = ad::mean(ad::abs(ad::sub(net.forward(x), y)));
      const double l1_value = static_cast<double>(l1.item());
      if (!std::isfinite(l1_value)) {
        out.run.diverged = true;
        out.run.diverged_epoch = epoch;
        aborted = true;
        break;
      }
      ad::backward(l1);
      adam.step(lr);
      adam.zero_grad();
      out.run.steps.push_back({l1_value, 0.0, l1_value});
      e_l1 += l1_value;
      ++n_steps;
    }
    if (aborted) break;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.l1 = e_l1 / n_steps;
    rec.pvmc = 0.0;
    rec.total = rec.l1;
    rec.k = cfg.k_init;
    rec.lr = lr;
    detail::validation_pass(net, val_set, rec.k, cfg.epsilon, cfg.patches,
                            cfg.seed, epoch, rec);
    out.run.history.push_back(rec);
    if (cfg.trace_params) out.run.param_trace.push_back(net.content_hash());

    if (!val_set.empty()) {
      if (rec.val_psnr > out.run.best_val_psnr) {
        out.run.best_val_psnr = rec.val_psnr;
        out.run.best_epoch = epoch;
        out.best_model = net.clone();
        out.best_k = rec.k;
        stale_epochs = 0;
      } else {
        ++stale_epochs;
      }
      lr = sched.update(rec.val_psnr, lr);
      if (cfg.early_stop_patience > 0 && stale_epochs >= cfg.early_stop_patience)
        break;
    }
    out.run.epochs_run = epoch + 1;
  }
  out.final_model = net.clone();
  out.run.final_k = cfg.k_init;
  if (out.run.best_epoch < 0) {
    out.best_model = net.clone();
    out.best_k = cfg.k_init;
  }
  return out;
}

// ---------------------------------------------------------------------------
// ablation grid

struct AblationRow {
  double lambda = 0.0;
  int patch = 0;          // requested patch side
  int patch_used = 0;     // after clamping to the image side
  double psnr = 0.0;
  double ssim = 0.0;
  double final_k = 0.0;
  double mean_pi = 0.0;
  bool failed = false;
  std::string error;
};

/// One training run per (lambda, patch) cell with shared seeds. Cell
/// failures are recorded and the grid continues. Oversized patches clamp to
/// the full image.
template <class T>
std::vector<AblationRow> ablate(const Dataset& ds, const NetConfig& net_cfg,
                                const TrainConfig& base,
                                const std::vector<double>& lambdas,
                                const std::vector<int>& patch_sizes,
                                bool log_progress = false) {
  if (lambdas.empty() || patch_sizes.empty())
    throw ConfigError("ablate: empty grid");
  std::vector<AblationRow> rows;
  for (const double lam : lambdas) {
    for (const int patch : patch_sizes) {
      AblationRow row;
      row.lambda = lam;
      row.patch = patch;
      row.patch_used = std::min({patch, ds.config.width, ds.config.height});
      try {
        TrainConfig cfg = base;
        cfg.lambda_weight = lam;
        cfg.patches.sx = row.patch_used;
        cfg.patches.sy = row.patch_used;
        TrainOutput<T> res = train<T>(ds.train, net_cfg, cfg);
        if (res.run.diverged)
          throw VerificationError("diverged at epoch " +
                                  std::to_string(res.run.diverged_epoch));
        row.final_k = res.run.final_k;
        double ps = 0.0, ss = 0.0;
        for (const auto& pair : ds.test) {
          const ImageD yh = detail::infer_image(res.best_model, pair.noisy);
          const double range = grid_max(pair.target);
          ps += psnr(yh, pair.target, range);
          ss += ssim(yh, pair.target, range);
        }
        row.psnr = ps / static_cast<double>(ds.test.size());
        row.ssim = ss / static_cast<double>(ds.test.size());

        PvmcState st{res.best_k, base.epsilon, lam};
        Rng rng(base.seed, stream_tag("ablate_pi"));
        PatchSpec spec;
        spec.sx = spec.sy = row.patch_used;
        spec.count = 64;
        double pi_acc = 0.0;
        std::int64_t n_pi = 0;
        for (const auto& pair : ds.test) {
          const ImageD yh = detail::infer_image(res.best_model, pair.noisy);
          std::vector<Patch> ps2 =
              sample_patches(pair.noisy.width, pair.noisy.height, spec, rng);
          for (const Patch& p : ps2) {
            pi_acc += consistency_ratio_value(pair.noisy, yh, p, st);
            ++n_pi;
          }
        }
        row.mean_pi = pi_acc / static_cast<double>(n_pi);
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
      }
      if (log_progress) {
        std::printf("ablate lambda=%g patch=%d psnr=%.4f ssim=%.5f k=%.5f%s\n",
                    row.lambda, row.patch, row.psnr, row.ssim, row.final_k,
                    row.failed ? " FAILED" : "");
        std::fflush(stdout);
      }
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace pvmc
