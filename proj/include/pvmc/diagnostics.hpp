#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pvmc/image.hpp"
#include "pvmc/patchstats.hpp"

namespace pvmc {

/// One evaluation sample: noisy input x, denoised estimate yhat, and (when
/// available on synthetic data) the noise-free truth and the paired target.
struct EvalSample {
  const ImageD* x = nullptr;
  const ImageD* y_hat = nullptr;
  const ImageD* truth = nullptr;   // optional
  const ImageD* target = nullptr;  // optional (full-dose image)
};

/// GMM moment conditions measured on held-out data.
/// m1 = mean(x - yhat) over all voxels; m2 = mean over patches of
/// [Var_p(x - yhat) - (k Mean_p(yhat) + eps)]; cov = mean over patches of
/// Cov_p(r, yhat). Standard errors come from a bootstrap over patches.
struct MomentReport {
  double m1 = 0.0, m1_se = 0.0;
  double m2 = 0.0, m2_se = 0.0;
  double m2_truth = 0.0, m2_truth_se = 0.0;  // denominator mean from truth
  bool has_truth = false;
  double cov = 0.0, cov_se = 0.0;
  std::int64_t n_patches = 0;
  double k_used = 0.0, epsilon = 0.0;
};

MomentReport moment_report(const std::vector<EvalSample>& data, double k,
                           double epsilon, const PatchSpec& spec,
                           int patches_per_image, std::uint64_t seed,
                           int n_boot = 1000);

/// Bias identity check: lhs = mean(yhat - truth), rhs = -(1/k) * mean over
/// patches of Var_p(yhat), gap = |lhs - rhs|. The residual-output covariance
/// premise is measured alongside.
struct BiasReport {
  double lhs = 0.0;
  double rhs = 0.0;
  double gap = 0.0;
  double gap_se = 0.0;
  double gap_ci_lo = 0.0, gap_ci_hi = 0.0;  // 2.5% / 97.5% bootstrap quantiles
  double cov_premise = 0.0, cov_se = 0.0;
  double var_yhat_mean = 0.0;
  std::int64_t n_patches = 0;
  double k_used = 0.0;
};

BiasReport bias_report(const std::vector<EvalSample>& data, double k,
                       const PatchSpec& spec, int patches_per_image,
                       std::uint64_t seed, int n_boot = 1000);

/// Distribution of the consistency ratio pi_p on held-out data.
struct PiSummary {
  double median = 0.0;
  double q25 = 0.0, q75 = 0.0;
  double median_abs_dev_from_one = 0.0;  // median |pi_p - 1|
  std::int64_t n = 0;
  std::vector<double> hist_edges;   // n_bins + 1
  std::vector<std::int64_t> hist_counts;
};

PiSummary consistency_summary(const std::vector<EvalSample>& data, double k,
                              double epsilon, const PatchSpec& spec,
                              int patches_per_image, std::uint64_t seed,
                              int n_bins = 40,
                              std::vector<double>* raw_pi = nullptr);

struct QualityReport {
  std::vector<double> psnr_per_image;
  std::vector<double> ssim_per_image;
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
  std::vector<double> data_range_per_image;
};

/// PSNR/SSIM of yhat against the paired target; data_range is the target
/// image maximum (recorded per image).
QualityReport quality_report(const std::vector<EvalSample>& data);

void write_histogram_csv(const std::string& path, const PiSummary& s);

double percentile(std::vector<double> values, double q);

}  // namespace pvmc
