#include "pvmc/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "pvmc/errors.hpp"
#include "pvmc/metrics.hpp"

namespace pvmc {

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Bootstrap standard error of the mean of `v` (resampling with replacement).
double bootstrap_se(const std::vector<double>& v, Rng& rng, int n_boot,
                    std::vector<double>* boot_means = nullptr) {
  const std::size_t n = v.size();
  std::vector<double> means;
  means.reserve(static_cast<std::size_t>(n_boot));
  for (int b = 0; b < n_boot; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[rng.uniform_int(n)];
    means.push_back(s / static_cast<double>(n));
  }
  const double m = mean_of(means);
  double var = 0.0;
  for (double x : means) var += (x - m) * (x - m);
  var /= static_cast<double>(means.size() - 1);
  if (boot_means) *boot_means = std::move(means);
  return std::sqrt(var);
}

std::vector<Patch> patches_for_image(const ImageD& img, const PatchSpec& spec,
                                     int count, Rng& rng) {
  PatchSpec s = spec;
  s.count = count;
  return sample_patches(img.width, img.height, s, rng);
}

}  // namespace

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ModelError("percentile: empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

MomentReport moment_report(const std::vector<EvalSample>& data, double k,
                           double epsilon, const PatchSpec& spec,
                           int patches_per_image, std::uint64_t seed,
                           int n_boot) {
  if (data.empty()) throw ConfigError("moment_report: no data");
  MomentReport rep;
  rep.k_used = k;
  rep.epsilon = epsilon;

  Rng rng(seed, stream_tag("moment_patches"));
  std::vector<double> patch_m1, patch_m2, patch_m2_truth, patch_cov_v;
  double global_sum = 0.0;
  std::int64_t global_n = 0;
  bool all_truth = true;

  for (const EvalSample& s : data) {
    const ImageD& x = *s.x;
    const ImageD& yh = *s.y_hat;
    if (!x.same_dims(yh))
      throw ModelError("moment_report: x/yhat dimension mismatch");
    ImageD r(x.width, x.height);
    for (std::size_t i = 0; i < r.v.size(); ++i) r.v[i] = x.v[i] - yh.v[i];
    for (const double v : r.v) global_sum += v;
    global_n += static_cast<std::int64_t>(r.v.size());

    const std::vector<Patch> ps =
        patches_for_image(x, spec, patches_per_image, rng);
    for (const Patch& p : ps) {
      patch_m1.push_back(patch_mean(r, p));
      const double var_r = patch_var_unbiased(r, p);
      patch_m2.push_back(var_r - (k * patch_mean(yh, p) + epsilon));
      if (s.truth)
        patch_m2_truth.push_back(var_r - (k * patch_mean(*s.truth, p) + epsilon));
      else
        all_truth = false;
      patch_cov_v.push_back(patch_cov(r, yh, p));
    }
  }

  rep.n_patches = static_cast<std::int64_t>(patch_m2.size());
  rep.m1 = global_sum / static_cast<double>(global_n);
  rep.m2 = mean_of(patch_m2);
  rep.cov = mean_of(patch_cov_v);

  Rng boot_rng(seed, stream_tag("moment_boot"));
  rep.m1_se = bootstrap_se(patch_m1, boot_rng, n_boot);
  rep.m2_se = bootstrap_se(patch_m2, boot_rng, n_boot);
  rep.cov_se = bootstrap_se(patch_cov_v, boot_rng, n_boot);
  rep.has_truth = all_truth && !patch_m2_truth.empty();
  if (rep.has_truth) {
    rep.m2_truth = mean_of(patch_m2_truth);
    rep.m2_truth_se = bootstrap_se(patch_m2_truth, boot_rng, n_boot);
  }
  return rep;
}

BiasReport bias_report(const std::vector<EvalSample>& data, double k,
                       const PatchSpec& spec, int patches_per_image,
                       std::uint64_t seed, int n_boot) {
  if (data.empty()) throw ConfigError("bias_report: no data");
  if (!(k > 0.0)) throw ConfigError("bias_report: k must be > 0");
  BiasReport rep;
  rep.k_used = k;

  Rng rng(seed, stream_tag("bias_patches"));
  std::vector<double> patch_var_yhat, patch_cov_v;
  double lhs_sum = 0.0;
  std::int64_t lhs_n = 0;

  for (const EvalSample& s : data) {
    if (!s.truth) throw ConfigError("bias_report: truth images required");
    const ImageD& x = *s.x;
    const ImageD& yh = *s.y_hat;
    const ImageD& y = *s.truth;
    for (std::size_t i = 0; i < yh.v.size(); ++i) lhs_sum += yh.v[i] - y.v[i];
    lhs_n += static_cast<std::int64_t>(yh.v.size());

    ImageD r(x.width, x.height);
    for (std::size_t i = 0; i < r.v.size(); ++i) r.v[i] = x.v[i] - yh.v[i];
    const std::vector<Patch> ps =
        patches_for_image(x, spec, patches_per_image, rng);
    for (const Patch& p : ps) {
      patch_var_yhat.push_back(patch_var_unbiased(yh, p));
      patch_cov_v.push_back(patch_cov(r, yh, p));
    }
  }

  rep.n_patches = static_cast<std::int64_t>(patch_var_yhat.size());
  rep.lhs = lhs_sum / static_cast<double>(lhs_n);
  rep.var_yhat_mean = mean_of(patch_var_yhat);
  rep.rhs = -rep.var_yhat_mean / k;
  rep.gap = std::fabs(rep.lhs - rep.rhs);
  rep.cov_premise = mean_of(patch_cov_v);

  Rng boot_rng(seed, stream_tag("bias_boot"));
  std::vector<double> boot_means;
  bootstrap_se(patch_var_yhat, boot_rng, n_boot, &boot_means);
  std::vector<double> gaps;
  gaps.reserve(boot_means.size());
  for (const double vm : boot_means) gaps.push_back(std::fabs(rep.lhs + vm / k));
  const double gmean = mean_of(gaps);
  double gvar = 0.0;
  for (double gq : gaps) gvar += (gq - gmean) * (gq - gmean);
  rep.gap_se = std::sqrt(gvar / static_cast<double>(gaps.size() - 1));
  rep.gap_ci_lo = percentile(gaps, 0.025);
  rep.gap_ci_hi = percentile(gaps, 0.975);
  rep.cov_se = bootstrap_se(patch_cov_v, boot_rng, n_boot);
  return rep;
}

PiSummary consistency_summary(const std::vector<EvalSample>& data, double k,
                              double epsilon, const PatchSpec& spec,
                              int patches_per_image, std::uint64_t seed,
                              int n_bins, std::vector<double>* raw_pi) {
  if (data.empty()) throw ConfigError("consistency_summary: no data");
  PvmcState state{k, epsilon, 0.0};
  Rng rng(seed, stream_tag("pi_patches"));
  std::vector<double> pis;
  for (const EvalSample& s : data) {
    const std::vector<Patch> ps =
        patches_for_image(*s.x, spec, patches_per_image, rng);
    for (const Patch& p : ps)
      pis.push_back(consistency_ratio_value(*s.x, *s.y_hat, p, state));
  }

  PiSummary sum;
  sum.n = static_cast<std::int64_t>(pis.size());
  sum.median = percentile(pis, 0.5);
  sum.q25 = percentile(pis, 0.25);
  sum.q75 = percentile(pis, 0.75);
  std::vector<double> dev;
  dev.reserve(pis.size());
  for (double pi : pis) dev.push_back(std::fabs(pi - 1.0));
  sum.median_abs_dev_from_one = percentile(dev, 0.5);

  const double hi = std::max(2.0, percentile(pis, 0.99));
  sum.hist_edges.resize(static_cast<std::size_t>(n_bins) + 1);
  sum.hist_counts.assign(static_cast<std::size_t>(n_bins), 0);
  for (int i = 0; i <= n_bins; ++i)
    sum.hist_edges[i] = hi * static_cast<double>(i) / n_bins;
  for (double pi : pis) {
    int b = static_cast<int>(pi / hi * n_bins);
    b = std::clamp(b, 0, n_bins - 1);
    ++sum.hist_counts[static_cast<std::size_t>(b)];
  }
  if (raw_pi) *raw_pi = std::move(pis);
  return sum;
}

QualityReport quality_report(const std::vector<EvalSample>& data) {
  if (data.empty()) throw ConfigError("quality_report: no data");
  QualityReport rep;
  double pa = 0.0, sa = 0.0;
  for (const EvalSample& s : data) {
    if (!s.target) throw ConfigError("quality_report: target images required");
    const double range = grid_max(*s.target);
    const double p = psnr(*s.y_hat, *s.target, range);
    const double q = ssim(*s.y_hat, *s.target, range);
    rep.psnr_per_image.push_back(p);
    rep.ssim_per_image.push_back(q);
    rep.data_range_per_image.push_back(range);
    pa += p;
    sa += q;
  }
  rep.psnr_mean = pa / static_cast<double>(data.size());
  rep.ssim_mean = sa / static_cast<double>(data.size());
  return rep;
}

void write_histogram_csv(const std::string& path, const PiSummary& s) {
  std::ofstream f(path);
  if (!f) throw IoError("write_histogram_csv: cannot open " + path);
  f << "bin_low,bin_high,count\n";
  f.precision(12);
  for (std::size_t i = 0; i < s.hist_counts.size(); ++i)
    f << s.hist_edges[i] << ',' << s.hist_edges[i + 1] << ','
      << s.hist_counts[i] << '\n';
}

}  // namespace pvmc
