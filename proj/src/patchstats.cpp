#include "pvmc/patchstats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "pvmc/errors.hpp"

namespace pvmc {

std::vector<Patch> sample_patches(int width, int height, const PatchSpec& spec,
                                  Rng& rng, int n_images) {
  if (spec.sx > width || spec.sy > height)
    throw ConfigError("sample_patches: patch larger than image");
  if (spec.sx < 1 || spec.sy < 1 || spec.count < 1)
    throw ConfigError("sample_patches: invalid patch spec");
  if (n_images < 1) throw ConfigError("sample_patches: n_images must be >= 1");

  const int ny = height - spec.sy + 1;
  const int nx = width - spec.sx + 1;
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) {
    Patch p;
    p.image_index =
        n_images == 1 ? 0 : static_cast<int>(rng.uniform_int(n_images));
    p.y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(ny)));
    p.x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(nx)));
    p.sy = spec.sy;
    p.sx = spec.sx;
    out.push_back(p);
  }
  return out;
}

double patch_mean(const ImageD& z, const Patch& p) {
  double s = 0.0;
  for (int y = p.y0; y < p.y0 + p.sy; ++y)
    for (int x = p.x0; x < p.x0 + p.sx; ++x) s += z.at(y, x);
  return s / static_cast<double>(p.area());
}

double patch_var_unbiased(const ImageD& z, const Patch& p) {
  const int s = p.area();
  if (s < 2) throw ConfigError("patch_var_unbiased: need S >= 2");
  const double m = patch_mean(z, p);
  double acc = 0.0;
  for (int y = p.y0; y < p.y0 + p.sy; ++y)
    for (int x = p.x0; x < p.x0 + p.sx; ++x) {
      const double d = z.at(y, x) - m;
      acc += d * d;
    }
  return acc / static_cast<double>(s - 1);
}

double patch_cov(const ImageD& a, const ImageD& b, const Patch& p) {
  const int s = p.area();
  if (s < 2) throw ConfigError("patch_cov: need S >= 2");
  const double ma = patch_mean(a, p);
  const double mb = patch_mean(b, p);
  double acc = 0.0;
  for (int y = p.y0; y < p.y0 + p.sy; ++y)
    for (int x = p.x0; x < p.x0 + p.sx; ++x)
      acc += (a.at(y, x) - ma) * (b.at(y, x) - mb);
  return acc / static_cast<double>(s - 1);
}

namespace {

struct PatchTerms {
  double rbar, var_r, ybar, denom, pi;
};

PatchTerms patch_terms(const ImageD& x, const ImageD& y_hat, const Patch& p,
                       const PvmcState& state) {
  PatchTerms t{};
  double sr = 0.0, sy = 0.0;
  for (int y = p.y0; y < p.y0 + p.sy; ++y)
    for (int xi = p.x0; xi < p.x0 + p.sx; ++xi) {
      sr += x.at(y, xi) - y_hat.at(y, xi);
      sy += y_hat.at(y, xi);
    }
  const double s = static_cast<double>(p.area());
  t.rbar = sr / s;
  t.ybar = sy / s;
  double acc = 0.0;
  for (int y = p.y0; y < p.y0 + p.sy; ++y)
    for (int xi = p.x0; xi < p.x0 + p.sx; ++xi) {
      const double d = (x.at(y, xi) - y_hat.at(y, xi)) - t.rbar;
      acc += d * d;
    }
  t.var_r = acc / (s - 1.0);
  t.denom = state.k * t.ybar + state.epsilon;
  t.pi = t.var_r / t.denom;
  return t;
}

}  // namespace

double consistency_ratio_value(const ImageD& x, const ImageD& y_hat,
                               const Patch& p, const PvmcState& state) {
  return patch_terms(x, y_hat, p, state).pi;
}

double pvmc_loss_value(const std::vector<const ImageD*>& x,
                       const std::vector<const ImageD*>& y_hat,
                       const std::vector<Patch>& patches,
                       const PvmcState& state) {
  if (patches.empty()) throw ConfigError("pvmc_loss_value: no patches");
  double acc = 0.0;
  for (const Patch& p : patches) {
    const double pi =
        patch_terms(*x[p.image_index], *y_hat[p.image_index], p, state).pi;
    acc += std::fabs(pi - 1.0);
  }
  return acc / static_cast<double>(patches.size());
}

std::vector<double> pvmc_grad_analytic(const ImageD& x, const ImageD& y_hat,
                                       const Patch& p, const PvmcState& state) {
  const PatchTerms t = patch_terms(x, y_hat, p, state);
  const double s = static_cast<double>(p.area());
  const double sgn = t.pi > 1.0 ? 1.0 : (t.pi < 1.0 ? -1.0 : 0.0);
  std::vector<double> g;
  g.reserve(static_cast<std::size_t>(p.area()));
  const double d2 = t.denom * t.denom;
  for (int y = p.y0; y < p.y0 + p.sy; ++y)
    for (int xi = p.x0; xi < p.x0 + p.sx; ++xi) {
      const double r = x.at(y, xi) - y_hat.at(y, xi);
      const double dn = -2.0 * (r - t.rbar) / (s - 1.0);  // dVar_p(r)/dyhat_k
      g.push_back(sgn * (dn * t.denom - state.k * t.var_r / s) / d2);
    }
  return g;
}

double pvmc_grad_k_analytic(const ImageD& x, const ImageD& y_hat,
                            const Patch& p, const PvmcState& state) {
  const PatchTerms t = patch_terms(x, y_hat, p, state);
  const double sgn = t.pi > 1.0 ? 1.0 : (t.pi < 1.0 ? -1.0 : 0.0);
  return sgn * (-t.var_r * t.ybar) / (t.denom * t.denom);
}

std::vector<ProfileRow> grad_magnitude_profile(
    const std::vector<const ImageD*>& x, const std::vector<const ImageD*>& y_hat,
    const PvmcState& state, const PatchSpec& spec, int patches_per_image,
    int n_bins, Rng& rng) {
  if (x.size() != y_hat.size() || x.empty())
    throw ConfigError("grad_magnitude_profile: image list mismatch");
  if (n_bins < 1) throw ConfigError("grad_magnitude_profile: n_bins >= 1");

  struct Sample {
    double ybar, mean_abs_grad;
  };
  std::vector<Sample> samples;
  PatchSpec per_image = spec;
  per_image.count = patches_per_image;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const ImageD& xi = *x[i];
    const ImageD& yi = *y_hat[i];
    std::vector<Patch> patches =
        sample_patches(xi.width, xi.height, per_image, rng);
    for (const Patch& p : patches) {
      const double ybar = patch_mean(yi, p);
      if (!(ybar > 0.0)) continue;  // log binning needs positive means
      const std::vector<double> g = pvmc_grad_analytic(xi, yi, p, state);
      double s = 0.0;
      for (double v : g) s += std::fabs(v);
      samples.push_back({ybar, s / static_cast<double>(g.size())});
    }
  }
  if (samples.empty())
    throw ModelError("grad_magnitude_profile: no usable patches");

  double lo = samples[0].ybar, hi = samples[0].ybar;
  for (const auto& smp : samples) {
    lo = std::min(lo, smp.ybar);
    hi = std::max(hi, smp.ybar);
  }
  const double llo = std::log(lo), lhi = std::log(hi * (1.0 + 1e-12));
  const double width = (lhi - llo) / n_bins;

  std::vector<ProfileRow> rows(static_cast<std::size_t>(n_bins));
  std::vector<double> sum_y(rows.size(), 0.0), sum_g(rows.size(), 0.0);
  for (int b = 0; b < n_bins; ++b) {
    rows[b].bin_low = std::exp(llo + b * width);
    rows[b].bin_high = std::exp(llo + (b + 1) * width);
  }
  for (const auto& smp : samples) {
    int b = static_cast<int>((std::log(smp.ybar) - llo) / width);
    b = std::clamp(b, 0, n_bins - 1);
    sum_y[b] += smp.ybar;
    sum_g[b] += smp.mean_abs_grad;
    ++rows[b].n_samples;
  }
  for (std::size_t b = 0; b < rows.size(); ++b) {
    if (rows[b].n_samples > 0) {
      rows[b].mean_intensity = sum_y[b] / rows[b].n_samples;
      rows[b].mean_abs_grad = sum_g[b] / rows[b].n_samples;
    }
  }
  return rows;
}

void write_profile_csv(const std::string& path,
                       const std::vector<ProfileRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("write_profile_csv: cannot open " + path);
  f << "bin_low,bin_high,mean_intensity,mean_abs_grad,n_samples\n";
  f.precision(12);
  for (const auto& r : rows)
    f << r.bin_low << ',' << r.bin_high << ',' << r.mean_intensity << ','
      << r.mean_abs_grad << ',' << r.n_samples << '\n';
}

double fit_loglog_slope(const std::vector<ProfileRow>& rows,
                        std::int64_t min_count) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.n_samples < min_count || !(r.mean_abs_grad > 0.0)) continue;
    const double lx = std::log(r.mean_intensity);
    const double ly = std::log(r.mean_abs_grad);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  if (n < 2) throw ModelError("fit_loglog_slope: fewer than two usable bins");
  const double denom = n * sxx - sx * sx;
  return (n * sxy - sx * sy) / denom;
}

}  // namespace pvmc
