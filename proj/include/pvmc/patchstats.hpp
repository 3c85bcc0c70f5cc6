#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pvmc/image.hpp"
#include "pvmc/rng.hpp"
#include "pvmc/tensor.hpp"

namespace pvmc {

/// Rectangular voxel index block, fully inside the image.
struct Patch {
  int image_index = 0;
  int y0 = 0;
  int x0 = 0;
  int sy = 0;
  int sx = 0;
  int area() const { return sy * sx; }
};

struct PatchSpec {
  int sx = 16;
  int sy = 16;
  int count = 16;  // patches per batch
};

/// Learnable Poisson slope k (kept positive via exp reparameterization in
/// the trainer), stability constant epsilon, and loss weight lambda.
struct PvmcState {
  double k = 0.8;
  double epsilon = 1e-6;
  double lambda_weight = 1e-5;
};

/// Start coordinates uniform over all valid positions; image_index uniform
/// over [0, n_images).
std::vector<Patch> sample_patches(int width, int height, const PatchSpec& spec,
                                  Rng& rng, int n_images = 1);

double patch_mean(const ImageD& z, const Patch& p);

/// Unbiased (1/(S-1)) sample variance; requires S >= 2.
double patch_var_unbiased(const ImageD& z, const Patch& p);

double patch_cov(const ImageD& a, const ImageD& b, const Patch& p);

/// pi_p = Var_p(x - yhat) / (k * Mean_p(yhat) + eps).
double consistency_ratio_value(const ImageD& x, const ImageD& y_hat,
                               const Patch& p, const PvmcState& state);

/// (1/P) sum_p |pi_p - 1| over the given patches (plain value, no graph).
double pvmc_loss_value(const std::vector<const ImageD*>& x,
                       const std::vector<const ImageD*>& y_hat,
                       const std::vector<Patch>& patches,
                       const PvmcState& state);

/// Closed-form gradient of |pi_p - 1| w.r.t. every yhat_k in the patch:
///   sgn(pi_p - 1) * [ -2 (r_k - rbar) / (S-1) * (k ybar + eps)
///                     - k Var_p(r) / S ] / (k ybar + eps)^2
/// with the subgradient at pi_p = 1 defined as 0. Row-major patch order.
std::vector<double> pvmc_grad_analytic(const ImageD& x, const ImageD& y_hat,
                                       const Patch& p, const PvmcState& state);

/// Closed-form d|pi_p - 1|/dk = sgn(pi_p - 1) * (-Var_p(r) ybar) / (k ybar + eps)^2.
double pvmc_grad_k_analytic(const ImageD& x, const ImageD& y_hat,
                            const Patch& p, const PvmcState& state);

// ---------------------------------------------------------------------------
// autodiff route

/// Builds the PVMC loss as a graph over NCHW tensors (channel 0 is used).
/// Differentiable w.r.t. y_hat and k_pos. x is treated as data. When
/// stop_grad_mean is set, Mean_p(yhat) in the denominator is detached.
template <class T>
ad::Tensor<T> pvmc_loss(const ad::Tensor<T>& x, const ad::Tensor<T>& y_hat,
                        const std::vector<Patch>& patches,
                        const ad::Tensor<T>& k_pos, double epsilon,
                        bool stop_grad_mean = false) {
  if (x.shape() != y_hat.shape())
    throw ModelError("pvmc_loss: x and y_hat shapes differ");
  if (patches.empty()) throw ConfigError("pvmc_loss: no patches");
  const ad::Tensor<T> r = ad::sub(x, y_hat);
  ad::Tensor<T> acc;
  for (const Patch& p : patches) {
    const int s = p.area();
    if (s < 2) throw ConfigError("pvmc_loss: patch area must be >= 2");
    ad::Tensor<T> pr = ad::slice_patch(r, p.image_index, 0, p.y0, p.x0, p.sy, p.sx);
    ad::Tensor<T> rbar = ad::mean(pr);
    ad::Tensor<T> dev = ad::sub(pr, rbar);
    ad::Tensor<T> var_r =
        ad::scalar_mul(ad::sum(ad::square(dev)), 1.0 / (s - 1));
    ad::Tensor<T> py =
        ad::slice_patch(y_hat, p.image_index, 0, p.y0, p.x0, p.sy, p.sx);
    ad::Tensor<T> ybar = ad::mean(py);
    if (stop_grad_mean) ybar = ad::Tensor<T>::scalar(ybar.item());
    ad::Tensor<T> denom = ad::add_scalar(ad::mul(k_pos, ybar), epsilon);
    ad::Tensor<T> pi = ad::div(var_r, denom);
    ad::Tensor<T> term = ad::abs(ad::add_scalar(pi, -1.0));
    acc = acc.defined() ? ad::add(acc, term) : term;
  }
  return ad::scalar_mul(acc, 1.0 / static_cast<double>(patches.size()));
}

// ---------------------------------------------------------------------------
// gradient adaptivity profile

struct ProfileRow {
  double bin_low = 0.0;
  double bin_high = 0.0;
  double mean_intensity = 0.0;  // mean ybar_p in the bin
  double mean_abs_grad = 0.0;   // mean |dL_p/dyhat_k| in the bin
  std::int64_t n_samples = 0;   // patches in the bin (0 = empty, reported)
};

/// Bins patches of the (x, yhat) pairs by Mean_p(yhat) on a log scale and
/// reports the mean |gradient| per bin (empirical scaling curve for the
/// adaptivity law).
std::vector<ProfileRow> grad_magnitude_profile(
    const std::vector<const ImageD*>& x, const std::vector<const ImageD*>& y_hat,
    const PvmcState& state, const PatchSpec& spec, int patches_per_image,
    int n_bins, Rng& rng);

void write_profile_csv(const std::string& path,
                       const std::vector<ProfileRow>& rows);

/// Least-squares slope of log(mean_abs_grad) vs log(mean_intensity) over
/// rows with at least min_count samples.
double fit_loglog_slope(const std::vector<ProfileRow>& rows,
                        std::int64_t min_count = 100);

}  // namespace pvmc
