#include "pvmc/metrics.hpp"

#include <array>
#include <cmath>
#include <limits>

#include "pvmc/errors.hpp"

namespace pvmc {

double psnr(const ImageD& a, const ImageD& b, double data_range) {
  if (!a.same_dims(b)) throw UsageError("psnr: image dimensions differ");
  if (!(data_range > 0.0)) throw UsageError("psnr: data_range must be > 0");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const double d = a.v[i] - b.v[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.v.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

namespace {

constexpr int kWin = 11;

std::array<double, kWin * kWin> gaussian_window() {
  std::array<double, kWin * kWin> w{};
  const double sigma = 1.5;
  const int c = kWin / 2;
  double sum = 0.0;
  for (int y = 0; y < kWin; ++y)
    for (int x = 0; x < kWin; ++x) {
      const double d2 = (y - c) * (y - c) + (x - c) * (x - c);
      w[y * kWin + x] = std::exp(-d2 / (2.0 * sigma * sigma));
      sum += w[y * kWin + x];
    }
  for (auto& v : w) v /= sum;
  return w;
}

}  // namespace

double ssim(const ImageD& a, const ImageD& b, double data_range) {
  if (!a.same_dims(b)) throw UsageError("ssim: image dimensions differ");
  if (!(data_range > 0.0)) throw UsageError("ssim: data_range must be > 0");
  if (a.width < kWin || a.height < kWin)
    throw UsageError("ssim: image smaller than the 11x11 window");

  static const std::array<double, kWin * kWin> win = gaussian_window();
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);

  double acc = 0.0;
  std::int64_t count = 0;
  for (int y0 = 0; y0 + kWin <= a.height; ++y0) {
    for (int x0 = 0; x0 + kWin <= a.width; ++x0) {
      double mu_a = 0.0, mu_b = 0.0;
      for (int y = 0; y < kWin; ++y)
        for (int x = 0; x < kWin; ++x) {
          const double w = win[y * kWin + x];
          mu_a += w * a.at(y0 + y, x0 + x);
          mu_b += w * b.at(y0 + y, x0 + x);
        }
      double va = 0.0, vb = 0.0, cov = 0.0;
      for (int y = 0; y < kWin; ++y)
        for (int x = 0; x < kWin; ++x) {
          const double w = win[y * kWin + x];
          const double da = a.at(y0 + y, x0 + x) - mu_a;
          const double db = b.at(y0 + y, x0 + x) - mu_b;
          va += w * da * da;
          vb += w * db * db;
          cov += w * da * db;
        }
      const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
      const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2);
      acc += num / den;
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

}  // namespace pvmc
