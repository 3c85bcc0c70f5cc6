#pragma once

#include "pvmc/image.hpp"

namespace pvmc {

/// Peak signal-to-noise ratio in dB. Identical images yield +infinity
/// (serialized as the string "inf" in reports).
double psnr(const ImageD& a, const ImageD& b, double data_range);

/// Structural similarity: 11x11 Gaussian window (sigma 1.5), k1 = 0.01,
/// k2 = 0.03, mean over valid window positions.
double ssim(const ImageD& a, const ImageD& b, double data_range);

}  // namespace pvmc
