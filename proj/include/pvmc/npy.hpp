#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace pvmc {

/// Array loaded from a .npy file. Data is widened to double; the original
/// on-disk dtype is kept in `dtype` ("<f4" or "<f8").
struct NpyArray {
  std::vector<std::size_t> shape;
  std::string dtype;
  std::vector<double> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }
};

NpyArray npy_load(const std::string& path);

void npy_save(const std::string& path, const std::vector<std::size_t>& shape,
              const float* data);
void npy_save(const std::string& path, const std::vector<std::size_t>& shape,
              const double* data);

}  // namespace pvmc
