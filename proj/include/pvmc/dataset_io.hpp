#pragma once

#include <string>
#include <vector>

#include "pvmc/simulator.hpp"

namespace pvmc {

/// Writes dataset.json plus one float32 .npy per image under train/ and
/// test/. Returns the relative paths of every file written (for hashing).
std::vector<std::string> save_dataset(const Dataset& ds, const std::string& dir);

/// Loads a dataset directory. The system model is rebuilt deterministically
/// from the stored config.
Dataset load_dataset(const std::string& dir);

}  // namespace pvmc
