#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pvmc/image.hpp"
#include "pvmc/rng.hpp"

namespace pvmc {

enum class PhantomKind { uniform, disks, checker, lesion };
enum class Kernel { delta, box, gauss3 };

PhantomKind phantom_kind_from_string(const std::string& s);
Kernel kernel_from_string(const std::string& s);
std::string to_string(PhantomKind k);
std::string to_string(Kernel k);

/// True activity map lambda_i (arbitrary activity units, all >= 0).
struct Phantom {
  ImageD activity;
  std::uint64_t id = 0;
};

/// Reconstruction weights w_ij and correction factors c_j. One LOR site per
/// voxel on a toroidal grid; each voxel couples to `lors_per_voxel` LORs in
/// its neighbourhood. Weights are normalised to sum to 1 per voxel.
struct SystemModel {
  int width = 0;
  int height = 0;
  int num_lors = 0;
  std::vector<std::vector<std::pair<int, double>>> weights;  // voxel -> (lor, w)
  std::vector<double> corrections;                           // per LOR, c_j > 0
  std::uint64_t id = 0;
};

struct CountRealization {
  std::vector<std::int64_t> counts;  // per LOR
  std::uint64_t seed = 0;
};

struct Provenance {
  std::uint64_t phantom_id = 0;
  std::uint64_t system_id = 0;
  std::uint64_t seed = 0;
};

struct ReconImage {
  ImageD values;
  Provenance provenance;
};

/// Poisson slope statistics: per-voxel ratio sum(w^2 c^2)/sum(w c) and its
/// spread across voxels.
struct KReport {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  double max_rel_spread = 0.0;  // max |k_i - mean| / mean
  std::vector<double> per_voxel;
};

Phantom make_phantom(PhantomKind kind, int width, int height,
                     double base_activity, std::uint64_t seed);

SystemModel make_system(int width, int height, int lors_per_voxel,
                        Kernel kernel, double correction_spread,
                        std::uint64_t seed);

KReport analytic_k(const SystemModel& system);

/// Projection of activity onto LOR space: lambda_j = sum_i w_ij lambda_i.
std::vector<double> forward_project(const Phantom& phantom,
                                    const SystemModel& system);

/// N_j ~ Poisson(dose_scale * lambda_j), independent per LOR.
CountRealization sample_counts(const Phantom& phantom,
                               const SystemModel& system, double dose_scale,
                               std::uint64_t seed);

/// y_i = sum_j w_ij c_j N_j. Exact weighted sum, no thresholding.
ReconImage reconstruct(const CountRealization& counts,
                       const SystemModel& system);

/// Noise-free reconstruction at unit dose: sum_j w_ij c_j lambda_j. This is
/// E[reconstruct(sample_counts(...))/dose] and serves as the oracle target.
ImageD expected_recon(const Phantom& phantom, const SystemModel& system);

struct DatasetPair {
  ImageD noisy;    // low-dose reconstruction / low_dose
  ImageD target;   // full-dose reconstruction / full_dose
  ImageD truth;    // noise-free reconstruction (oracle, synthetic only)
  std::uint64_t phantom_seed = 0;
  std::uint64_t low_seed = 0;
  std::uint64_t full_seed = 0;
};

struct DatasetConfig {
  PhantomKind phantom_kind = PhantomKind::lesion;
  int width = 64;
  int height = 64;
  double base_activity = 5.0;
  Kernel kernel = Kernel::delta;
  int lors_per_voxel = 1;
  double correction_spread = 0.0;
  double low_dose = 1.0;
  double full_dose = 100.0;
  int n_train = 40;
  int n_test = 20;
  std::uint64_t seed = 3407;
};

struct Dataset {
  DatasetConfig config;
  SystemModel system;
  std::vector<DatasetPair> train;
  std::vector<DatasetPair> test;
  double analytic_k = 0.0;      // Poisson slope of the system (count units)
  double input_slope = 0.0;     // slope of the stored noisy images:
                                // analytic_k / low_dose
  double k_spread = 0.0;        // max relative per-voxel spread
};

/// Paired low/full-dose reconstructions of per-pair phantom realizations.
/// Both images are divided by their dose so they share the activity scale.
Dataset make_dataset(const DatasetConfig& config);

}  // namespace pvmc
