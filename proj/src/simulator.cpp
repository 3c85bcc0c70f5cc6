#include "pvmc/simulator.hpp"

#include <algorithm>
#include <cmath>

#include "pvmc/errors.hpp"
#include "pvmc/parallel.hpp"

namespace pvmc {

namespace {

constexpr double kPi = 3.14159265358979323846;

int wrap(int a, int n) { return ((a % n) + n) % n; }

// Neighbourhood offsets ordered by squared distance, then scan order.
// The first 1 is the centre, the first 9 the 3x3 block.
std::vector<std::pair<int, int>> neighbourhood_offsets(int count) {
  std::vector<std::pair<int, int>> all;
  const int r = 4;  // enough for the supported lors_per_voxel range
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) all.emplace_back(dy, dx);
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    const int da = a.first * a.first + a.second * a.second;
    const int db = b.first * b.first + b.second * b.second;
    return da < db;
  });
  all.resize(static_cast<std::size_t>(count));
  return all;
}

void smooth_background(ImageD& img, double base, Rng& rng) {
  // Low-frequency cosine mixture, scaled so activity stays in
  // base * [0.30, 0.80].
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    Wave w;
    w.fx = static_cast<double>(1 + rng.uniform_int(2));
    w.fy = static_cast<double>(1 + rng.uniform_int(2));
    w.phase = rng.uniform(0.0, 2.0 * kPi);
    w.amp = rng.uniform(0.5, 1.0);
    waves.push_back(w);
  }
  double amp_sum = 0.0;
  for (const auto& w : waves) amp_sum += w.amp;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double s = 0.0;
      for (const auto& w : waves) {
        s += w.amp * std::cos(2.0 * kPi *
                                  (w.fx * x / img.width + w.fy * y / img.height) +
                              w.phase);
      }
      s /= amp_sum;  // in [-1, 1]
      img.at(y, x) = base * (0.55 + 0.25 * s);
    }
  }
}

void add_ellipse(ImageD& img, double cx, double cy, double ax, double ay,
                 double theta, double value) {
  const double ct = std::cos(theta), st = std::sin(theta);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = (ct * dx + st * dy) / ax;
      const double v = (-st * dx + ct * dy) / ay;
      const double rho = std::sqrt(u * u + v * v);
      if (rho >= 1.0) continue;
      // flat core with a cosine taper from rho = 0.7 to the rim
      double f = 1.0;
      if (rho > 0.7) f = 0.5 * (1.0 + std::cos(kPi * (rho - 0.7) / 0.3));
      img.at(y, x) = std::max(img.at(y, x), value * f);
    }
  }
}

}  // namespace

PhantomKind phantom_kind_from_string(const std::string& s) {
  if (s == "uniform") return PhantomKind::uniform;
  if (s == "disks") return PhantomKind::disks;
  if (s == "checker") return PhantomKind::checker;
  if (s == "lesion") return PhantomKind::lesion;
  throw ConfigError("unknown phantom kind: " + s);
}

Kernel kernel_from_string(const std::string& s) {
  if (s == "delta") return Kernel::delta;
  if (s == "box3" || s == "box") return Kernel::box;
  if (s == "gauss3") return Kernel::gauss3;
  throw ConfigError("unknown kernel: " + s);
}

std::string to_string(PhantomKind k) {
  switch (k) {
    case PhantomKind::uniform: return "uniform";
    case PhantomKind::disks: return "disks";
    case PhantomKind::checker: return "checker";
    case PhantomKind::lesion: return "lesion";
  }
  return "?";
}

std::string to_string(Kernel k) {
  switch (k) {
    case Kernel::delta: return "delta";
    case Kernel::box: return "box3";
    case Kernel::gauss3: return "gauss3";
  }
  return "?";
}

Phantom make_phantom(PhantomKind kind, int width, int height,
                     double base_activity, std::uint64_t seed) {
  if (width < 8 || height < 8)
    throw ConfigError("make_phantom: width and height must be >= 8");
  if (!(base_activity > 0.0))
    throw ConfigError("make_phantom: base_activity must be > 0");

  Phantom ph;
  ph.activity = ImageD(width, height, 0.0);
  ph.id = stream_tag("phantom", static_cast<std::uint64_t>(kind), seed);
  Rng rng(seed, stream_tag("make_phantom", static_cast<std::uint64_t>(kind)));

  switch (kind) {
    case PhantomKind::uniform: {
      std::fill(ph.activity.v.begin(), ph.activity.v.end(), base_activity);
      break;
    }
    case PhantomKind::disks: {
      std::fill(ph.activity.v.begin(), ph.activity.v.end(),
                0.3 * base_activity);
      const int n = 3 + static_cast<int>(rng.uniform_int(3));
      for (int i = 0; i < n; ++i) {
        const double cx = rng.uniform(0.0, width);
        const double cy = rng.uniform(0.0, height);
        const double r = rng.uniform(width / 10.0, width / 4.0);
        const double val = base_activity * rng.uniform(0.8, 1.6);
        for (int y = 0; y < height; ++y)
          for (int x = 0; x < width; ++x) {
            const double dx = x - cx, dy = y - cy;
            if (dx * dx + dy * dy < r * r)
              ph.activity.at(y, x) = std::max(ph.activity.at(y, x), val);
          }
      }
      break;
    }
    case PhantomKind::checker: {
      const int tile = 8;
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          ph.activity.at(y, x) = (((x / tile) + (y / tile)) % 2 == 0)
                                     ? base_activity
                                     : 0.25 * base_activity;
      break;
    }
    case PhantomKind::lesion: {
      smooth_background(ph.activity, base_activity, rng);
      const int n = 1 + static_cast<int>(rng.uniform_int(4));
      for (int i = 0; i < n; ++i) {
        const double margin = width / 8.0;
        const double cx = rng.uniform(margin, width - margin);
        const double cy = rng.uniform(margin, height - margin);
        const double ax = rng.uniform(width / 12.0, width / 5.0);
        const double ay = rng.uniform(height / 12.0, height / 5.0);
        const double theta = rng.uniform(0.0, kPi);
        const double amp = rng.uniform(1.8, 3.4);
        add_ellipse(ph.activity, cx, cy, ax, ay, theta, amp * base_activity);
      }
      break;
    }
  }
  return ph;
}

SystemModel make_system(int width, int height, int lors_per_voxel,
                        Kernel kernel, double correction_spread,
                        std::uint64_t seed) {
  if (lors_per_voxel < 1)
    throw ConfigError("make_system: lors_per_voxel must be >= 1");
  if (lors_per_voxel > 49)
    throw ConfigError("make_system: lors_per_voxel must be <= 49");
  if (correction_spread < 0.0 || correction_spread > 0.5)
    throw ConfigError("make_system: correction_spread must be in [0, 0.5]");
  if (kernel == Kernel::delta && lors_per_voxel != 1)
    throw ConfigError("make_system: delta kernel requires lors_per_voxel == 1");
  if (kernel == Kernel::gauss3 && lors_per_voxel != 9)
    throw ConfigError("make_system: gauss3 kernel requires lors_per_voxel == 9");

  SystemModel sys;
  sys.width = width;
  sys.height = height;
  sys.num_lors = width * height;
  sys.id = stream_tag("system", static_cast<std::uint64_t>(kernel), seed);
  sys.weights.resize(static_cast<std::size_t>(sys.num_lors));

  const auto offsets = neighbourhood_offsets(lors_per_voxel);
  std::vector<double> w(offsets.size(), 0.0);
  switch (kernel) {
    case Kernel::delta:
      w[0] = 1.0;
      break;
    case Kernel::box:
      for (auto& wi : w) wi = 1.0 / static_cast<double>(lors_per_voxel);
      break;
    case Kernel::gauss3: {
      // 3x3 Gaussian, sigma chosen so the slope sum(w^2) sits near the
      // k_init = 0.8 regime typical of lightly filtered reconstructions.
      const double sigma = 0.42;
      double s = 0.0;
      for (std::size_t i = 0; i < offsets.size(); ++i) {
        const double d2 = offsets[i].first * offsets[i].first +
                          offsets[i].second * offsets[i].second;
        w[i] = std::exp(-d2 / (2.0 * sigma * sigma));
        s += w[i];
      }
      for (auto& wi : w) wi /= s;
      break;
    }
  }

  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      auto& entry = sys.weights[static_cast<std::size_t>(y) * width + x];
      entry.reserve(offsets.size());
      for (std::size_t i = 0; i < offsets.size(); ++i) {
        const int ly = wrap(y + offsets[i].first, height);
        const int lx = wrap(x + offsets[i].second, width);
        entry.emplace_back(ly * width + lx, w[i]);
      }
    }
  }

  sys.corrections.resize(static_cast<std::size_t>(sys.num_lors), 1.0);
  if (correction_spread > 0.0) {
    Rng rng(seed, stream_tag("corrections"));
    for (auto& c : sys.corrections)
      c = rng.uniform(1.0 - correction_spread, 1.0 + correction_spread);
  }
  return sys;
}

KReport analytic_k(const SystemModel& system) {
  KReport rep;
  rep.per_voxel.resize(system.weights.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < system.weights.size(); ++i) {
    double num = 0.0, den = 0.0;
    for (const auto& [lor, w] : system.weights[i]) {
      const double wc = w * system.corrections[static_cast<std::size_t>(lor)];
      num += wc * wc;
      den += wc;
    }
    if (den <= 0.0) throw ModelError("analytic_k: zero weight sum for a voxel");
    rep.per_voxel[i] = num / den;
    sum += rep.per_voxel[i];
    if (i == 0) {
      rep.min = rep.max = rep.per_voxel[i];
    } else {
      rep.min = std::min(rep.min, rep.per_voxel[i]);
      rep.max = std::max(rep.max, rep.per_voxel[i]);
    }
  }
  rep.mean = sum / static_cast<double>(rep.per_voxel.size());
  rep.max_rel_spread =
      std::max(rep.max - rep.mean, rep.mean - rep.min) / rep.mean;
  return rep;
}

std::vector<double> forward_project(const Phantom& phantom,
                                    const SystemModel& system) {
  if (phantom.activity.width != system.width ||
      phantom.activity.height != system.height)
    throw ModelError("forward_project: phantom/system dimension mismatch");
  std::vector<double> proj(static_cast<std::size_t>(system.num_lors), 0.0);
  for (std::size_t i = 0; i < system.weights.size(); ++i) {
    const double act = phantom.activity.v[i];
    if (act == 0.0) continue;
    for (const auto& [lor, w] : system.weights[i])
      proj[static_cast<std::size_t>(lor)] += w * act;
  }
  return proj;
}

CountRealization sample_counts(const Phantom& phantom,
                               const SystemModel& system, double dose_scale,
                               std::uint64_t seed) {
  if (!(dose_scale > 0.0))
    throw ConfigError("sample_counts: dose_scale must be > 0");
  const std::vector<double> proj = forward_project(phantom, system);
  CountRealization cr;
  cr.seed = seed;
  cr.counts.resize(proj.size());
  Rng rng(seed, stream_tag("counts"));
  for (std::size_t j = 0; j < proj.size(); ++j)
    cr.counts[j] = rng.poisson(dose_scale * proj[j]);
  return cr;
}

ReconImage reconstruct(const CountRealization& counts,
                       const SystemModel& system) {
  if (counts.counts.size() != static_cast<std::size_t>(system.num_lors))
    throw ModelError("reconstruct: counts/system LOR count mismatch");
  ReconImage img;
  img.values = ImageD(system.width, system.height, 0.0);
  img.provenance.system_id = system.id;
  img.provenance.seed = counts.seed;
  for (std::size_t i = 0; i < system.weights.size(); ++i) {
    double acc = 0.0;
    for (const auto& [lor, w] : system.weights[i])
      acc += w * system.corrections[static_cast<std::size_t>(lor)] *
             static_cast<double>(counts.counts[static_cast<std::size_t>(lor)]);
    img.values.v[i] = acc;
  }
  return img;
}

ImageD expected_recon(const Phantom& phantom, const SystemModel& system) {
  const std::vector<double> proj = forward_project(phantom, system);
  ImageD img(system.width, system.height, 0.0);
  for (std::size_t i = 0; i < system.weights.size(); ++i) {
    double acc = 0.0;
    for (const auto& [lor, w] : system.weights[i])
      acc += w * system.corrections[static_cast<std::size_t>(lor)] *
             proj[static_cast<std::size_t>(lor)];
    img.v[i] = acc;
  }
  return img;
}

Dataset make_dataset(const DatasetConfig& config) {
  if (config.n_train < 1 || config.n_test < 0)
    throw ConfigError("make_dataset: need n_train >= 1");
  if (!(config.low_dose > 0.0) || !(config.full_dose > 0.0))
    throw ConfigError("make_dataset: doses must be > 0");
  if (!(config.low_dose <= config.full_dose))
    throw ConfigError("make_dataset: low_dose must be <= full_dose");

  Dataset ds;
  ds.config = config;
  ds.system = make_system(config.width, config.height, config.lors_per_voxel,
                          config.kernel, config.correction_spread, config.seed);
  const KReport kr = analytic_k(ds.system);
  ds.analytic_k = kr.mean;
  ds.k_spread = kr.max_rel_spread;
  ds.input_slope = kr.mean / config.low_dose;

  const int total = config.n_train + config.n_test;
  std::vector<DatasetPair> pairs(static_cast<std::size_t>(total));
  // each pair derives its own RNG streams, so parallel generation is
  // bit-identical to serial
  parallel_for(total, [&](int index) {
    DatasetPair pair;
    Rng seeder(config.seed, stream_tag("pair", static_cast<std::uint64_t>(index)));
    pair.phantom_seed = seeder.next_u64();
    pair.low_seed = seeder.next_u64();
    pair.full_seed = seeder.next_u64();
    const Phantom ph = make_phantom(config.phantom_kind, config.width,
                                    config.height, config.base_activity,
                                    pair.phantom_seed);
    const CountRealization low =
        sample_counts(ph, ds.system, config.low_dose, pair.low_seed);
    const CountRealization full =
        sample_counts(ph, ds.system, config.full_dose, pair.full_seed);
    pair.noisy = reconstruct(low, ds.system).values;
    pair.target = reconstruct(full, ds.system).values;
    for (auto& v : pair.noisy.v) v /= config.low_dose;
    for (auto& v : pair.target.v) v /= config.full_dose;
    pair.truth = expected_recon(ph, ds.system);
    pairs[static_cast<std::size_t>(index)] = std::move(pair);
  });

  for (int i = 0; i < total; ++i) {
    if (i < config.n_train)
      ds.train.push_back(std::move(pairs[static_cast<std::size_t>(i)]));
    else
      ds.test.push_back(std::move(pairs[static_cast<std::size_t>(i)]));
  }
  return ds;
}

}  // namespace pvmc
