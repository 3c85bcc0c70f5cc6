#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pvmc/diagnostics.hpp"
#include "pvmc/simulator.hpp"

using namespace pvmc;

namespace {

struct OracleData {
  Dataset ds;
  std::vector<EvalSample> samples;  // yhat = noise-free truth
};

OracleData oracle_testbed(int side, int n_images, std::uint64_t seed) {
  DatasetConfig cfg;
  cfg.phantom_kind = PhantomKind::lesion;
  cfg.width = cfg.height = side;
  cfg.kernel = Kernel::delta;
  cfg.lors_per_voxel = 1;
  cfg.low_dose = 1.0;
  cfg.full_dose = 100.0;
  cfg.n_train = 1;
  cfg.n_test = n_images;
  cfg.seed = seed;
  OracleData o;
  o.ds = make_dataset(cfg);
  for (const auto& pair : o.ds.test) {
    EvalSample s;
    s.x = &pair.noisy;
    s.y_hat = &pair.truth;  // the oracle denoiser
    s.truth = &pair.truth;
    s.target = &pair.target;
    o.samples.push_back(s);
  }
  return o;
}

}  // namespace

TEST_CASE("percentile interpolates correctly") {
  CHECK(percentile({1.0, 2.0, 3.0, 4.0}, 0.5) == doctest::Approx(2.5));
  CHECK(percentile({5.0}, 0.5) == doctest::Approx(5.0));
  CHECK(percentile({1.0, 3.0}, 0.0) == doctest::Approx(1.0));
  CHECK(percentile({1.0, 3.0}, 1.0) == doctest::Approx(3.0));
}

TEST_CASE("zero-output net: m1 equals mean(x) exactly") {
  Rng rng(12, 0);
  ImageD x(16, 16);
  for (auto& v : x.v) v = rng.uniform(0.0, 4.0);
  ImageD zero(16, 16, 0.0);
  EvalSample s;
  s.x = &x;
  s.y_hat = &zero;
  PatchSpec spec;
  spec.sx = spec.sy = 8;
  const MomentReport rep = moment_report({s}, 0.8, 1e-6, spec, 50, 7, 200);
  CHECK(rep.m1 == grid_mean(x));
}

TEST_CASE("oracle denoiser passes the moment conditions within 3 SE") {
  // patch cover per image is kept well below 1 so patches are nearly
  // independent and the patch bootstrap SE is an honest error estimate
  const OracleData o = oracle_testbed(32, 60, 424242);
  PatchSpec spec;
  spec.sx = spec.sy = 8;
  const MomentReport rep =
      moment_report(o.samples, o.ds.input_slope, 1e-6, spec, 10, 99, 500);
  CHECK(rep.n_patches >= 500);
  CHECK(std::fabs(rep.m1) < 3.0 * rep.m1_se);
  CHECK(std::fabs(rep.m2) < 3.0 * rep.m2_se);
  CHECK(rep.has_truth);
  CHECK(std::fabs(rep.m2_truth) < 3.0 * rep.m2_truth_se);
}

TEST_CASE("constant-output model on a constant scene: bias identity is exact") {
  ImageD x(16, 16, 2.0), yh(16, 16, 2.0), y(16, 16, 2.0);
  EvalSample s;
  s.x = &x;
  s.y_hat = &yh;
  s.truth = &y;
  PatchSpec spec;
  spec.sx = spec.sy = 4;
  const BiasReport rep = bias_report({s}, 0.8, spec, 40, 5, 100);
  CHECK(rep.lhs == 0.0);
  CHECK(rep.rhs == 0.0);
  CHECK(rep.gap == 0.0);
}

TEST_CASE("bias report carries the covariance premise measurement") {
  const OracleData o = oracle_testbed(32, 40, 777);
  PatchSpec spec;
  spec.sx = spec.sy = 8;
  const BiasReport rep =
      bias_report(o.samples, o.ds.input_slope, spec, 10, 3, 400);
  // residual x - truth is pure noise, uncorrelated with the oracle output
  CHECK(std::fabs(rep.cov_premise) < 5.0 * rep.cov_se + 1e-9);
  CHECK(rep.gap_ci_hi >= rep.gap_ci_lo);
  CHECK(rep.n_patches == 400);
}

TEST_CASE("pi distribution: oracle concentrates near 1, identity near 0") {
  const OracleData o = oracle_testbed(32, 8, 9001);
  PatchSpec spec;
  spec.sx = spec.sy = 16;
  const PiSummary oracle =
      consistency_summary(o.samples, o.ds.input_slope, 1e-6, spec, 200, 13);
  CHECK(oracle.median > 0.8);
  CHECK(oracle.median < 1.2);

  std::vector<EvalSample> identity;
  for (const auto& pair : o.ds.test) {
    EvalSample s;
    s.x = &pair.noisy;
    s.y_hat = &pair.noisy;  // yhat = x, zero residual
    identity.push_back(s);
  }
  const PiSummary id_sum =
      consistency_summary(identity, o.ds.input_slope, 1e-6, spec, 200, 13);
  CHECK(id_sum.median < 0.05);
  CHECK(id_sum.median_abs_dev_from_one > 0.9);
}

TEST_CASE("quality report uses the per-image target range") {
  const OracleData o = oracle_testbed(32, 3, 5150);
  const QualityReport q = quality_report(o.samples);
  REQUIRE(q.psnr_per_image.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(q.data_range_per_image[i] ==
          doctest::Approx(grid_max(o.ds.test[i].target)));
    CHECK(q.ssim_per_image[i] <= 1.0);
    CHECK(std::isfinite(q.psnr_per_image[i]));
  }

  // identical pair reports the +inf sentinel
  EvalSample s;
  s.x = &o.ds.test[0].noisy;
  s.y_hat = &o.ds.test[0].target;
  s.target = &o.ds.test[0].target;
  const QualityReport qid = quality_report({s});
  CHECK(std::isinf(qid.psnr_per_image[0]));
  CHECK(qid.ssim_per_image[0] == 1.0);
}

TEST_CASE("histogram covers the sample and counts every patch") {
  const OracleData o = oracle_testbed(32, 4, 31);
  PatchSpec spec;
  spec.sx = spec.sy = 8;
  const PiSummary s =
      consistency_summary(o.samples, o.ds.input_slope, 1e-6, spec, 100, 20);
  std::int64_t total = 0;
  for (const std::int64_t c : s.hist_counts) total += c;
  CHECK(total == s.n);
  CHECK(s.hist_edges.size() == s.hist_counts.size() + 1);
}
