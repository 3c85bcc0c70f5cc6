#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pvmc/trainer.hpp"

using namespace pvmc;

namespace {

std::vector<DatasetPair> tiny_dataset(int n_pairs, int side,
                                      Kernel kernel = Kernel::delta,
                                      std::uint64_t seed = 3407) {
  DatasetConfig cfg;
  cfg.phantom_kind = PhantomKind::lesion;
  cfg.width = cfg.height = side;
  cfg.kernel = kernel;
  cfg.lors_per_voxel = kernel == Kernel::delta ? 1 : 9;
  cfg.low_dose = 1.0;
  cfg.full_dose = 100.0;
  cfg.n_train = n_pairs;
  cfg.n_test = 0;
  cfg.seed = seed;
  return make_dataset(cfg).train;
}

}  // namespace

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
  ad::Tensor<double> p(ad::Shape{4}, 1.5, true);
  p.grad();  // allocate zeros
  Adam<double> adam({p});
  for (int i = 0; i < 10; ++i) adam.step(0.1);
  for (double v : p.data()) CHECK(v == 1.5);
}

TEST_CASE("constant gradient drives |step| toward lr") {
  ad::Tensor<double> p(ad::Shape{1}, 0.0, true);
  Adam<double> adam({p});
  const double lr = 1e-2;
  double prev = p.data()[0];
  double step = 0.0;
  for (int i = 0; i < 400; ++i) {
    p.grad()[0] = 0.37;  // constant gradient
    adam.step(lr);
    step = std::fabs(p.data()[0] - prev);
    prev = p.data()[0];
    p.zero_grad();
  }
  CHECK(step == doctest::Approx(lr).epsilon(0.02));
}

TEST_CASE("adam minimizes a scalar quadratic to 1e-6 within 5k steps") {
  ad::Tensor<double> w(ad::Shape{1}, -4.0, true);
  Adam<double> adam({w});
  for (int i = 0; i < 5000; ++i) {
    auto loss = ad::scalar_mul(ad::square(ad::add_scalar(w, -3.0)), 0.5);
    ad::backward(loss);
    adam.step(1e-2);
    adam.zero_grad();
    if (std::fabs(w.data()[0] - 3.0) < 1e-7) break;
  }
  CHECK(std::fabs(w.data()[0] - 3.0) < 1e-6);
}

TEST_CASE("reduce-on-plateau halves lr after patience and respects the floor") {
  ReduceOnPlateau sched(0.5, 3, 1e-3);
  double lr = 0.8;
  lr = sched.update(10.0, lr);  // improvement
  CHECK(lr == 0.8);
  lr = sched.update(10.0, lr);
  lr = sched.update(10.0, lr);
  lr = sched.update(10.0, lr);  // third stale epoch triggers
  CHECK(lr == doctest::Approx(0.4));
  for (int i = 0; i < 40; ++i) lr = sched.update(10.0, lr);
  CHECK(lr >= 1e-3);
  CHECK(lr <= 1e-3 * 2.0 + 1e-12);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto pairs = tiny_dataset(6, 16);
  NetConfig net;
  net.depth = 2;
  net.channels = {4, 8};
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.lambda_weight = 1e-3;
  cfg.patches.sx = cfg.patches.sy = 8;
  cfg.patches.count = 8;
  cfg.trace_params = true;
  auto a = train<float>(pairs, net, cfg);
  auto b = train<float>(pairs, net, cfg);
  REQUIRE(a.run.param_trace.size() == b.run.param_trace.size());
  for (std::size_t i = 0; i < a.run.param_trace.size(); ++i)
    CHECK(a.run.param_trace[i] == b.run.param_trace[i]);
  REQUIRE(a.run.steps.size() == b.run.steps.size());
  for (std::size_t i = 0; i < a.run.steps.size(); ++i) {
    CHECK(a.run.steps[i].total == b.run.steps[i].total);
    CHECK(a.run.steps[i].l1 == b.run.steps[i].l1);
  }
}

TEST_CASE("lambda = 0 reproduces the plain-L1 trainer bit for bit") {
  const auto pairs = tiny_dataset(8, 16);
  NetConfig net;
  net.depth = 2;
  net.channels = {4, 8};
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 3;
  cfg.lambda_weight = 0.0;
  cfg.trace_params = true;

  auto general = train<float>(pairs, net, cfg);
  auto baseline = train_l1_baseline<float>(pairs, net, cfg);

  REQUIRE(general.run.param_trace.size() == baseline.run.param_trace.size());
  for (std::size_t i = 0; i < general.run.param_trace.size(); ++i)
    CHECK(general.run.param_trace[i] == baseline.run.param_trace[i]);
  REQUIRE(general.run.steps.size() == baseline.run.steps.size());
  for (std::size_t i = 0; i < general.run.steps.size(); ++i)
    CHECK(general.run.steps[i].total == baseline.run.steps[i].total);
  CHECK(general.best_model.content_hash() == baseline.best_model.content_hash());
  CHECK(general.final_model.content_hash() == baseline.final_model.content_hash());
  // and a positive lambda diverges from the baseline
  TrainConfig on = cfg;
  on.lambda_weight = 1e-3;
  auto with_pvmc = train<float>(pairs, net, on);
  CHECK(with_pvmc.final_model.content_hash() !=
        baseline.final_model.content_hash());
}

TEST_CASE("logged total equals l1 + lambda * pvmc exactly at every step") {
  const auto pairs = tiny_dataset(6, 16);
  NetConfig net;
  net.depth = 2;
  net.channels = {4, 8};
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.lambda_weight = 2.5e-3;
  cfg.patches.sx = cfg.patches.sy = 8;
  cfg.patches.count = 8;

  SUBCASE("float64 path") {
    auto out = train<double>(pairs, net, cfg);
    for (const auto& s : out.run.steps)
      CHECK(s.total == s.l1 + cfg.lambda_weight * s.pvmc);
  }
  SUBCASE("float32 path") {
    auto out = train<float>(pairs, net, cfg);
    for (const auto& s : out.run.steps) {
      const float expect = static_cast<float>(s.l1) +
                           static_cast<float>(cfg.lambda_weight) *
                               static_cast<float>(s.pvmc);
      CHECK(static_cast<float>(s.total) == expect);
    }
  }
}

TEST_CASE("k stays positive and finite throughout training") {
  const auto pairs = tiny_dataset(6, 16);
  NetConfig net;
  net.depth = 2;
  net.channels = {4, 8};
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 2;
  cfg.lambda_weight = 1e-2;
  cfg.patches.sx = cfg.patches.sy = 8;
  cfg.patches.count = 8;
  auto out = train<float>(pairs, net, cfg);
  for (const auto& r : out.run.history) {
    CHECK(std::isfinite(r.k));
    CHECK(r.k > 0.0);
  }
}

TEST_CASE("divergence aborts with the offending epoch recorded") {
  const auto pairs = tiny_dataset(4, 16);
  NetConfig net;
  net.depth = 2;
  net.channels = {4, 8};
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 2;
  cfg.lambda_weight = 0.0;
  cfg.lr_initial = 1e8;  // guaranteed blow-up
  cfg.lr_min = 1e8;
  auto out = train<float>(pairs, net, cfg);
  CHECK(out.run.diverged);
  CHECK(out.run.diverged_epoch >= 0);
  CHECK(out.run.diverged_epoch < 50);
}

TEST_CASE("early stopping halts on a validation plateau") {
  const auto pairs = tiny_dataset(8, 16);
  NetConfig net;
  net.depth = 2;
  net.channels = {4, 8};
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 4;
  cfg.lambda_weight = 0.0;
  cfg.lr_initial = 0.0;  // nothing moves: instant plateau
  cfg.lr_min = 0.0;
  cfg.early_stop_patience = 5;
  auto out = train<float>(pairs, net, cfg);
  CHECK(out.run.epochs_run < 200);
  CHECK(out.run.best_epoch == 0);
}

TEST_CASE("ablate records failing cells and continues the grid") {
  DatasetConfig dcfg;
  dcfg.phantom_kind = PhantomKind::lesion;
  dcfg.width = dcfg.height = 16;
  dcfg.kernel = Kernel::delta;
  dcfg.lors_per_voxel = 1;
  dcfg.n_train = 5;
  dcfg.n_test = 2;
  dcfg.seed = 11;
  const Dataset ds = make_dataset(dcfg);

  NetConfig net;
  net.depth = 2;
  net.channels = {2, 4};
  TrainConfig base;
  base.epochs = 2;
  base.batch_size = 2;
  base.patches.count = 4;

  // -1 is an invalid lambda: that cell fails, the rest complete
  const auto rows = ablate<float>(ds, net, base, {0.0, -1.0, 1e-3}, {8, 128});
  REQUIRE(rows.size() == 6);
  int failed = 0;
  for (const auto& r : rows) {
    if (r.failed) {
      ++failed;
      CHECK(r.lambda == -1.0);
      CHECK_FALSE(r.error.empty());
    } else {
      CHECK(std::isfinite(r.psnr));
      CHECK(r.patch_used <= 16);  // oversized patches clamp to the image
    }
  }
  CHECK(failed == 2);
}
