#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "pvmc/checkpoint.hpp"
#include "pvmc/unet.hpp"

using namespace pvmc;

namespace {

template <class T>
ad::Tensor<T> random_input(int n, int h, int w, Rng& rng, double lo, double hi) {
  ad::Tensor<T> x(ad::Shape{n, 1, h, w}, T(0), false);
  for (auto& v : x.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return x;
}

}  // namespace

TEST_CASE("zero-initialized head makes the untrained net the zero denoiser") {
  NetConfig cfg;  // depth 3, {8,16,32}
  UNet<float> net = UNet<float>::init(cfg, 7);
  Rng rng(1, 0);
  auto x = random_input<float>(2, 32, 32, rng, 0.0, 5.0);
  auto y = net.forward(x);
  for (float v : y.data()) CHECK(v == 0.0f);

  // initial L1 loss therefore equals mean |target|
  auto target = random_input<float>(2, 32, 32, rng, -1.0, 4.0);
  auto l1 = ad::mean(ad::abs(ad::sub(y, target)));
  double expect = 0.0;
  for (float v : target.data()) expect += std::fabs(static_cast<double>(v));
  expect /= static_cast<double>(target.data().size());
  CHECK(static_cast<double>(l1.item()) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("forward preserves the input shape for valid sizes") {
  NetConfig cfg;
  UNet<float> net = UNet<float>::init(cfg, 3);
  Rng rng(2, 0);
  for (const auto [h, w] : {std::pair{32, 32}, {64, 64}, {32, 64}}) {
    auto x = random_input<float>(1, h, w, rng, 0.0, 3.0);
    auto y = net.forward(x);
    CHECK(y.shape() == (ad::Shape{1, 1, h, w}));
  }
}

TEST_CASE("indivisible spatial dims are a configuration error") {
  NetConfig cfg;  // depth 3 wants divisibility by 4
  UNet<float> net = UNet<float>::init(cfg, 3);
  ad::Tensor<float> x(ad::Shape{1, 1, 30, 32}, 0.0f, false);
  CHECK_THROWS_AS(net.forward(x), ConfigError);
}

TEST_CASE("init is deterministic per seed and differs across seeds") {
  NetConfig cfg;
  UNet<float> a = UNet<float>::init(cfg, 42);
  UNet<float> b = UNet<float>::init(cfg, 42);
  UNet<float> c = UNet<float>::init(cfg, 43);
  CHECK(a.content_hash() == b.content_hash());
  CHECK(a.content_hash() != c.content_hash());
}

TEST_CASE("He initialization: normalized weights have variance ~ 1") {
  NetConfig cfg;
  cfg.depth = 3;
  cfg.channels = {16, 32, 64};
  UNet<double> net = UNet<double>::init(cfg, 11);
  double acc = 0.0, acc2 = 0.0;
  std::int64_t n = 0;
  for (const auto& [name, t] : net.named_params()) {
    if (name.find(".w") == std::string::npos) continue;
    if (name.rfind("final", 0) == 0) continue;  // zero by contract
    const auto& s = t.shape();
    const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
    const double scale = std::sqrt(fan_in / 2.0);
    for (const double v : t.data()) {
      const double z = v * scale;
      acc += z;
      acc2 += z * z;
      ++n;
    }
  }
  REQUIRE(n > 10000);
  const double mean = acc / n;
  const double var = acc2 / n - mean * mean;
  CHECK(std::fabs(var - 1.0) < 0.1);
}

TEST_CASE("finite differences validate d(sum yhat)/dtheta on a toy config") {
  NetConfig cfg;
  cfg.depth = 2;
  cfg.channels = {4, 8};
  UNet<double> net = UNet<double>::init(cfg, 5);
  Rng hr(6, 0);
  for (auto& [name, t] : net.named_params())
    if (name.rfind("final", 0) == 0)
      for (auto& v : t.data()) v = 0.3 * hr.normal();

  Rng rng(8, 0);
  auto x = random_input<double>(1, 16, 16, rng, 0.5, 3.0);
  auto build = [&] { return ad::sum(net.forward(x)); };
  ad::backward(build());

  // subsample parameters deterministically
  Rng pick(9, 0);
  double worst = 0.0;
  const double h = 1e-5;
  for (auto& [name, t] : net.named_params()) {
    const std::size_t n = t.data().size();
    const std::size_t samples = std::min<std::size_t>(n, 12);
    for (std::size_t s = 0; s < samples; ++s) {
      const std::size_t i = pick.uniform_int(n);
      const double save = t.data()[i];
      t.data()[i] = save + h;
      const double fp = build().item();
      t.data()[i] = save - h;
      const double fm = build().item();
      t.data()[i] = save;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = t.grad()[i];
      const double denom = std::max({std::fabs(an), std::fabs(fd), 1e-6});
      worst = std::max(worst, std::fabs(an - fd) / denom);
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("forward is bit-identical across runs") {
  NetConfig cfg;
  UNet<float> net = UNet<float>::init(cfg, 77);
  Rng hr(6, 1);
  for (auto& [name, t] : net.named_params())
    if (name.rfind("final", 0) == 0)
      for (auto& v : t.data()) v = static_cast<float>(0.3 * hr.normal());
  Rng rng(10, 0);
  auto x = random_input<float>(1, 32, 32, rng, 0.0, 4.0);
  auto y1 = net.forward(x);
  auto y2 = net.forward(x);
  for (std::size_t i = 0; i < y1.data().size(); ++i)
    CHECK(y1.data()[i] == y2.data()[i]);
}

TEST_CASE("checkpoint round trip reproduces outputs exactly") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "pvmc_ckpt_test";
  fs::remove_all(dir);

  NetConfig cfg;
  cfg.depth = 2;
  cfg.channels = {4, 8};
  UNet<float> net = UNet<float>::init(cfg, 123);
  Rng hr(7, 0);
  for (auto& [name, t] : net.named_params())
    if (name.rfind("final", 0) == 0)
      for (auto& v : t.data()) v = static_cast<float>(0.3 * hr.normal());

  save_checkpoint(dir.string(), net, {{"k", 0.8125}});
  std::map<std::string, double> scalars;
  UNet<float> loaded = load_checkpoint<float>(dir.string(), &scalars);
  CHECK(scalars.at("k") == 0.8125);
  CHECK(loaded.content_hash() == net.content_hash());

  Rng rng(20, 0);
  auto x = random_input<float>(1, 16, 16, rng, 0.0, 4.0);
  auto y1 = net.forward(x);
  auto y2 = loaded.forward(x);
  for (std::size_t i = 0; i < y1.data().size(); ++i)
    CHECK(y1.data()[i] == y2.data()[i]);
  fs::remove_all(dir);
}

TEST_CASE("clone is a deep copy") {
  NetConfig cfg;
  cfg.depth = 2;
  cfg.channels = {2, 4};
  UNet<float> net = UNet<float>::init(cfg, 9);
  UNet<float> copy = net.clone();
  const std::uint64_t before = copy.content_hash();
  net.named_params()[0].second.data()[0] += 1.0f;
  CHECK(copy.content_hash() == before);
  CHECK(net.content_hash() != before);
}

TEST_CASE("config validation") {
  NetConfig bad;
  bad.depth = 1;
  bad.channels = {8};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  NetConfig mismatch;
  mismatch.depth = 3;
  mismatch.channels = {8, 16};
  CHECK_THROWS_AS(mismatch.validate(), ConfigError);
}
