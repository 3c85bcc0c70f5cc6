#include "pvmc/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <functional>

#include "pvmc/patchstats.hpp"
#include "pvmc/rng.hpp"
#include "pvmc/tensor.hpp"
#include "pvmc/trainer.hpp"
#include "pvmc/unet.hpp"

namespace pvmc {

namespace {

using DT = ad::Tensor<double>;

double rel_err_max(const std::vector<double>& a, const std::vector<double>& b) {
  double gmax = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    gmax = std::max({gmax, std::fabs(a[i]), std::fabs(b[i])});
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom =
        std::max({std::fabs(a[i]), std::fabs(b[i]), 0.01 * gmax, 1e-12});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

DT random_tensor(ad::Shape shape, Rng& rng, double lo, double hi,
                 bool requires_grad = true) {
  DT t(std::move(shape), 0.0, requires_grad);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Fixed pseudo-random projection onto a scalar, so every output element
/// feeds the loss with a distinct weight.
DT weighted_sum(const DT& out, Rng& rng) {
  DT w(out.shape(), 0.0, false);
  for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);
  return ad::sum(ad::mul(out, w));
}

/// Central-difference gradients of eval() w.r.t. every element of `leaves`,
/// compared against one reverse-mode sweep.
double check_against_fd(std::vector<DT> leaves,
                        const std::function<DT()>& build, double h = 1e-5) {
  DT loss = build();
  ad::backward(loss);
  std::vector<double> analytic, fd;
  for (auto& leaf : leaves) {
    const auto& g = leaf.grad();
    analytic.insert(analytic.end(), g.begin(), g.end());
  }
  for (auto& leaf : leaves) {
    for (std::size_t i = 0; i < leaf.data().size(); ++i) {
      const double save = leaf.data()[i];
      leaf.data()[i] = save + h;
      const double fplus = build().item();
      leaf.data()[i] = save - h;
      const double fminus = build().item();
      leaf.data()[i] = save;
      fd.push_back((fplus - fminus) / (2.0 * h));
    }
  }
  for (auto& leaf : leaves) leaf.zero_grad();
  return rel_err_max(analytic, fd);
}

OpCheck make_check(const std::string& name, double err, double tol) {
  return {name, err, tol, err < tol};
}

void elementwise_checks(std::vector<OpCheck>& ops) {
  const double tol = 1e-6;
  Rng rng(20240811, stream_tag("gradcheck_elem"));
  const ad::Shape sh{4, 5};

  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    DT b = random_tensor(sh, rng, -1.0, 1.0);
    ops.push_back(make_check("add", check_against_fd({a, b}, [&] {
      Rng w(1, 0);
      return weighted_sum(ad::add(a, b), w);
    }), tol));
  }
  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    DT b = random_tensor(sh, rng, -1.0, 1.0);
    ops.push_back(make_check("sub", check_against_fd({a, b}, [&] {
      Rng w(2, 0);
      return weighted_sum(ad::sub(a, b), w);
    }), tol));
  }
  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    DT b = random_tensor(sh, rng, -1.0, 1.0);
    ops.push_back(make_check("mul", check_against_fd({a, b}, [&] {
      Rng w(3, 0);
      return weighted_sum(ad::mul(a, b), w);
    }), tol));
  }
  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    DT b = random_tensor(sh, rng, 0.6, 1.6);
    ops.push_back(make_check("div", check_against_fd({a, b}, [&] {
      Rng w(4, 0);
      return weighted_sum(ad::div(a, b), w);
    }), tol));
  }
  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    DT s = DT::scalar(rng.uniform(0.5, 1.5), true);
    ops.push_back(make_check("mul_scalar_broadcast",
                             check_against_fd({a, s}, [&] {
                               Rng w(5, 0);
                               return weighted_sum(ad::mul(a, s), w);
                             }),
                             tol));
  }
  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    DT s = DT::scalar(rng.uniform(0.5, 1.5), true);
    ops.push_back(make_check("div_scalar_broadcast",
                             check_against_fd({a, s}, [&] {
                               Rng w(6, 0);
                               return weighted_sum(ad::div(a, s), w);
                             }),
                             tol));
  }
  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    ops.push_back(make_check("scalar_mul", check_against_fd({a}, [&] {
      Rng w(7, 0);
      return weighted_sum(ad::scalar_mul(a, 0.73), w);
    }), tol));
  }
  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    ops.push_back(make_check("add_scalar", check_against_fd({a}, [&] {
      Rng w(8, 0);
      return weighted_sum(ad::add_scalar(a, 1.31), w);
    }), tol));
  }
  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    ops.push_back(
        make_check("sum", check_against_fd({a}, [&] { return ad::sum(a); }),
                   tol));
  }
  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    ops.push_back(
        make_check("mean", check_against_fd({a}, [&] { return ad::mean(a); }),
                   tol));
  }
  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    ops.push_back(make_check("square", check_against_fd({a}, [&] {
      Rng w(9, 0);
      return weighted_sum(ad::square(a), w);
    }), tol));
  }
  {
    DT a = random_tensor(sh, rng, 0.3, 2.0);
    ops.push_back(make_check("sqrt", check_against_fd({a}, [&] {
      Rng w(10, 0);
      return weighted_sum(ad::sqrt(a), w);
    }), tol));
  }
  {
    // keep inputs away from the |.| kink so central differences are valid
    DT a(sh, 0.0, true);
    for (auto& v : a.data()) {
      const double m = rng.uniform(0.2, 1.2);
      v = rng.uniform() < 0.5 ? -m : m;
    }
    ops.push_back(make_check("abs", check_against_fd({a}, [&] {
      Rng w(11, 0);
      return weighted_sum(ad::abs(a), w);
    }), tol));
  }
  {
    DT a(sh, 0.0, true);
    for (auto& v : a.data()) {
      const double m = rng.uniform(0.2, 1.2);
      v = rng.uniform() < 0.5 ? -m : m;
    }
    ops.push_back(make_check("relu", check_against_fd({a}, [&] {
      Rng w(12, 0);
      return weighted_sum(ad::relu(a), w);
    }), tol));
  }
  {
    DT a = random_tensor(sh, rng, -1.0, 1.0);
    ops.push_back(make_check("exp", check_against_fd({a}, [&] {
      Rng w(13, 0);
      return weighted_sum(ad::exp(a), w);
    }), tol));
  }
}

void structural_checks(std::vector<OpCheck>& ops) {
  const double tol = 1e-6;
  Rng rng(77003, stream_tag("gradcheck_struct"));
  {
    DT x = random_tensor({2, 3, 6, 5}, rng, -1.0, 1.0);
    DT w = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
    DT b = random_tensor({4}, rng, -0.2, 0.2);
    ops.push_back(make_check("conv2d_3x3", check_against_fd({x, w, b}, [&] {
      Rng wr(14, 0);
      return weighted_sum(ad::conv2d(x, w, b), wr);
    }), tol));
  }
  {
    DT x = random_tensor({2, 3, 4, 4}, rng, -1.0, 1.0);
    DT w = random_tensor({2, 3, 1, 1}, rng, -0.5, 0.5);
    DT b = random_tensor({2}, rng, -0.2, 0.2);
    ops.push_back(make_check("conv2d_1x1", check_against_fd({x, w, b}, [&] {
      Rng wr(15, 0);
      return weighted_sum(ad::conv2d(x, w, b), wr);
    }), tol));
  }
  {
    DT x = random_tensor({2, 3, 4, 3}, rng, -1.0, 1.0);
    DT w = random_tensor({3, 2, 2, 2}, rng, -0.5, 0.5);
    DT b = random_tensor({2}, rng, -0.2, 0.2);
    ops.push_back(make_check("conv_transpose2d",
                             check_against_fd({x, w, b}, [&] {
                               Rng wr(16, 0);
                               return weighted_sum(ad::conv_transpose2d(x, w, b),
                                                   wr);
                             }),
                             tol));
  }
  {
    // distinct values with clear margins so the argmax never flips under h
    DT x({2, 2, 4, 4}, 0.0, true);
    for (std::size_t i = 0; i < x.data().size(); ++i)
      x.data()[i] = 0.05 * static_cast<double>((i * 2654435761u) % 997);
    ops.push_back(make_check("maxpool2x2", check_against_fd({x}, [&] {
      Rng wr(17, 0);
      return weighted_sum(ad::maxpool2x2(x), wr);
    }), tol));
  }
  {
    DT a = random_tensor({2, 2, 3, 4}, rng, -1.0, 1.0);
    DT b = random_tensor({2, 3, 3, 4}, rng, -1.0, 1.0);
    ops.push_back(make_check("concat_channels",
                             check_against_fd({a, b}, [&] {
                               Rng wr(18, 0);
                               return weighted_sum(ad::concat_channels(a, b), wr);
                             }),
                             tol));
  }
  {
    DT x = random_tensor({1, 1, 6, 6}, rng, -1.0, 1.0);
    ops.push_back(make_check("slice_patch", check_against_fd({x}, [&] {
      Rng wr(19, 0);
      return weighted_sum(ad::slice_patch(x, 0, 0, 2, 1, 3, 4), wr);
    }), tol));
  }
}

/// Composite objective (L1 + lambda * PVMC) through a depth-2 net on a 16^2
/// input, finite differences over every parameter.
OpCheck composite_net_check() {
  NetConfig cfg;
  cfg.depth = 2;
  cfg.channels = {4, 8};
  UNet<double> net = UNet<double>::init(cfg, 99);
  // the zero-initialized head would silence most of the graph; randomize it
  Rng hr(4242, stream_tag("gradcheck_head"));
  for (auto& [name, t] : net.named_params()) {
    if (name.rfind("final", 0) == 0)
      for (auto& v : t.data()) v = 0.2 * hr.normal();
  }

  Rng rng(555, stream_tag("gradcheck_net"));
  DT x(ad::Shape{1, 1, 16, 16}, 0.0, false);
  for (auto& v : x.data()) v = rng.uniform(0.5, 3.0);
  DT y(ad::Shape{1, 1, 16, 16}, 0.0, false);
  for (auto& v : y.data()) v = rng.uniform(0.5, 3.0);
  DT kappa = DT::scalar(std::log(0.8), true);

  std::vector<Patch> patches;
  Rng prng(777, stream_tag("gradcheck_patches"));
  PatchSpec spec;
  spec.sx = spec.sy = 4;
  spec.count = 4;
  patches = sample_patches(16, 16, spec, prng);

  auto build = [&] {
    DT y_hat = net.forward(x);
    DT l1 = ad::mean(ad::abs(ad::sub(y_hat, y)));
    DT k_pos = ad::exp(kappa);
    DT pvmc = pvmc_loss(x, y_hat, patches, k_pos, 1e-6);
    return ad::add(l1, ad::scalar_mul(pvmc, 0.5));
  };

  std::vector<DT> leaves = net.params();
  leaves.push_back(kappa);
  const double err = check_against_fd(leaves, build, 1e-5);
  return make_check("composite_l1_pvmc_net", err, 1e-5);
}

struct PvmcCheckResult {
  double vs_autodiff = 0.0;
  double vs_fd = 0.0;
  double k_vs_autodiff = 0.0;
  int patches = 0;
};

/// Three-way agreement on random patches: Theorem-2 closed form vs reverse
/// mode vs central differences.
PvmcCheckResult pvmc_three_way(const std::vector<int>& sizes,
                               int patches_per_size, std::uint64_t seed) {
  PvmcCheckResult res;
  Rng rng(seed, stream_tag("pvmc_threeway"));
  const int img = 24;

  for (const int s : sizes) {
    for (int trial = 0; trial < patches_per_size; ++trial) {
      ImageD x(img, img), yh(img, img);
      PvmcState state;
      Patch p;
      double pi = 1.0;
      // resample until the patch is clearly away from the |pi - 1| kink
      do {
        for (auto& v : x.v) v = rng.uniform(0.5, 4.0);
        for (auto& v : yh.v) v = rng.uniform(0.5, 4.0);
        state.k = rng.uniform(0.2, 1.5);
        state.epsilon = 1e-6;
        p.image_index = 0;
        p.y0 = static_cast<int>(rng.uniform_int(img - s + 1));
        p.x0 = static_cast<int>(rng.uniform_int(img - s + 1));
        p.sy = p.sx = s;
        pi = consistency_ratio_value(x, yh, p, state);
      } while (std::fabs(pi - 1.0) < 1e-3);

      const std::vector<double> analytic = pvmc_grad_analytic(x, yh, p, state);

      // reverse mode through the graph builder
      std::vector<double> xt(x.v.begin(), x.v.end());
      DT xg = DT::from_data(ad::Shape{1, 1, img, img}, std::move(xt), false);
      std::vector<double> yt(yh.v.begin(), yh.v.end());
      DT yg = DT::from_data(ad::Shape{1, 1, img, img}, std::move(yt), true);
      DT kappa = DT::scalar(std::log(state.k), true);
      DT loss = pvmc_loss(xg, yg, {p}, ad::exp(kappa), state.epsilon);
      ad::backward(loss);
      std::vector<double> autodiff;
      autodiff.reserve(analytic.size());
      for (int yy = p.y0; yy < p.y0 + p.sy; ++yy)
        for (int xx = p.x0; xx < p.x0 + p.sx; ++xx)
          autodiff.push_back(yg.grad()[static_cast<std::size_t>(yy) * img + xx]);
      res.vs_autodiff =
          std::max(res.vs_autodiff, rel_err_max(analytic, autodiff));

      // dL/dk: closed form vs (dL/dkappa) / k
      const double k_analytic = pvmc_grad_k_analytic(x, yh, p, state);
      const double k_autodiff = kappa.grad()[0] / state.k;
      res.k_vs_autodiff = std::max(
          res.k_vs_autodiff, rel_err_max({k_analytic}, {k_autodiff}));

      // central differences on the scalar |pi - 1|
      std::vector<double> fd;
      fd.reserve(analytic.size());
      const double h = 1e-5;
      for (int yy = p.y0; yy < p.y0 + p.sy; ++yy)
        for (int xx = p.x0; xx < p.x0 + p.sx; ++xx) {
          const double save = yh.at(yy, xx);
          yh.at(yy, xx) = save + h;
          const double fplus =
              std::fabs(consistency_ratio_value(x, yh, p, state) - 1.0);
          yh.at(yy, xx) = save - h;
          const double fminus =
              std::fabs(consistency_ratio_value(x, yh, p, state) - 1.0);
          yh.at(yy, xx) = save;
          fd.push_back((fplus - fminus) / (2.0 * h));
        }
      res.vs_fd = std::max(res.vs_fd, rel_err_max(analytic, fd));
      ++res.patches;
    }
  }
  return res;
}

/// The comparator must notice a wrong gradient rule: d(x^2)/dx deliberately
/// reported as 2.02x instead of 2x.
bool negative_control() {
  Rng rng(31337, stream_tag("gradcheck_negctl"));
  DT a = random_tensor({4, 5}, rng, 0.5, 1.5);
  auto build = [&] {
    Rng w(20, 0);
    return weighted_sum(ad::square(a), w);
  };
  DT loss = build();
  ad::backward(loss);
  std::vector<double> corrupted = a.grad();
  for (auto& g : corrupted) g *= 1.01;
  std::vector<double> fd;
  const double h = 1e-5;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double save = a.data()[i];
    a.data()[i] = save + h;
    const double fplus = build().item();
    a.data()[i] = save - h;
    const double fminus = build().item();
    a.data()[i] = save;
    fd.push_back((fplus - fminus) / (2.0 * h));
  }
  return rel_err_max(corrupted, fd) > 1e-3;
}

}  // namespace

GradcheckReport run_gradcheck() {
  GradcheckReport rep;
  elementwise_checks(rep.ops);
  structural_checks(rep.ops);
  rep.ops.push_back(composite_net_check());

  const PvmcCheckResult pv = pvmc_three_way({2, 4, 16}, 40, 90210);
  rep.pvmc_analytic_vs_autodiff = pv.vs_autodiff;
  rep.pvmc_analytic_vs_fd = pv.vs_fd;
  rep.pvmc_k_analytic_vs_autodiff = pv.k_vs_autodiff;
  rep.pvmc_patches_checked = pv.patches;
  rep.ops.push_back(
      make_check("pvmc_theorem2_vs_autodiff", pv.vs_autodiff, 1e-10));
  rep.ops.push_back(make_check("pvmc_theorem2_vs_fd", pv.vs_fd, 1e-6));
  rep.ops.push_back(
      make_check("pvmc_dk_vs_autodiff", pv.k_vs_autodiff, 1e-10));

  rep.negative_control_detected = negative_control();

  rep.all_pass = rep.negative_control_detected;
  for (const auto& op : rep.ops) rep.all_pass = rep.all_pass && op.pass;
  return rep;
}

void print_gradcheck(const GradcheckReport& rep) {
  for (const auto& op : rep.ops)
    std::printf("%-28s max_rel_err=%.3e tol=%.0e %s\n", op.name.c_str(),
                op.max_rel_err, op.tol, op.pass ? "ok" : "FAIL");
  std::printf("pvmc patches checked: %d\n", rep.pvmc_patches_checked);
  std::printf("negative control (corrupted rule flagged): %s\n",
              rep.negative_control_detected ? "ok" : "FAIL");
  std::printf("gradcheck: %s\n", rep.all_pass ? "PASS" : "FAIL");
}

}  // namespace pvmc
