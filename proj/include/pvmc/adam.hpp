#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pvmc/tensor.hpp"

namespace pvmc {

/// Adam with bias correction. Moment buffers are kept in double regardless
/// of the parameter precision; updates are serial and deterministic.
template <class T>
class Adam {
 public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(std::vector<ad::Tensor<T>> params, Hyper h = {})
      : params_(std::move(params)), h_(h) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].data().size(), 0.0);
      v_[i].assign(params_[i].data().size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(h_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(h_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].data();
      auto& g = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m[j] = h_.beta1 * m[j] + (1.0 - h_.beta1) * gj;
        v[j] = h_.beta2 * v[j] + (1.0 - h_.beta2) * gj * gj;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        p[j] = static_cast<T>(static_cast<double>(p[j]) -
                              lr * mhat / (std::sqrt(vhat) + h_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::int64_t steps_taken() const { return t_; }

 private:
  std::vector<ad::Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  Hyper h_;
  std::int64_t t_ = 0;
};

/// Halves the learning rate after `patience` epochs without improvement of
/// a maximized metric; never drops below lr_min.
class ReduceOnPlateau {
 public:
  ReduceOnPlateau(double factor, int patience, double lr_min)
      : factor_(factor), patience_(patience), lr_min_(lr_min) {}

  double update(double metric, double lr) {
    if (metric > best_ + 1e-12) {
      best_ = metric;
      stale_ = 0;
      return lr;
    }
    if (++stale_ >= patience_) {
      stale_ = 0;
      const double next = lr * factor_;
      return next < lr_min_ ? lr_min_ : next;
    }
    return lr;
  }

 private:
  double factor_;
  int patience_;
  double lr_min_;
  double best_ = -1e300;
  int stale_ = 0;
};

}  // namespace pvmc
