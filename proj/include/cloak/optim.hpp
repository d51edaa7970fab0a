#pragma once

#include <cmath>
#include <vector>

#include "cloak/layers.hpp"

namespace cloak {

/// Adam with bias correction. One instance owns the update state for one
/// network's parameter set; the learning rate is supplied per step so a
/// schedule can drive it.
template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<ParamRef<T>> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& p : params_) {
      m_.push_back(TensorT<T>::zeros_like(*p.value));
      v_.push_back(TensorT<T>::zeros_like(*p.value));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.grad->fill(T(0));
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      TensorT<T>& w = *params_[i].value;
      TensorT<T>& g = *params_[i].grad;
      TensorT<T>& m = m_[i];
      TensorT<T>& v = v_[i];
      for (std::int64_t j = 0; j < w.numel(); ++j) {
        m[j] = static_cast<T>(beta1_ * m[j] + (1.0 - beta1_) * g[j]);
        v[j] = static_cast<T>(beta2_ * v[j] + (1.0 - beta2_) * static_cast<double>(g[j]) * g[j]);
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  std::int64_t steps_taken() const { return t_; }

 private:
  std::vector<ParamRef<T>> params_;
  std::vector<TensorT<T>> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
};

}  // namespace cloak
