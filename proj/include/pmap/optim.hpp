#pragma once

#include <cmath>
#include <vector>

#include "pmap/nn.hpp"

namespace pmap {

// Adam with bias correction. Moments are kept in the parameter dtype; the
// update math runs in double.
template <typename T>
class Adam {
 public:
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit Adam(const ParamRefs<T>& params, double lr_ = 5e-4) : lr(lr_), params_(params) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  int64_t steps() const { return t_; }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Param<T>& p = *params_[k];
      Tensor<T>& m = m_[k];
      Tensor<T>& v = v_[k];
      for (int64_t i = 0; i < p.value.numel(); ++i) {
        double g = static_cast<double>(p.grad[i]);
        double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * g;
        double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
        p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - lr * update);
      }
    }
  }

  void zero_grad() { zero_grads(params_); }

 private:
  ParamRefs<T> params_;
  std::vector<Tensor<T>> m_, v_;
  int64_t t_ = 0;
};

// Multiplies the learning rate by gamma every step_size epochs.
struct StepLr {
  double base_lr = 5e-4;
  int step_size = 10;
  double gamma = 0.1;

  double at_epoch(int epoch) const {
    if (step_size <= 0) return base_lr;
    return base_lr * std::pow(gamma, static_cast<double>(epoch / step_size));
  }
};

}  // namespace pmap
