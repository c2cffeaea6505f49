#pragma once

#include <vector>

#include "sdg/tensor.hpp"

namespace sdg {

// SGD with Nesterov momentum and coupled L2 weight decay:
//   g <- grad + wd*theta;  v <- mu*v + g;  theta <- theta - lr*(g + mu*v)
template <class T>
class SgdNesterov {
 public:
  SgdNesterov(std::vector<Tensor<T>*> params, double lr, double momentum, double weight_decay)
      : params_(std::move(params)), lr_(static_cast<T>(lr)), mu_(static_cast<T>(momentum)),
        wd_(static_cast<T>(weight_decay)) {
    velocity_.reserve(params_.size());
    for (auto* p : params_) velocity_.emplace_back(static_cast<std::size_t>(p->numel()), T(0));
  }

  void step() {
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      Tensor<T>& p = *params_[pi];
      T* theta = p.data();
      const T* grad = p.grad();
      T* v = velocity_[pi].data();
      const std::int64_t n = p.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        const T g = grad[i] + wd_ * theta[i];
        v[i] = mu_ * v[i] + g;
        theta[i] -= lr_ * (g + mu_ * v[i]);
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  std::vector<Tensor<T>*> params_;
  std::vector<std::vector<T>> velocity_;
  T lr_, mu_, wd_;
};

}  // namespace sdg
