// SGD with classical momentum and decoupled-from-nothing weight decay:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
// Gradients are cleared after every step. Parameters whose gradient buffer
// was never populated are left untouched by the step.
#pragma once

#include <vector>

#include "auxtrain/common.hpp"
#include "auxtrain/tensor.hpp"

namespace auxtrain {

template <typename S>
class Sgd {
 public:
  Sgd(std::vector<Tensor<S>> params, double lr, double momentum = 0.9,
      double weight_decay = 5e-4)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i)
      velocity_[i].assign(params_[i].numel(), S(0));
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto d = p.data();
      auto& v = velocity_[i];
      const S m = static_cast<S>(momentum_);
      const S wd = static_cast<S>(weight_decay_);
      const S lr = static_cast<S>(lr_);
      for (std::size_t j = 0; j < d.size(); ++j) {
        v[j] = m * v[j] + g[j] + wd * d[j];
        d[j] -= lr * v[j];
      }
      p.clear_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.clear_grad();
  }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<S>> velocity_;
  double lr_, momentum_, weight_decay_;
};

}  // namespace auxtrain
