// FGSM attack generation and adversarial evaluation. Attacks run against
// the network in eval mode (batch norm uses running statistics), take the
// gradient of the classification loss w.r.t. the input, and never touch
// model parameters or their gradients.
#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "auxtrain/aux_targets.hpp"
#include "auxtrain/data.hpp"
#include "auxtrain/models.hpp"
#include "auxtrain/ops.hpp"
#include "auxtrain/tensor.hpp"

namespace auxtrain {

struct AdvConfig {
  double epsilon = 0.3;                          // L-inf budget, standardized-input units
  double train_adv_fraction = 0.5;               // share of each batch replaced when training
  std::optional<std::pair<double, double>> clip; // optional value clamp after the step
  bool attack_includes_aux = false;              // experimental: add lambda * aux loss to the attack objective
};

namespace detail {

// Temporarily freezes requires_grad on all parameters and forces eval mode,
// restoring both on destruction.
template <typename S>
class AttackGuard {
 public:
  explicit AttackGuard(Network<S>& net) : net_(net), was_training_(net.training()) {
    params_ = net.parameters();
    flags_.reserve(params_.size());
    for (auto& p : params_) {
      flags_.push_back(p.requires_grad());
      p.set_requires_grad(false);
    }
    net_.set_training(false);
  }
  ~AttackGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(flags_[i]);
    net_.set_training(was_training_);
  }

 private:
  Network<S>& net_;
  bool was_training_;
  std::vector<Tensor<S>> params_;
  std::vector<bool> flags_;
};

}  // namespace detail

// The FGSM update rule: x + epsilon * sign(g) with sign(0) = 0, then the
// optional value clamp.
template <typename S>
Tensor<S> fgsm_step(const Tensor<S>& x, std::span<const S> input_grad, double epsilon,
                    const std::optional<std::pair<double, double>>& clip = std::nullopt) {
  Tensor<S> adv = x.clone();
  auto a = adv.data();
  const S eps = static_cast<S>(epsilon);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (input_grad[i] > S(0))
      a[i] += eps;
    else if (input_grad[i] < S(0))
      a[i] -= eps;
  }
  if (clip) {
    const S lo = static_cast<S>(clip->first), hi = static_cast<S>(clip->second);
    for (auto& v : a) v = std::clamp(v, lo, hi);
  }
  return adv;
}

// x_adv = x + epsilon * sign(d L_cls / d x). The attack objective is the
// classification loss alone unless include_aux is set, in which case
// lambda * L_aux (target built from x itself) is added.
template <typename S>
Tensor<S> fgsm(Network<S>& net, const Tensor<S>& x, const std::vector<int>& labels,
               double epsilon, const std::optional<std::pair<double, double>>& clip = std::nullopt,
               bool include_aux = false, double lambda = 0.0, bool ft_log_magnitude = false) {
  if (epsilon < 0) throw ContractError("fgsm epsilon must be >= 0, got " + std::to_string(epsilon));
  if (epsilon == 0.0) return x.clone();

  detail::AttackGuard<S> guard(net);
  Tensor<S> probe = x.clone();
  probe.set_requires_grad(true);

  Tape<S> tape;
  auto out = net.forward(&tape, probe);
  Tensor<S> loss = softmax_cross_entropy(&tape, out.logits, labels);
  if (include_aux && out.aux) {
    Tensor<S> target = build_aux_target(net.aux_task(), probe, ft_log_magnitude);
    loss = add(&tape, loss, scale(&tape, mse(&tape, *out.aux, target), static_cast<S>(lambda)));
  }
  tape.backward(loss);
  return fgsm_step(x, std::span<const S>(probe.grad()), epsilon, clip);
}

// Replaces the first floor(fraction * N) rows of the batch with their FGSM
// versions, generated against the current weights. Labels are unchanged.
template <typename S>
Tensor<S> adversarial_batch(Network<S>& net, const Tensor<S>& images,
                            const std::vector<int>& labels, const AdvConfig& cfg,
                            double lambda = 0.0, bool ft_log_magnitude = false) {
  if (cfg.train_adv_fraction < 0.0 || cfg.train_adv_fraction > 1.0)
    throw ContractError("train_adv_fraction must lie in [0,1]");
  const int N = images.dim(0);
  const int k = int(cfg.train_adv_fraction * N);
  if (k == 0) return images;

  const std::size_t sample = images.numel() / std::size_t(N);
  Tensor<S> head({k, images.dim(1), images.dim(2), images.dim(3)});
  std::copy_n(images.ptr(), std::size_t(k) * sample, head.ptr());
  std::vector<int> head_labels(labels.begin(), labels.begin() + k);
  Tensor<S> head_adv = fgsm(net, head, head_labels, cfg.epsilon, cfg.clip,
                            cfg.attack_includes_aux, lambda, ft_log_magnitude);

  Tensor<S> out = images.clone();
  std::copy_n(head_adv.ptr(), std::size_t(k) * sample, out.ptr());
  return out;
}

template <typename S>
int argmax_row(const Tensor<S>& logits, int row) {
  const int K = logits.dim(1);
  const S* p = logits.ptr() + std::size_t(row) * K;
  int best = 0;
  for (int k = 1; k < K; ++k)
    if (p[k] > p[best]) best = k;
  return best;
}

// White-box adversarial accuracy: every test batch is attacked against the
// evaluated network itself, then classified.
template <typename S>
double adv_evaluate(Network<S>& net, Loader<S>& loader, double epsilon,
                    const std::optional<std::pair<double, double>>& clip = std::nullopt,
                    bool include_aux = false, double lambda = 0.0,
                    bool ft_log_magnitude = false) {
  const bool was_training = net.training();
  net.set_training(false);
  loader.begin_epoch(0);
  std::size_t correct = 0, total = 0;
  while (auto batch = loader.next()) {
    Tensor<S> adv = fgsm(net, batch->images, batch->labels, epsilon, clip, include_aux, lambda,
                         ft_log_magnitude);
    auto out = net.forward(nullptr, adv);
    for (std::size_t i = 0; i < batch->labels.size(); ++i)
      correct += argmax_row(out.logits, int(i)) == batch->labels[i];
    total += batch->labels.size();
  }
  net.set_training(was_training);
  if (total == 0) throw ContractError("adv_evaluate on an empty loader");
  return double(correct) / double(total);
}

}  // namespace auxtrain
