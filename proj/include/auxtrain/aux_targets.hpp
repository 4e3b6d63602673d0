// Ground-truth construction for the auxiliary heads. Targets are plain
// constants: Recon reproduces the (standardized) input batch, FT stacks the
// per-image two-channel spectrum of the grayscaled input.
#pragma once

#include <cstring>

#include "auxtrain/fourier.hpp"
#include "auxtrain/models.hpp"
#include "auxtrain/tensor.hpp"

namespace auxtrain {

template <typename S>
Tensor<S> build_aux_target(AuxTask aux, const Tensor<S>& images, bool log_magnitude = false) {
  if (aux == AuxTask::None)
    throw ContractError("build_aux_target called with AuxTask::None");
  if (aux == AuxTask::Recon) return images.clone();

  const int N = images.dim(0), H = images.dim(2), W = images.dim(3);
  const std::size_t in_sample = std::size_t(3) * H * W;
  const std::size_t out_sample = std::size_t(2) * H * W;
  Tensor<S> out({N, 2, H, W});
  Tensor<S> one({3, H, W});
  for (int n = 0; n < N; ++n) {
    std::memcpy(one.ptr(), images.ptr() + n * in_sample, in_sample * sizeof(S));
    Tensor<S> t = ft_target(one, log_magnitude);
    std::memcpy(out.ptr() + n * out_sample, t.ptr(), out_sample * sizeof(S));
  }
  return out;
}

}  // namespace auxtrain
