// Micro classification backbones plus the auxiliary decoder. Every network
// is a shared encoder feeding (a) global-average-pool -> linear classifier
// and (b), when an auxiliary task is selected, a three-block transposed-
// convolution decoder mapping the 4x4 feature map back to 32x32 image
// space with 3 output channels for Recon or 2 for FT.
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "auxtrain/common.hpp"
#include "auxtrain/ops.hpp"
#include "auxtrain/tensor.hpp"

namespace auxtrain {

enum class AuxTask { None, Recon, FT };
enum class Backbone { plain_cnn, micro_resnet };

inline const char* to_string(AuxTask t) {
  switch (t) {
    case AuxTask::None: return "none";
    case AuxTask::Recon: return "recon";
    case AuxTask::FT: return "ft";
  }
  return "?";
}

inline const char* to_string(Backbone b) {
  return b == Backbone::plain_cnn ? "plain-cnn" : "micro-resnet";
}

inline AuxTask aux_task_from_string(const std::string& s) {
  if (s == "none") return AuxTask::None;
  if (s == "recon") return AuxTask::Recon;
  if (s == "ft") return AuxTask::FT;
  throw ContractError("unknown aux task '" + s + "' (expected none|recon|ft)");
}

inline Backbone backbone_from_string(const std::string& s) {
  if (s == "plain-cnn") return Backbone::plain_cnn;
  if (s == "micro-resnet") return Backbone::micro_resnet;
  throw ContractError("unknown backbone '" + s + "' (expected plain-cnn|micro-resnet)");
}

inline int aux_channels(AuxTask t) {
  switch (t) {
    case AuxTask::Recon: return 3;
    case AuxTask::FT: return 2;
    default: return 0;
  }
}

struct EncoderConfig {
  Backbone backbone = Backbone::plain_cnn;
  int width = 16;  // base channel count; encoder emits width*4 channels at 4x4
  std::uint64_t seed = 0;
};

namespace detail {

// Collects (name, tensor) pairs as layers are built. Parameters get
// requires_grad; buffers (batch-norm running stats) do not.
template <typename S>
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor<S>>> params;
  std::vector<std::pair<std::string, Tensor<S>>> buffers;

  Tensor<S> add_param(const std::string& name, Tensor<S> t) {
    t.set_requires_grad(true);
    params.emplace_back(name, t);
    return t;
  }
  Tensor<S> add_buffer(const std::string& name, Tensor<S> t) {
    buffers.emplace_back(name, t);
    return t;
  }
};

// Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in).
template <typename S>
Tensor<S> kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor<S> t(std::move(shape));
  const double bound = std::sqrt(6.0 / double(fan_in));
  for (auto& v : t.data()) v = static_cast<S>(rng.uniform(-bound, bound));
  return t;
}

template <typename S>
struct Conv2dLayer {
  Tensor<S> weight, bias;
  int stride, pad;

  Conv2dLayer(ParamRegistry<S>& reg, const std::string& prefix, int in_ch, int out_ch, int k,
              int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    weight = reg.add_param(prefix + ".weight",
                           kaiming_uniform<S>({out_ch, in_ch, k, k}, in_ch * k * k, rng));
    bias = reg.add_param(prefix + ".bias", Tensor<S>({out_ch}));
  }

  Tensor<S> forward(Tape<S>* tape, const Tensor<S>& x) const {
    return conv2d(tape, x, weight, bias, stride, pad);
  }
};

template <typename S>
struct ConvTranspose2dLayer {
  Tensor<S> weight, bias;
  int stride, pad;

  ConvTranspose2dLayer(ParamRegistry<S>& reg, const std::string& prefix, int in_ch, int out_ch,
                       int k, int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    weight = reg.add_param(prefix + ".weight",
                           kaiming_uniform<S>({in_ch, out_ch, k, k}, in_ch * k * k, rng));
    bias = reg.add_param(prefix + ".bias", Tensor<S>({out_ch}));
  }

  Tensor<S> forward(Tape<S>* tape, const Tensor<S>& x) const {
    return conv_transpose2d(tape, x, weight, bias, stride, pad);
  }
};

template <typename S>
struct BatchNorm2dLayer {
  Tensor<S> gamma, beta, running_mean, running_var;

  BatchNorm2dLayer(ParamRegistry<S>& reg, const std::string& prefix, int ch) {
    gamma = reg.add_param(prefix + ".gamma", Tensor<S>::full({ch}, S(1)));
    beta = reg.add_param(prefix + ".beta", Tensor<S>({ch}));
    running_mean = reg.add_buffer(prefix + ".running_mean", Tensor<S>({ch}));
    running_var = reg.add_buffer(prefix + ".running_var", Tensor<S>::full({ch}, S(1)));
  }

  Tensor<S> forward(Tape<S>* tape, const Tensor<S>& x, bool training) {
    return batch_norm2d(tape, x, gamma, beta, running_mean, running_var, training);
  }
};

// conv -> bn -> relu
template <typename S>
struct ConvBnRelu {
  Conv2dLayer<S> conv;
  BatchNorm2dLayer<S> bn;

  ConvBnRelu(ParamRegistry<S>& reg, const std::string& prefix, int in_ch, int out_ch, int k,
             int stride, int pad, Rng& rng)
      : conv(reg, prefix + ".conv", in_ch, out_ch, k, stride, pad, rng),
        bn(reg, prefix + ".bn", out_ch) {}

  Tensor<S> forward(Tape<S>* tape, const Tensor<S>& x, bool training) {
    return relu(tape, bn.forward(tape, conv.forward(tape, x), training));
  }
};

// Standard two-conv residual block; 1x1 projection on the skip when shape
// changes.
template <typename S>
struct ResidualBlock {
  Conv2dLayer<S> conv1;
  BatchNorm2dLayer<S> bn1;
  Conv2dLayer<S> conv2;
  BatchNorm2dLayer<S> bn2;
  std::optional<Conv2dLayer<S>> proj;
  std::optional<BatchNorm2dLayer<S>> proj_bn;

  ResidualBlock(ParamRegistry<S>& reg, const std::string& prefix, int in_ch, int out_ch,
                int stride, Rng& rng)
      : conv1(reg, prefix + ".conv1", in_ch, out_ch, 3, stride, 1, rng),
        bn1(reg, prefix + ".bn1", out_ch),
        conv2(reg, prefix + ".conv2", out_ch, out_ch, 3, 1, 1, rng),
        bn2(reg, prefix + ".bn2", out_ch) {
    if (stride != 1 || in_ch != out_ch) {
      proj.emplace(reg, prefix + ".proj", in_ch, out_ch, 1, stride, 0, rng);
      proj_bn.emplace(reg, prefix + ".proj_bn", out_ch);
    }
  }

  Tensor<S> forward(Tape<S>* tape, const Tensor<S>& x, bool training) {
    Tensor<S> h = relu(tape, bn1.forward(tape, conv1.forward(tape, x), training));
    h = bn2.forward(tape, conv2.forward(tape, h), training);
    Tensor<S> skip = x;
    if (proj) skip = proj_bn->forward(tape, proj->forward(tape, x), training);
    return relu(tape, add(tape, h, skip));
  }
};

// Three conv-pool stages: 32 -> 16 -> 8 -> 4, channels w -> 2w -> 4w.
template <typename S>
struct PlainCnnEncoder {
  std::vector<ConvBnRelu<S>> stages;

  PlainCnnEncoder(ParamRegistry<S>& reg, int width, Rng& rng) {
    int in_ch = 3;
    for (int s = 0; s < 3; ++s) {
      const int out_ch = width << s;
      stages.emplace_back(reg, "encoder.stage" + std::to_string(s + 1), in_ch, out_ch, 3, 1, 1,
                          rng);
      in_ch = out_ch;
    }
  }

  Tensor<S> forward(Tape<S>* tape, const Tensor<S>& x, bool training) {
    Tensor<S> h = x;
    for (auto& stage : stages) h = max_pool2d(tape, stage.forward(tape, h, training), 2, 2);
    return h;
  }
};

// Stem + three residual stages (2 blocks each), strides 2/2/2: 32 -> 4.
template <typename S>
struct MicroResnetEncoder {
  ConvBnRelu<S> stem;
  std::vector<ResidualBlock<S>> blocks;

  MicroResnetEncoder(ParamRegistry<S>& reg, int width, Rng& rng)
      : stem(reg, "encoder.stem", 3, width, 3, 1, 1, rng) {
    int in_ch = width;
    for (int s = 0; s < 3; ++s) {
      const int out_ch = width << s;
      const std::string p = "encoder.stage" + std::to_string(s + 1);
      blocks.emplace_back(reg, p + ".block1", in_ch, out_ch, 2, rng);
      blocks.emplace_back(reg, p + ".block2", out_ch, out_ch, 1, rng);
      in_ch = out_ch;
    }
  }

  Tensor<S> forward(Tape<S>* tape, const Tensor<S>& x, bool training) {
    Tensor<S> h = stem.forward(tape, x, training);
    for (auto& b : blocks) h = b.forward(tape, h, training);
    return h;
  }
};

// Decoder: three stride-2 transposed convolutions, 4 -> 8 -> 16 -> 32.
// Hidden blocks are followed by ReLU; the last block is linear because the
// targets (standardized pixels, spectrum phase) take negative values.
template <typename S>
struct AuxDecoder {
  std::vector<ConvTranspose2dLayer<S>> blocks;

  AuxDecoder(ParamRegistry<S>& reg, int feat_ch, int out_ch, Rng& rng) {
    const int mid1 = feat_ch / 2, mid2 = feat_ch / 4;
    blocks.emplace_back(reg, "decoder.block1", feat_ch, mid1, 4, 2, 1, rng);
    blocks.emplace_back(reg, "decoder.block2", mid1, mid2, 4, 2, 1, rng);
    blocks.emplace_back(reg, "decoder.block3", mid2, out_ch, 4, 2, 1, rng);
  }

  Tensor<S> forward(Tape<S>* tape, const Tensor<S>& feat) {
    Tensor<S> h = relu(tape, blocks[0].forward(tape, feat));
    h = relu(tape, blocks[1].forward(tape, h));
    return blocks[2].forward(tape, h);
  }
};

}  // namespace detail

template <typename S = float>
class Network {
 public:
  struct Output {
    Tensor<S> logits;                 // [N,10]
    std::optional<Tensor<S>> aux;     // [N,3,32,32] or [N,2,32,32]
  };

  Network(const EncoderConfig& config, AuxTask aux) : config_(config), aux_(aux) {
    Rng enc_rng(mix64(config.seed, 0xe2c0de5ULL));
    if (config.backbone == Backbone::plain_cnn)
      encoder_.template emplace<detail::PlainCnnEncoder<S>>(reg_, config.width, enc_rng);
    else
      encoder_.template emplace<detail::MicroResnetEncoder<S>>(reg_, config.width, enc_rng);
    const int feat_ch = config.width * 4;
    fc_weight_ = reg_.add_param("classifier.fc.weight",
                                detail::kaiming_uniform<S>({feat_ch, kNumLogits}, feat_ch, enc_rng));
    fc_bias_ = reg_.add_param("classifier.fc.bias", Tensor<S>({kNumLogits}));
    if (aux != AuxTask::None) {
      // Decoder init draws from its own stream so that encoder/classifier
      // initialization is identical across aux variants for a given seed.
      Rng dec_rng(mix64(config.seed, 0xdec0de5ULL));
      decoder_.emplace(reg_, feat_ch, aux_channels(aux), dec_rng);
    }
  }

  Output forward(Tape<S>* tape, const Tensor<S>& batch) {
    if (batch.ndim() != 4 || batch.dim(1) != kImageChans || batch.dim(2) != kImageSide_ ||
        batch.dim(3) != kImageSide_)
      throw DimensionError("network expects [N,3,32,32] input, got " + shape_str(batch.shape()));
    Tensor<S> feat;
    if (auto* p = std::get_if<detail::PlainCnnEncoder<S>>(&encoder_))
      feat = p->forward(tape, batch, training_);
    else if (auto* r = std::get_if<detail::MicroResnetEncoder<S>>(&encoder_))
      feat = r->forward(tape, batch, training_);
    ++encoder_evals_;
    Tensor<S> pooled = global_avg_pool2d(tape, feat);
    Output out{linear(tape, pooled, fc_weight_, fc_bias_), std::nullopt};
    if (decoder_) out.aux = decoder_->forward(tape, feat);
    return out;
  }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  AuxTask aux_task() const { return aux_; }
  const EncoderConfig& config() const { return config_; }

  std::vector<Tensor<S>> parameters() {
    std::vector<Tensor<S>> out;
    for (auto& [name, t] : reg_.params) out.push_back(t);
    return out;
  }

  const std::vector<std::pair<std::string, Tensor<S>>>& named_parameters() const {
    return reg_.params;
  }
  const std::vector<std::pair<std::string, Tensor<S>>>& named_buffers() const {
    return reg_.buffers;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : reg_.params) n += t.numel();
    return n;
  }

  // Flat value snapshot of parameters + buffers, for best-weights
  // checkpointing during training.
  std::vector<std::vector<S>> state_snapshot() const {
    std::vector<std::vector<S>> out;
    for (const auto& [name, t] : reg_.params) out.emplace_back(t.data().begin(), t.data().end());
    for (const auto& [name, t] : reg_.buffers) out.emplace_back(t.data().begin(), t.data().end());
    return out;
  }

  void restore_state(const std::vector<std::vector<S>>& snap) {
    const std::size_t expect = reg_.params.size() + reg_.buffers.size();
    if (snap.size() != expect)
      throw ContractError("state snapshot has " + std::to_string(snap.size()) +
                          " tensors, network has " + std::to_string(expect));
    std::size_t i = 0;
    for (auto& [name, t] : reg_.params) {
      std::copy(snap[i].begin(), snap[i].end(), t.data().begin());
      ++i;
    }
    for (auto& [name, t] : reg_.buffers) {
      std::copy(snap[i].begin(), snap[i].end(), t.data().begin());
      ++i;
    }
  }

  // Test hook: number of encoder passes performed so far.
  long encoder_eval_count() const { return encoder_evals_; }

  static constexpr int kNumLogits = 10;

 private:
  static constexpr int kImageChans = 3;
  static constexpr int kImageSide_ = 32;

  EncoderConfig config_;
  AuxTask aux_;
  detail::ParamRegistry<S> reg_;
  std::variant<std::monostate, detail::PlainCnnEncoder<S>, detail::MicroResnetEncoder<S>>
      encoder_;
  Tensor<S> fc_weight_, fc_bias_;
  std::optional<detail::AuxDecoder<S>> decoder_;
  bool training_ = true;
  long encoder_evals_ = 0;
};

template <typename S>
Network<S> build_network(const EncoderConfig& config, AuxTask aux) {
  return Network<S>(config, aux);
}

}  // namespace auxtrain
