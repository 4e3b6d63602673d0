// Training protocol: combined objective L_cls + lambda * L_aux, plateau
// learning-rate scheduling (x0.2 when validation accuracy stalls), early
// stopping after 10 stagnant epochs, and best-validation checkpointing.
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "auxtrain/adversarial.hpp"
#include "auxtrain/aux_targets.hpp"
#include "auxtrain/data.hpp"
#include "auxtrain/models.hpp"
#include "auxtrain/ops.hpp"
#include "auxtrain/optim.hpp"

namespace auxtrain {

struct TrainConfig {
  double lambda = 0.01;          // auxiliary loss weight
  double initial_lr = 0.1;
  double plateau_factor = 0.2;   // lr multiplier per plateau event (80% reduction)
  int patience_epochs = 10;      // early stop after this many stagnant epochs
  int scheduler_patience = 5;    // stagnant epochs before an lr reduction
  double improvement_tol = 1e-4; // val accuracy must beat best by more than this
  int batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int max_epochs = 200;
  std::uint64_t seed = 0;
  bool augment_val = true;       // the protocol augments validation images too
  bool ft_log_magnitude = false;
  std::optional<AdvConfig> adv;  // set => adversarial training
  // Under adversarial training the scheduler/early-stop signal is clean
  // validation accuracy unless this asks for the attacked one.
  bool monitor_adversarial_val = false;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0, cls_loss = 0, aux_loss = 0;
  double train_acc = 0, val_acc = 0;
};

template <typename S>
struct RunState {
  double lr = 0.1;
  double best_val_acc = -1.0;
  int epoch = 0;
  int epochs_since_best = 0;  // early-stop counter
  int scheduler_stagnant = 0; // plateau counter, resets on each lr cut
  std::vector<std::vector<S>> best_weights;
  std::vector<EpochMetrics> history;
};

// L = L_cls + lambda * L_aux; plain L_cls when no auxiliary loss exists.
template <typename S>
Tensor<S> total_loss(Tape<S>* tape, const Tensor<S>& cls_loss,
                     const std::optional<Tensor<S>>& aux_loss, double lambda) {
  if (!aux_loss) return cls_loss;
  return add(tape, cls_loss, scale(tape, *aux_loss, static_cast<S>(lambda)));
}

// Feeds one validation accuracy into the two plateau counters; cuts the
// learning rate by plateau_factor once `scheduler_patience` consecutive
// epochs fail to improve on the best. Returns whether this epoch improved.
template <typename S>
bool scheduler_step(RunState<S>& state, double val_acc, const TrainConfig& cfg) {
  const bool improved = val_acc > state.best_val_acc + cfg.improvement_tol;
  if (improved) {
    state.best_val_acc = val_acc;
    state.epochs_since_best = 0;
    state.scheduler_stagnant = 0;
  } else {
    ++state.epochs_since_best;
    ++state.scheduler_stagnant;
    if (state.scheduler_stagnant >= cfg.scheduler_patience) {
      state.lr *= cfg.plateau_factor;
      state.scheduler_stagnant = 0;
    }
  }
  return improved;
}

template <typename S>
bool early_stop_check(const RunState<S>& state, const TrainConfig& cfg) {
  return state.epochs_since_best >= cfg.patience_epochs;
}

template <typename S>
double evaluate(Network<S>& net, Loader<S>& loader) {
  const bool was_training = net.training();
  net.set_training(false);
  loader.begin_epoch(0);
  std::size_t correct = 0, total = 0;
  while (auto batch = loader.next()) {
    auto out = net.forward(nullptr, batch->images);
    for (std::size_t i = 0; i < batch->labels.size(); ++i)
      correct += argmax_row(out.logits, int(i)) == batch->labels[i];
    total += batch->labels.size();
  }
  net.set_training(was_training);
  if (total == 0) throw ContractError("evaluate on an empty loader");
  return double(correct) / double(total);
}

// One pass over the train loader: forward, build the auxiliary target from
// the (possibly perturbed) inputs, combined loss, backward, SGD step.
// Aborts with DivergenceError on a non-finite loss.
template <typename S>
EpochMetrics train_epoch(Network<S>& net, Loader<S>& loader, const TrainConfig& cfg,
                         Sgd<S>& opt, int epoch) {
  net.set_training(true);
  loader.begin_epoch(epoch);
  double sum_total = 0, sum_cls = 0, sum_aux = 0;
  std::size_t correct = 0, total = 0;
  int batch_index = 0;
  while (auto batch = loader.next()) {
    Tensor<S> images = batch->images;
    if (cfg.adv && cfg.adv->train_adv_fraction > 0)
      images = adversarial_batch(net, images, batch->labels, *cfg.adv, cfg.lambda,
                                 cfg.ft_log_magnitude);

    Tape<S> tape;
    auto out = net.forward(&tape, images);
    Tensor<S> cls = softmax_cross_entropy(&tape, out.logits, batch->labels);
    std::optional<Tensor<S>> aux;
    if (out.aux) {
      Tensor<S> target = build_aux_target(net.aux_task(), images, cfg.ft_log_magnitude);
      aux = mse(&tape, *out.aux, target);
    }
    Tensor<S> loss = total_loss(&tape, cls, aux, cfg.lambda);

    const double loss_value = double(loss.item());
    if (!std::isfinite(loss_value))
      throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index));

    tape.backward(loss);
    opt.step();

    const std::size_t n = batch->labels.size();
    sum_total += loss_value * double(n);
    sum_cls += double(cls.item()) * double(n);
    if (aux) sum_aux += double(aux->item()) * double(n);
    for (std::size_t i = 0; i < n; ++i)
      correct += argmax_row(out.logits, int(i)) == batch->labels[i];
    total += n;
    ++batch_index;
  }
  EpochMetrics m;
  m.epoch = epoch;
  m.lr = opt.lr();
  m.train_loss = sum_total / double(total);
  m.cls_loss = sum_cls / double(total);
  m.aux_loss = sum_aux / double(total);
  m.train_acc = double(correct) / double(total);
  return m;
}

inline void append_metrics_csv(const std::string& path, const EpochMetrics& m, bool header) {
  std::ofstream out(path, header ? std::ios::trunc : std::ios::app);
  if (!out) throw IoError("cannot write metrics to " + path);
  if (header) out << "epoch,lr,train_loss,cls_loss,aux_loss,train_acc,val_acc\n";
  out << m.epoch << ',' << m.lr << ',' << m.train_loss << ',' << m.cls_loss << ',' << m.aux_loss
      << ',' << m.train_acc << ',' << m.val_acc << '\n';
}

// Full protocol. The returned network state is always the best-validation
// snapshot, never the last epoch.
template <typename S>
RunState<S> train_model(Network<S>& net, Loader<S>& train_loader, Loader<S>& val_loader,
                        const TrainConfig& cfg, const std::string& metrics_csv = "") {
  if (!(cfg.plateau_factor > 0.0 && cfg.plateau_factor < 1.0))
    throw ContractError("plateau_factor must lie in (0,1)");
  if (cfg.patience_epochs < 1 || cfg.scheduler_patience < 1)
    throw ContractError("patience values must be >= 1");

  RunState<S> state;
  state.lr = cfg.initial_lr;
  state.best_weights = net.state_snapshot();
  Sgd<S> opt(net.parameters(), cfg.initial_lr, cfg.momentum, cfg.weight_decay);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochMetrics m = train_epoch(net, train_loader, cfg, opt, epoch);
    m.val_acc = (cfg.monitor_adversarial_val && cfg.adv)
                    ? adv_evaluate(net, val_loader, cfg.adv->epsilon, cfg.adv->clip,
                                   cfg.adv->attack_includes_aux, cfg.lambda, cfg.ft_log_magnitude)
                    : evaluate(net, val_loader);
    state.epoch = epoch;

    const bool improved = scheduler_step(state, m.val_acc, cfg);
    if (improved) state.best_weights = net.state_snapshot();
    opt.set_lr(state.lr);

    state.history.push_back(m);
    if (!metrics_csv.empty()) append_metrics_csv(metrics_csv, m, epoch == 1);
    if (early_stop_check(state, cfg)) break;
  }
  net.restore_state(state.best_weights);
  return state;
}

// ---------------------------------------------------------------------------
// Checkpoints: "AUXTCKPT" magic, format version, architecture descriptor,
// then named tensors as little-endian float32 with shape headers. Covers
// parameters and batch-norm running statistics.
// ---------------------------------------------------------------------------
namespace detail {

inline constexpr char kCkptMagic[8] = {'A', 'U', 'X', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw FormatError("unexpected end of checkpoint " + path);
  return v;
}

template <typename S>
void write_named_tensor(std::ofstream& out, const std::string& name, const Tensor<S>& t) {
  write_pod(out, std::uint32_t(name.size()));
  out.write(name.data(), std::streamsize(name.size()));
  write_pod(out, std::uint32_t(t.ndim()));
  for (int d : t.shape()) write_pod(out, std::int32_t(d));
  for (S v : t.data()) write_pod(out, float(v));
}

}  // namespace detail

template <typename S>
void checkpoint_save(const Network<S>& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::write_pod(out, detail::kCkptVersion);
  detail::write_pod(out, std::uint8_t(net.config().backbone));
  detail::write_pod(out, std::int32_t(net.config().width));
  detail::write_pod(out, std::uint8_t(net.aux_task()));
  const auto& params = net.named_parameters();
  const auto& buffers = net.named_buffers();
  detail::write_pod(out, std::uint32_t(params.size() + buffers.size()));
  for (const auto& [name, t] : params) detail::write_named_tensor(out, name, t);
  for (const auto& [name, t] : buffers) detail::write_named_tensor(out, name, t);
  if (!out) throw IoError("write failed for checkpoint " + path);
}

// Loads tensors into an existing network; architecture and every tensor
// shape must match, the first offending tensor is named otherwise.
template <typename S>
void checkpoint_load_into(Network<S>& net, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw FormatError("bad magic in checkpoint " + path);
  const auto version = detail::read_pod<std::uint32_t>(in, path);
  if (version != detail::kCkptVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  const auto backbone = detail::read_pod<std::uint8_t>(in, path);
  const auto width = detail::read_pod<std::int32_t>(in, path);
  const auto aux = detail::read_pod<std::uint8_t>(in, path);
  if (Backbone(backbone) != net.config().backbone || int(width) != net.config().width ||
      AuxTask(aux) != net.aux_task())
    throw ContractError("checkpoint architecture (" + std::string(to_string(Backbone(backbone))) +
                        ", width " + std::to_string(width) + ", aux " +
                        std::string(to_string(AuxTask(aux))) + ") does not match network");

  std::vector<std::pair<std::string, Tensor<S>>> slots;
  for (const auto& p : net.named_parameters()) slots.push_back(p);
  for (const auto& b : net.named_buffers()) slots.push_back(b);

  const auto count = detail::read_pod<std::uint32_t>(in, path);
  if (count != slots.size())
    throw ContractError("checkpoint holds " + std::to_string(count) + " tensors, network expects " +
                        std::to_string(slots.size()));
  for (auto& [expect_name, tensor] : slots) {
    const auto name_len = detail::read_pod<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw FormatError("unexpected end of checkpoint " + path);
    if (name != expect_name)
      throw ContractError("checkpoint tensor '" + name + "' does not match expected '" +
                          expect_name + "'");
    const auto ndim = detail::read_pod<std::uint32_t>(in, path);
    std::vector<int> dims(ndim);
    for (auto& d : dims) d = detail::read_pod<std::int32_t>(in, path);
    if (dims != tensor.shape())
      throw ContractError("checkpoint tensor '" + name + "' has shape " + shape_str(dims) +
                          ", network expects " + shape_str(tensor.shape()));
    auto dst = tensor.data();
    for (std::size_t i = 0; i < dst.size(); ++i)
      dst[i] = static_cast<S>(detail::read_pod<float>(in, path));
  }
}

// Rebuilds the network described by the checkpoint header.
template <typename S = float>
Network<S> checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw FormatError("bad magic in checkpoint " + path);
  const auto version = detail::read_pod<std::uint32_t>(in, path);
  if (version != detail::kCkptVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  const auto backbone = detail::read_pod<std::uint8_t>(in, path);
  const auto width = detail::read_pod<std::int32_t>(in, path);
  const auto aux = detail::read_pod<std::uint8_t>(in, path);
  if (backbone > std::uint8_t(Backbone::micro_resnet))
    throw FormatError("invalid backbone id " + std::to_string(backbone) + " in " + path);
  if (aux > std::uint8_t(AuxTask::FT))
    throw FormatError("invalid aux id " + std::to_string(aux) + " in " + path);
  in.close();

  EncoderConfig cfg;
  cfg.backbone = Backbone(backbone);
  cfg.width = int(width);
  cfg.seed = 0;
  Network<S> net(cfg, AuxTask(aux));
  checkpoint_load_into(net, path);
  return net;
}

}  // namespace auxtrain
