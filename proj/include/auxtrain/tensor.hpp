// Dense n-d tensor with an optional gradient buffer, plus the reverse-mode
// tape. Tensors are cheap handles onto shared storage; copying a Tensor
// aliases the same data. Use clone() for a deep copy.
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "auxtrain/common.hpp"

// Forward ops scan their outputs for NaN/Inf when finite checks are on.
// Default: enabled in debug builds, off in release; override per target
// with AUXTRAIN_CHECK_FINITE=0/1.
#ifndef AUXTRAIN_CHECK_FINITE
#ifdef NDEBUG
#define AUXTRAIN_CHECK_FINITE 0
#else
#define AUXTRAIN_CHECK_FINITE 1
#endif
#endif

namespace auxtrain {

template <typename S>
class Tensor {
 public:
  Tensor() : shape_{}, st_(nullptr) {}

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), st_(std::make_shared<Storage>()) {
    st_->data.assign(shape_numel(shape_), S(0));
  }

  Tensor(std::vector<int> shape, std::vector<S> values)
      : shape_(std::move(shape)), st_(std::make_shared<Storage>()) {
    if (values.size() != shape_numel(shape_))
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape_));
    st_->data = std::move(values);
  }

  static Tensor full(std::vector<int> shape, S value) {
    Tensor t(std::move(shape));
    for (auto& x : t.data()) x = value;
    return t;
  }

  static Tensor scalar(S value) { return Tensor({1}, {value}); }

  bool defined() const { return static_cast<bool>(st_); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::size_t numel() const { return st_ ? st_->data.size() : 0; }

  std::span<S> data() { return {st_->data.data(), st_->data.size()}; }
  std::span<const S> data() const { return {st_->data.data(), st_->data.size()}; }
  S* ptr() { return st_->data.data(); }
  const S* ptr() const { return st_->data.data(); }

  S item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return st_->data[0];
  }

  // --- gradient slot ---
  bool has_grad() const { return st_ && st_->has_grad; }

  std::span<S> grad() {
    if (!has_grad()) throw ContractError("grad() on tensor without gradient");
    return {st_->grad.data(), st_->grad.size()};
  }
  std::span<const S> grad() const {
    if (!has_grad()) throw ContractError("grad() on tensor without gradient");
    return {st_->grad.data(), st_->grad.size()};
  }

  // Allocates (zeroed) on first use; grad always matches the data shape.
  std::span<S> ensure_grad() {
    if (!st_->has_grad) {
      st_->grad.assign(st_->data.size(), S(0));
      st_->has_grad = true;
    }
    return {st_->grad.data(), st_->grad.size()};
  }

  void clear_grad() {
    if (st_) {
      st_->grad.clear();
      st_->grad.shrink_to_fit();
      st_->has_grad = false;
    }
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  void set_requires_grad(bool v) { st_->requires_grad = v; }

  // --- tape linkage ---
  int node() const { return st_ ? st_->node : -1; }
  std::uint64_t tape_id() const { return st_ ? st_->tape_id : 0; }
  void link(std::uint64_t tape_id, int node) {
    st_->tape_id = tape_id;
    st_->node = node;
  }

  Tensor clone() const {
    Tensor out(shape_, std::vector<S>(st_->data));
    return out;
  }

  // Identity of the underlying storage; used to dedupe parameter lists.
  const void* storage_id() const { return st_.get(); }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> v(numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(st_->data[i]);
    return Tensor<T>(shape_, std::move(v));
  }

 private:
  struct Storage {
    std::vector<S> data;
    std::vector<S> grad;
    bool has_grad = false;
    bool requires_grad = false;
    int node = -1;
    std::uint64_t tape_id = 0;
  };

  std::vector<int> shape_;
  std::shared_ptr<Storage> st_;
};

// Reverse-mode tape: an ordered list of backward closures. Records are
// appended in forward (hence topological) order and replayed exactly once
// in reverse by backward(). Closures own handles to every tensor they
// touch, so intermediate storage stays alive until the tape is cleared.
template <typename S>
class Tape {
 public:
  Tape() : id_(next_id().fetch_add(1, std::memory_order_relaxed)) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return records_.size(); }

  int record(std::function<void()> backward_fn) {
    records_.push_back(std::move(backward_fn));
    return static_cast<int>(records_.size()) - 1;
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse, accumulating
  // gradients into every reachable tensor that wants one.
  void backward(Tensor<S>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (loss.tape_id() != id_ || loss.node() < 0)
      throw ContractError("backward() loss is not a node of this tape");
    auto seed = loss.ensure_grad();
    seed[0] = S(1);
    for (std::size_t i = records_.size(); i > 0; --i) records_[i - 1]();
  }

  void clear() { records_.clear(); }

 private:
  static std::atomic<std::uint64_t>& next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter;
  }

  std::vector<std::function<void()>> records_;
  std::uint64_t id_;
};

// True when gradients must flow into `t` for ops recorded on `tape`:
// either the tensor is a leaf that asked for gradients, or it was produced
// by an earlier node of the same tape.
template <typename S>
inline bool needs_grad(const Tensor<S>& t, const Tape<S>* tape) {
  if (!t.defined()) return false;
  if (t.requires_grad()) return true;
  return tape && t.tape_id() == tape->id() && t.node() >= 0;
}

namespace detail {

template <typename S>
inline void check_finite(const Tensor<S>& t, const char* op) {
#if AUXTRAIN_CHECK_FINITE
  for (S v : t.data()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw DivergenceError(std::string(op) + " produced a non-finite value");
  }
#else
  (void)t;
  (void)op;
#endif
}

// Accumulate src into dst's gradient buffer.
template <typename S>
inline void add_to_grad(Tensor<S>& t, const std::vector<S>& src) {
  auto g = t.ensure_grad();
  for (std::size_t i = 0; i < src.size(); ++i) g[i] += src[i];
}

}  // namespace detail
}  // namespace auxtrain
