// Differentiable operations on Tensor<S>. Every op runs its forward pass
// eagerly and, when a tape is supplied and some input wants gradients,
// records a backward closure. Passing tape == nullptr gives a plain
// inference pass.
//
// conv2d and conv_transpose2d share one im2col/col2im index map, which
// makes conv_transpose2d the exact linear adjoint of conv2d for equal
// geometry (same kernel, stride, padding).
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "auxtrain/common.hpp"
#include "auxtrain/tensor.hpp"

namespace auxtrain {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

// Geometry of a patch gather. "cols" matrices are laid out
// [batch * out_h * out_w, chans * kh * kw], row-major.
struct ConvGeom {
  int batch, chans, in_h, in_w;
  int kh, kw, stride, pad;
  int out_h, out_w;

  std::size_t rows() const { return std::size_t(batch) * out_h * out_w; }
  std::size_t patch() const { return std::size_t(chans) * kh * kw; }
};

template <typename S>
std::vector<S> im2col(const S* src, const ConvGeom& g) {
  std::vector<S> cols(g.rows() * g.patch());
  const std::size_t plane = std::size_t(g.in_h) * g.in_w;
  for (int n = 0; n < g.batch; ++n) {
    const S* sn = src + std::size_t(n) * g.chans * plane;
    for (int oh = 0; oh < g.out_h; ++oh) {
      for (int ow = 0; ow < g.out_w; ++ow) {
        S* row = cols.data() + (std::size_t(n) * g.out_h * g.out_w + std::size_t(oh) * g.out_w + ow) * g.patch();
        std::size_t c = 0;
        for (int ci = 0; ci < g.chans; ++ci) {
          for (int ki = 0; ki < g.kh; ++ki) {
            const int ih = oh * g.stride - g.pad + ki;
            for (int kj = 0; kj < g.kw; ++kj, ++c) {
              const int iw = ow * g.stride - g.pad + kj;
              row[c] = (ih >= 0 && ih < g.in_h && iw >= 0 && iw < g.in_w)
                           ? sn[std::size_t(ci) * plane + std::size_t(ih) * g.in_w + iw]
                           : S(0);
            }
          }
        }
      }
    }
  }
  return cols;
}

// Scatter-add: exact adjoint of im2col with the same geometry.
template <typename S>
void col2im_add(const std::vector<S>& cols, const ConvGeom& g, S* dst) {
  const std::size_t plane = std::size_t(g.in_h) * g.in_w;
  for (int n = 0; n < g.batch; ++n) {
    S* dn = dst + std::size_t(n) * g.chans * plane;
    for (int oh = 0; oh < g.out_h; ++oh) {
      for (int ow = 0; ow < g.out_w; ++ow) {
        const S* row = cols.data() + (std::size_t(n) * g.out_h * g.out_w + std::size_t(oh) * g.out_w + ow) * g.patch();
        std::size_t c = 0;
        for (int ci = 0; ci < g.chans; ++ci) {
          for (int ki = 0; ki < g.kh; ++ki) {
            const int ih = oh * g.stride - g.pad + ki;
            for (int kj = 0; kj < g.kw; ++kj, ++c) {
              const int iw = ow * g.stride - g.pad + kj;
              if (ih >= 0 && ih < g.in_h && iw >= 0 && iw < g.in_w)
                dn[std::size_t(ci) * plane + std::size_t(ih) * g.in_w + iw] += row[c];
            }
          }
        }
      }
    }
  }
}

template <typename S>
inline void require_ndim(const Tensor<S>& t, int nd, const char* what) {
  if (t.ndim() != nd)
    throw DimensionError(std::string(what) + " expected " + std::to_string(nd) +
                         "-d tensor, got shape " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: input [N,C,H,W], weight [O,C,kh,kw], bias [O]
// out [N,O,H',W'] with H' = (H + 2*pad - kh) / stride + 1
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> conv2d(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 int stride = 1, int pad = 0) {
  detail::require_ndim(x, 4, "conv2d input");
  detail::require_ndim(w, 4, "conv2d weight");
  if (x.dim(1) != w.dim(1))
    throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(w.shape()));
  if (stride < 1) throw ContractError("conv2d stride must be >= 1");
  if (pad < 0) throw ContractError("conv2d padding must be >= 0");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (static_cast<int>(b.numel()) != O)
    throw DimensionError("conv2d bias " + shape_str(b.shape()) + " does not match " +
                         std::to_string(O) + " output channels");
  if (kh > H + 2 * pad || kw > W + 2 * pad)
    throw DimensionError("conv2d kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  const int oh = (H + 2 * pad - kh) / stride + 1;
  const int ow = (W + 2 * pad - kw) / stride + 1;
  const detail::ConvGeom geom{N, C, H, W, kh, kw, stride, pad, oh, ow};

  auto cols = detail::im2col(x.ptr(), geom);
  const auto rows = geom.rows();
  const auto patch = geom.patch();
  Eigen::Map<const RowMat<S>> cm(cols.data(), rows, patch);
  Eigen::Map<const RowMat<S>> wm(w.ptr(), O, patch);
  RowMat<S> ym = cm * wm.transpose();  // rows x O

  Tensor<S> out({N, O, oh, ow});
  {
    S* op = out.ptr();
    const S* bp = b.ptr();
    const std::size_t spatial = std::size_t(oh) * ow;
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < O; ++o)
        for (std::size_t s = 0; s < spatial; ++s)
          op[(std::size_t(n) * O + o) * spatial + s] = ym(std::size_t(n) * spatial + s, o) + bp[o];
  }
  detail::check_finite(out, "conv2d");

  if (tape && (needs_grad(x, tape) || needs_grad(w, tape) || needs_grad(b, tape))) {
    Tensor<S> xc = x, wc = w, bc = b, oc = out;
    Tape<S>* tp = tape;
    int nid = tape->record([xc, wc, bc, oc, geom, tp]() mutable {
      if (!oc.has_grad()) return;
      const int N = geom.batch, O = wc.dim(0);
      const int oh = geom.out_h, ow = geom.out_w;
      const std::size_t spatial = std::size_t(oh) * ow;
      const auto rows = geom.rows();
      const auto patch = geom.patch();
      // reorder upstream gradient into [rows, O]
      RowMat<S> gy(rows, O);
      {
        auto g = oc.grad();
        for (int n = 0; n < N; ++n)
          for (int o = 0; o < O; ++o)
            for (std::size_t s = 0; s < spatial; ++s)
              gy(std::size_t(n) * spatial + s, o) = g[(std::size_t(n) * O + o) * spatial + s];
      }
      if (needs_grad(bc, tp)) {
        auto gb = bc.ensure_grad();
        for (int o = 0; o < O; ++o) gb[o] += gy.col(o).sum();
      }
      Eigen::Map<const RowMat<S>> wm(wc.ptr(), O, patch);
      if (needs_grad(wc, tp)) {
        auto cols = detail::im2col(xc.ptr(), geom);
        Eigen::Map<const RowMat<S>> cm(cols.data(), rows, patch);
        auto gw = wc.ensure_grad();
        Eigen::Map<RowMat<S>> gwm(gw.data(), O, patch);
        gwm.noalias() += gy.transpose() * cm;
      }
      if (needs_grad(xc, tp)) {
        RowMat<S> gcols = gy * wm;  // rows x patch
        std::vector<S> gc(gcols.data(), gcols.data() + gcols.size());
        auto gx = xc.ensure_grad();
        detail::col2im_add(gc, geom, gx.data());
      }
    });
    out.link(tape->id(), nid);
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv_transpose2d: input [N,Ci,H,W], weight [Ci,Co,kh,kw], bias [Co]
// out [N,Co,H'',W''] with H'' = (H - 1)*stride - 2*pad + kh
// Linear adjoint of conv2d([N,Co,H'',W''] -> [N,Ci,H,W]) for equal geometry.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> conv_transpose2d(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w,
                           const Tensor<S>& b, int stride = 1, int pad = 0) {
  detail::require_ndim(x, 4, "conv_transpose2d input");
  detail::require_ndim(w, 4, "conv_transpose2d weight");
  if (x.dim(1) != w.dim(0))
    throw DimensionError("conv_transpose2d channel mismatch: input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(w.shape()));
  if (stride < 1) throw ContractError("conv_transpose2d stride must be >= 1");
  if (pad < 0) throw ContractError("conv_transpose2d padding must be >= 0");
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (static_cast<int>(b.numel()) != Co)
    throw DimensionError("conv_transpose2d bias " + shape_str(b.shape()) + " does not match " +
                         std::to_string(Co) + " output channels");
  const int oh = (H - 1) * stride - 2 * pad + kh;
  const int ow = (W - 1) * stride - 2 * pad + kw;
  if (oh < 1 || ow < 1)
    throw DimensionError("conv_transpose2d produces empty output for input " + shape_str(x.shape()));
  // Gather geometry of the adjoint conv: its "input" is this op's output.
  const detail::ConvGeom geom{N, Co, oh, ow, kh, kw, stride, pad, H, W};

  const std::size_t rows = geom.rows();   // N*H*W
  const std::size_t patch = geom.patch(); // Co*kh*kw
  // input as [rows, Ci]
  RowMat<S> xm(rows, Ci);
  {
    const S* xp = x.ptr();
    const std::size_t spatial = std::size_t(H) * W;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < Ci; ++c)
        for (std::size_t s = 0; s < spatial; ++s)
          xm(std::size_t(n) * spatial + s, c) = xp[(std::size_t(n) * Ci + c) * spatial + s];
  }
  Eigen::Map<const RowMat<S>> wm(w.ptr(), Ci, patch);
  RowMat<S> pm = xm * wm;  // rows x patch

  Tensor<S> out({N, Co, oh, ow});
  {
    std::vector<S> pv(pm.data(), pm.data() + pm.size());
    detail::col2im_add(pv, geom, out.ptr());
    S* op = out.ptr();
    const S* bp = b.ptr();
    const std::size_t spatial = std::size_t(oh) * ow;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < Co; ++c)
        for (std::size_t s = 0; s < spatial; ++s) op[(std::size_t(n) * Co + c) * spatial + s] += bp[c];
  }
  detail::check_finite(out, "conv_transpose2d");

  if (tape && (needs_grad(x, tape) || needs_grad(w, tape) || needs_grad(b, tape))) {
    Tensor<S> xc = x, wc = w, bc = b, oc = out;
    Tape<S>* tp = tape;
    int nid = tape->record([xc, wc, bc, oc, geom, tp]() mutable {
      if (!oc.has_grad()) return;
      const int N = geom.batch, Ci = xc.dim(1), Co = geom.chans;
      const int H = geom.out_h, W = geom.out_w;
      const auto rows = geom.rows();
      const auto patch = geom.patch();
      if (needs_grad(bc, tp)) {
        auto g = oc.grad();
        auto gb = bc.ensure_grad();
        const std::size_t spatial = std::size_t(geom.in_h) * geom.in_w;
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < Co; ++c) {
            double acc = 0;
            for (std::size_t s = 0; s < spatial; ++s)
              acc += g[(std::size_t(n) * Co + c) * spatial + s];
            gb[c] += static_cast<S>(acc);
          }
      }
      // dP = im2col(dOut); shares the index map with the forward scatter.
      std::vector<S> gout(oc.grad().begin(), oc.grad().end());
      auto gp = detail::im2col(gout.data(), geom);
      Eigen::Map<const RowMat<S>> gpm(gp.data(), rows, patch);
      Eigen::Map<const RowMat<S>> wm(wc.ptr(), Ci, patch);
      if (needs_grad(xc, tp)) {
        RowMat<S> gxm = gpm * wm.transpose();  // rows x Ci
        auto gx = xc.ensure_grad();
        const std::size_t spatial = std::size_t(H) * W;
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < Ci; ++c)
            for (std::size_t s = 0; s < spatial; ++s)
              gx[(std::size_t(n) * Ci + c) * spatial + s] += gxm(std::size_t(n) * spatial + s, c);
      }
      if (needs_grad(wc, tp)) {
        RowMat<S> xm(rows, Ci);
        const S* xp = xc.ptr();
        const std::size_t spatial = std::size_t(H) * W;
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < Ci; ++c)
            for (std::size_t s = 0; s < spatial; ++s)
              xm(std::size_t(n) * spatial + s, c) = xp[(std::size_t(n) * Ci + c) * spatial + s];
        auto gw = wc.ensure_grad();
        Eigen::Map<RowMat<S>> gwm(gw.data(), Ci, patch);
        gwm.noalias() += xm.transpose() * gpm;
      }
    });
    out.link(tape->id(), nid);
  }
  return out;
}

// ---------------------------------------------------------------------------
// relu: elementwise max(0, x); gradient is masked where x <= 0.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> relu(Tape<S>* tape, const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  {
    auto xin = x.data();
    auto o = out.data();
    for (std::size_t i = 0; i < xin.size(); ++i) o[i] = xin[i] > S(0) ? xin[i] : S(0);
  }
  if (tape && needs_grad(x, tape)) {
    Tensor<S> xc = x, oc = out;
    int nid = tape->record([xc, oc]() mutable {
      if (!oc.has_grad()) return;
      auto g = oc.grad();
      auto xin = xc.data();
      auto gx = xc.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xin[i] > S(0)) gx[i] += g[i];
    });
    out.link(tape->id(), nid);
  }
  return out;
}

// ---------------------------------------------------------------------------
// max_pool2d: window maxima; gradient routes to the first maximal element
// of each window in row-major scan order.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> max_pool2d(Tape<S>* tape, const Tensor<S>& x, int k, int stride) {
  detail::require_ndim(x, 4, "max_pool2d input");
  if (k < 1 || stride < 1) throw ContractError("max_pool2d window and stride must be >= 1");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k > H || k > W)
    throw DimensionError("max_pool2d window " + std::to_string(k) + " larger than input " +
                         shape_str(x.shape()));
  const int oh = (H - k) / stride + 1;
  const int ow = (W - k) / stride + 1;

  Tensor<S> out({N, C, oh, ow});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.numel());
  {
    const S* xp = x.ptr();
    S* op = out.ptr();
    std::size_t oi = 0;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const S* plane = xp + (std::size_t(n) * C + c) * H * W;
        const std::int64_t base = (std::int64_t(n) * C + c) * H * W;
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j, ++oi) {
            S best = plane[std::size_t(i * stride) * W + j * stride];
            std::int64_t besti = base + std::int64_t(i * stride) * W + j * stride;
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                const S v = plane[std::size_t(i * stride + ki) * W + j * stride + kj];
                if (v > best) {
                  best = v;
                  besti = base + std::int64_t(i * stride + ki) * W + j * stride + kj;
                }
              }
            op[oi] = best;
            (*argmax)[oi] = besti;
          }
      }
  }
  if (tape && needs_grad(x, tape)) {
    Tensor<S> xc = x, oc = out;
    int nid = tape->record([xc, oc, argmax]() mutable {
      if (!oc.has_grad()) return;
      auto g = oc.grad();
      auto gx = xc.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
    });
    out.link(tape->id(), nid);
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear: input [N,F], weight [F,K], bias [K] -> [N,K]
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> linear(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  detail::require_ndim(x, 2, "linear input");
  detail::require_ndim(w, 2, "linear weight");
  if (x.dim(1) != w.dim(0))
    throw DimensionError("linear inner dimensions disagree: input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(w.shape()));
  const int N = x.dim(0), F = x.dim(1), K = w.dim(1);
  if (static_cast<int>(b.numel()) != K)
    throw DimensionError("linear bias " + shape_str(b.shape()) + " does not match " +
                         std::to_string(K) + " outputs");
  Tensor<S> out({N, K});
  {
    Eigen::Map<const RowMat<S>> xm(x.ptr(), N, F);
    Eigen::Map<const RowMat<S>> wm(w.ptr(), F, K);
    Eigen::Map<RowMat<S>> om(out.ptr(), N, K);
    om.noalias() = xm * wm;
    const S* bp = b.ptr();
    for (int n = 0; n < N; ++n)
      for (int kk = 0; kk < K; ++kk) om(n, kk) += bp[kk];
  }
  detail::check_finite(out, "linear");
  if (tape && (needs_grad(x, tape) || needs_grad(w, tape) || needs_grad(b, tape))) {
    Tensor<S> xc = x, wc = w, bc = b, oc = out;
    Tape<S>* tp = tape;
    int nid = tape->record([xc, wc, bc, oc, N, F, K, tp]() mutable {
      if (!oc.has_grad()) return;
      Eigen::Map<const RowMat<S>> gy(oc.grad().data(), N, K);
      if (needs_grad(bc, tp)) {
        auto gb = bc.ensure_grad();
        for (int kk = 0; kk < K; ++kk) gb[kk] += gy.col(kk).sum();
      }
      if (needs_grad(wc, tp)) {
        Eigen::Map<const RowMat<S>> xm(xc.ptr(), N, F);
        Eigen::Map<RowMat<S>> gw(wc.ensure_grad().data(), F, K);
        gw.noalias() += xm.transpose() * gy;
      }
      if (needs_grad(xc, tp)) {
        Eigen::Map<const RowMat<S>> wm(wc.ptr(), F, K);
        Eigen::Map<RowMat<S>> gx(xc.ensure_grad().data(), N, F);
        gx.noalias() += gy * wm.transpose();
      }
    });
    out.link(tape->id(), nid);
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch_norm2d: per-channel standardization over N*H*W with eps = 1e-5.
// Train mode normalizes with batch statistics and updates the running
// buffers in place (momentum 0.1, unbiased variance, matching the usual
// framework convention); eval mode normalizes with the running buffers.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> batch_norm2d(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& gamma,
                       const Tensor<S>& beta, Tensor<S>& running_mean, Tensor<S>& running_var,
                       bool training, double momentum = 0.1, double eps = 1e-5) {
  detail::require_ndim(x, 4, "batch_norm2d input");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (static_cast<int>(gamma.numel()) != C || static_cast<int>(beta.numel()) != C ||
      static_cast<int>(running_mean.numel()) != C || static_cast<int>(running_var.numel()) != C)
    throw DimensionError("batch_norm2d parameter size does not match " + std::to_string(C) +
                         " channels (input " + shape_str(x.shape()) + ")");
  const std::size_t M = std::size_t(N) * H * W;
  if (training && M < 2)
    throw ContractError("batch_norm2d train mode needs N*H*W >= 2, got " + std::to_string(M));

  const std::size_t plane = std::size_t(H) * W;
  std::vector<double> mean(C), invstd(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      double s = 0, s2 = 0;
      const S* xp = x.ptr();
      for (int n = 0; n < N; ++n) {
        const S* p = xp + (std::size_t(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          s += p[i];
          s2 += double(p[i]) * p[i];
        }
      }
      const double mu = s / double(M);
      const double var = std::max(0.0, s2 / double(M) - mu * mu);
      mean[c] = mu;
      invstd[c] = 1.0 / std::sqrt(var + eps);
      running_mean.data()[c] =
          static_cast<S>((1.0 - momentum) * running_mean.data()[c] + momentum * mu);
      const double unbiased = M > 1 ? var * double(M) / double(M - 1) : var;
      running_var.data()[c] =
          static_cast<S>((1.0 - momentum) * running_var.data()[c] + momentum * unbiased);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      invstd[c] = 1.0 / std::sqrt(double(running_var.data()[c]) + eps);
    }
  }

  Tensor<S> out(x.shape());
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  {
    const S* xp = x.ptr();
    S* op = out.ptr();
    const S* gp = gamma.ptr();
    const S* bp = beta.ptr();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t off = (std::size_t(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const S xh = static_cast<S>((xp[off + i] - mean[c]) * invstd[c]);
          (*xhat)[off + i] = xh;
          op[off + i] = gp[c] * xh + bp[c];
        }
      }
  }
  detail::check_finite(out, "batch_norm2d");

  if (tape && (needs_grad(x, tape) || needs_grad(gamma, tape) || needs_grad(beta, tape))) {
    Tensor<S> xc = x, gc = gamma, bc = beta, oc = out;
    auto istd = std::make_shared<std::vector<double>>(invstd);
    Tape<S>* tp = tape;
    bool train_mode = training;
    int nid = tape->record([xc, gc, bc, oc, xhat, istd, train_mode, N, C, plane, M, tp]() mutable {
      if (!oc.has_grad()) return;
      auto gy = oc.grad();
      const S* gp = gc.ptr();
      // per-channel reductions
      std::vector<double> sum_gy(C, 0.0), sum_gy_xhat(C, 0.0);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (std::size_t(n) * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_gy[c] += gy[off + i];
            sum_gy_xhat[c] += double(gy[off + i]) * (*xhat)[off + i];
          }
        }
      if (needs_grad(bc, tp)) {
        auto gb = bc.ensure_grad();
        for (int c = 0; c < C; ++c) gb[c] += static_cast<S>(sum_gy[c]);
      }
      if (needs_grad(gc, tp)) {
        auto gg = gc.ensure_grad();
        for (int c = 0; c < C; ++c) gg[c] += static_cast<S>(sum_gy_xhat[c]);
      }
      if (needs_grad(xc, tp)) {
        auto gx = xc.ensure_grad();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const std::size_t off = (std::size_t(n) * C + c) * plane;
            const double k = double(gp[c]) * (*istd)[c];
            if (train_mode) {
              for (std::size_t i = 0; i < plane; ++i) {
                const double t = double(gy[off + i]) - sum_gy[c] / double(M) -
                                 double((*xhat)[off + i]) * sum_gy_xhat[c] / double(M);
                gx[off + i] += static_cast<S>(k * t);
              }
            } else {
              for (std::size_t i = 0; i < plane; ++i) gx[off + i] += static_cast<S>(k * gy[off + i]);
            }
          }
      }
    });
    out.link(tape->id(), nid);
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax_cross_entropy: mean over the batch of -log softmax(logits)[label],
// stabilized by per-row max subtraction.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> softmax_cross_entropy(Tape<S>* tape, const Tensor<S>& logits,
                                const std::vector<int>& labels) {
  detail::require_ndim(logits, 2, "softmax_cross_entropy logits");
  const int N = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw ContractError("softmax_cross_entropy got " + std::to_string(labels.size()) +
                        " labels for batch of " + std::to_string(N));
  for (int n = 0; n < N; ++n)
    if (labels[n] < 0 || labels[n] >= K)
      throw IndexError("label " + std::to_string(labels[n]) + " outside [0, " + std::to_string(K) +
                       ") at row " + std::to_string(n));

  auto probs = std::make_shared<std::vector<S>>(logits.numel());
  double loss_sum = 0.0;
  {
    const S* zp = logits.ptr();
    for (int n = 0; n < N; ++n) {
      const S* row = zp + std::size_t(n) * K;
      S zmax = row[0];
      for (int k = 1; k < K; ++k) zmax = std::max(zmax, row[k]);
      double denom = 0.0;
      for (int k = 0; k < K; ++k) denom += std::exp(double(row[k]) - double(zmax));
      const double lse = std::log(denom) + double(zmax);
      for (int k = 0; k < K; ++k)
        (*probs)[std::size_t(n) * K + k] = static_cast<S>(std::exp(double(row[k]) - lse));
      loss_sum += lse - double(row[labels[n]]);
    }
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(loss_sum / N));
  detail::check_finite(out, "softmax_cross_entropy");

  if (tape && needs_grad(logits, tape)) {
    Tensor<S> zc = logits, oc = out;
    auto lab = std::make_shared<std::vector<int>>(labels);
    int nid = tape->record([zc, oc, probs, lab, N, K]() mutable {
      if (!oc.has_grad()) return;
      const S g = oc.grad()[0];
      auto gz = zc.ensure_grad();
      const S scale = g / static_cast<S>(N);
      for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
          S p = (*probs)[std::size_t(n) * K + k];
          if (k == (*lab)[n]) p -= S(1);
          gz[std::size_t(n) * K + k] += scale * p;
        }
    });
    out.link(tape->id(), nid);
  }
  return out;
}

// ---------------------------------------------------------------------------
// mse: mean of squared differences over every element.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> mse(Tape<S>* tape, const Tensor<S>& pred, const Tensor<S>& target) {
  if (pred.shape() != target.shape())
    throw DimensionError("mse shape mismatch: " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
  const std::size_t n = pred.numel();
  double acc = 0.0;
  {
    auto a = pred.data();
    auto b = target.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double d = double(a[i]) - double(b[i]);
      acc += d * d;
    }
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / double(n)));
  detail::check_finite(out, "mse");

  if (tape && (needs_grad(pred, tape) || needs_grad(target, tape))) {
    Tensor<S> pc = pred, tc = target, oc = out;
    Tape<S>* tp = tape;
    int nid = tape->record([pc, tc, oc, n, tp]() mutable {
      if (!oc.has_grad()) return;
      const S g = oc.grad()[0];
      const S scale = S(2) * g / static_cast<S>(n);
      auto a = pc.data();
      auto b = tc.data();
      if (needs_grad(pc, tp)) {
        auto gp = pc.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gp[i] += scale * (a[i] - b[i]);
      }
      if (needs_grad(tc, tp)) {
        auto gt = tc.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gt[i] -= scale * (a[i] - b[i]);
      }
    });
    out.link(tape->id(), nid);
  }
  return out;
}

// ---------------------------------------------------------------------------
// small elementwise / reduction helpers
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Tensor<S> out(a.shape());
  {
    auto ap = a.data();
    auto bp = b.data();
    auto op = out.data();
    for (std::size_t i = 0; i < op.size(); ++i) op[i] = ap[i] + bp[i];
  }
  if (tape && (needs_grad(a, tape) || needs_grad(b, tape))) {
    Tensor<S> ac = a, bc = b, oc = out;
    Tape<S>* tp = tape;
    int nid = tape->record([ac, bc, oc, tp]() mutable {
      if (!oc.has_grad()) return;
      auto g = oc.grad();
      if (needs_grad(ac, tp)) {
        auto ga = ac.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (needs_grad(bc, tp)) {
        auto gb = bc.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
    out.link(tape->id(), nid);
  }
  return out;
}

template <typename S>
Tensor<S> scale(Tape<S>* tape, const Tensor<S>& x, S factor) {
  Tensor<S> out(x.shape());
  {
    auto xp = x.data();
    auto op = out.data();
    for (std::size_t i = 0; i < op.size(); ++i) op[i] = factor * xp[i];
  }
  if (tape && needs_grad(x, tape)) {
    Tensor<S> xc = x, oc = out;
    int nid = tape->record([xc, oc, factor]() mutable {
      if (!oc.has_grad()) return;
      auto g = oc.grad();
      auto gx = xc.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
    out.link(tape->id(), nid);
  }
  return out;
}

template <typename S>
Tensor<S> sum(Tape<S>* tape, const Tensor<S>& x) {
  double acc = 0.0;
  for (S v : x.data()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc));
  if (tape && needs_grad(x, tape)) {
    Tensor<S> xc = x, oc = out;
    int nid = tape->record([xc, oc]() mutable {
      if (!oc.has_grad()) return;
      const S g = oc.grad()[0];
      auto gx = xc.ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
    out.link(tape->id(), nid);
  }
  return out;
}

// global average pool: [N,C,H,W] -> [N,C]
template <typename S>
Tensor<S> global_avg_pool2d(Tape<S>* tape, const Tensor<S>& x) {
  detail::require_ndim(x, 4, "global_avg_pool2d input");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t plane = std::size_t(x.dim(2)) * x.dim(3);
  Tensor<S> out({N, C});
  {
    const S* xp = x.ptr();
    S* op = out.ptr();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        const S* p = xp + (std::size_t(n) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        op[std::size_t(n) * C + c] = static_cast<S>(acc / double(plane));
      }
  }
  if (tape && needs_grad(x, tape)) {
    Tensor<S> xc = x, oc = out;
    int nid = tape->record([xc, oc, N, C, plane]() mutable {
      if (!oc.has_grad()) return;
      auto g = oc.grad();
      auto gx = xc.ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const S gv = g[std::size_t(n) * C + c] / static_cast<S>(plane);
          S* p = gx.data() + (std::size_t(n) * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) p[i] += gv;
        }
    });
    out.link(tape->id(), nid);
  }
  return out;
}

}  // namespace auxtrain
