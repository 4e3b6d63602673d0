// 2D discrete Fourier transforms and the frequency-domain auxiliary target:
// a two-channel (magnitude, phase) spectrum of the grayscaled input image.
//
// Convention: unnormalized forward transform, no DC centering,
//   F[u,v] = sum_{m,n} x[m,n] * exp(-2*pi*i*(u*m/H + v*n/W)).
// Both transforms accumulate in double regardless of the scalar type; at
// 32x32 the cost is irrelevant and it keeps the fast and naive paths in
// lockstep to an ulp.
#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "auxtrain/common.hpp"
#include "auxtrain/tensor.hpp"

namespace auxtrain {

template <typename S>
struct Spectrum {
  int h = 0, w = 0;
  std::vector<S> re, im;  // row-major h*w

  Spectrum() = default;
  Spectrum(int h_, int w_) : h(h_), w(w_), re(std::size_t(h_) * w_, S(0)), im(std::size_t(h_) * w_, S(0)) {}

  S real_at(int u, int v) const { return re[std::size_t(u) * w + v]; }
  S imag_at(int u, int v) const { return im[std::size_t(u) * w + v]; }
};

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Luma weights for "gray-scaled": ITU-R BT.601.
inline constexpr double kGrayR = 0.299;
inline constexpr double kGrayG = 0.587;
inline constexpr double kGrayB = 0.114;

// [3,H,W] (R,G,B planes) -> [H,W]
template <typename S>
Tensor<S> grayscale(const Tensor<S>& image) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw DimensionError("grayscale expects a [3,H,W] image, got " + shape_str(image.shape()));
  const int H = image.dim(1), W = image.dim(2);
  const std::size_t plane = std::size_t(H) * W;
  Tensor<S> out({H, W});
  const S* p = image.ptr();
  S* o = out.ptr();
  for (std::size_t i = 0; i < plane; ++i)
    o[i] = static_cast<S>(kGrayR * p[i] + kGrayG * p[plane + i] + kGrayB * p[2 * plane + i]);
  return out;
}

// Direct O((HW)^2) double-sum DFT. Quadratic and deliberately simple; this
// is the reference the fast transform is validated against.
template <typename S>
Spectrum<S> dft2_naive(const Tensor<S>& grid) {
  if (grid.ndim() != 2)
    throw DimensionError("dft2_naive expects a [H,W] grid, got " + shape_str(grid.shape()));
  const int H = grid.dim(0), W = grid.dim(1);
  Spectrum<S> out(H, W);
  const S* x = grid.ptr();
  const double tau = 2.0 * 3.14159265358979323846;
  for (int u = 0; u < H; ++u) {
    for (int v = 0; v < W; ++v) {
      double re = 0.0, im = 0.0;
      for (int m = 0; m < H; ++m) {
        for (int n = 0; n < W; ++n) {
          const double ang = -tau * (double(u) * m / H + double(v) * n / W);
          const double val = x[std::size_t(m) * W + n];
          re += val * std::cos(ang);
          im += val * std::sin(ang);
        }
      }
      out.re[std::size_t(u) * W + v] = static_cast<S>(re);
      out.im[std::size_t(u) * W + v] = static_cast<S>(im);
    }
  }
  return out;
}

namespace detail {

// In-place iterative radix-2 Cooley-Tukey over a stride-1 complex line.
inline void fft1_inplace(std::complex<double>* a, int n) {
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const double tau = 2.0 * 3.14159265358979323846;
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = -tau / len;
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (int i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (int j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

}  // namespace detail

// Radix-2 row-column FFT; requires power-of-two H and W. Identical value
// contract to dft2_naive.
template <typename S>
Spectrum<S> fft2(const Tensor<S>& grid) {
  if (grid.ndim() != 2)
    throw DimensionError("fft2 expects a [H,W] grid, got " + shape_str(grid.shape()));
  const int H = grid.dim(0), W = grid.dim(1);
  if (!is_pow2(H) || !is_pow2(W))
    throw ContractError("fft2 requires power-of-two sides, got " + shape_str(grid.shape()));

  std::vector<std::complex<double>> buf(std::size_t(H) * W);
  const S* x = grid.ptr();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = {double(x[i]), 0.0};

  for (int m = 0; m < H; ++m) detail::fft1_inplace(buf.data() + std::size_t(m) * W, W);

  std::vector<std::complex<double>> col(H);
  for (int v = 0; v < W; ++v) {
    for (int m = 0; m < H; ++m) col[m] = buf[std::size_t(m) * W + v];
    detail::fft1_inplace(col.data(), H);
    for (int u = 0; u < H; ++u) buf[std::size_t(u) * W + v] = col[u];
  }

  Spectrum<S> out(H, W);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    out.re[i] = static_cast<S>(buf[i].real());
    out.im[i] = static_cast<S>(buf[i].imag());
  }
  return out;
}

// Auxiliary-task target: channel 0 = |F|, channel 1 = phase in (-pi, pi],
// both computed from fft2(grayscale(image)). Phase at a zero bin is 0.
// With log_magnitude, channel 0 carries log1p(|F|) instead; off by default.
template <typename S>
Tensor<S> ft_target(const Tensor<S>& image, bool log_magnitude = false) {
  Tensor<S> gray = grayscale(image);
  Spectrum<S> spec = fft2(gray);
  const int H = spec.h, W = spec.w;
  const std::size_t plane = std::size_t(H) * W;
  Tensor<S> out({2, H, W});
  S* mag = out.ptr();
  S* phase = out.ptr() + plane;
  const double pi = 3.14159265358979323846;
  for (std::size_t i = 0; i < plane; ++i) {
    const double re = spec.re[i], im = spec.im[i];
    const double m = std::sqrt(re * re + im * im);
    mag[i] = static_cast<S>(log_magnitude ? std::log1p(m) : m);
    double p = (re == 0.0 && im == 0.0) ? 0.0 : std::atan2(im, re);
    if (p <= -pi) p = pi;
    phase[i] = static_cast<S>(p);
  }
  return out;
}

}  // namespace auxtrain
