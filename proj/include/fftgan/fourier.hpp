#pragma once

// Real 2D FFT on power-of-two grids, plus the adjoint maps needed for
// backprop through a frequency-domain stream.
//
// Convention (used everywhere): forward transform is unnormalized,
// inverse carries the 1/(H*W) factor.

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fftgan/common.hpp"
#include "fftgan/tensor.hpp"

namespace fftgan {

using cplx = std::complex<double>;

inline constexpr double kPi = 3.141592653589793238462643383279502884;

// O(N^2) transform straight from the definition. Oracle only.
inline std::vector<cplx> dft1d_reference(const std::vector<cplx>& x) {
  const size_t n = x.size();
  if (n == 0) throw std::invalid_argument("dft1d_reference: empty sequence");
  std::vector<cplx> out(n);
  for (size_t k = 0; k < n; ++k) {
    cplx acc(0.0, 0.0);
    for (size_t j = 0; j < n; ++j) {
      const double ang = -2.0 * kPi * double((k * j) % n) / double(n);
      acc += x[j] * cplx(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

namespace detail {

inline const std::vector<cplx>& twiddle_table(size_t n, int sign) {
  static std::map<std::pair<size_t, int>, std::vector<cplx>> cache;
  auto key = std::make_pair(n, sign);
  auto it = cache.find(key);
  if (it == cache.end()) {
    std::vector<cplx> t(n / 2);
    for (size_t k = 0; k < n / 2; ++k)
      t[k] = std::polar(1.0, double(sign) * 2.0 * kPi * double(k) / double(n));
    it = cache.emplace(key, std::move(t)).first;
  }
  return it->second;
}

}  // namespace detail

// In-place iterative radix-2. sign=-1 forward, sign=+1 inverse; neither
// direction scales, callers apply 1/N where the convention demands it.
inline void fft1d(std::vector<cplx>& a, int sign) {
  const size_t n = a.size();
  if (!is_pow2(n)) throw std::invalid_argument("fft1d: length " + std::to_string(n) + " is not a power of two");
  if (n <= 1) return;
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const auto& tw = detail::twiddle_table(n, sign);
  for (size_t len = 2; len <= n; len <<= 1) {
    const size_t stride = n / len;
    for (size_t i = 0; i < n; i += len) {
      for (size_t k = 0; k < len / 2; ++k) {
        const cplx w = tw[k * stride];
        const cplx u = a[i + k];
        const cplx v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

// Half-spectrum of a real 2D transform, per batch element and channel.
// Stores the original width so the inverse is exact even at W=1.
struct ComplexGrid {
  int batch = 0;
  int channels = 0;
  int H = 0;
  int Wh = 0;  // floor(W/2)+1
  int W = 0;
  std::vector<double> re, im;  // layout [batch][channel][u][v]

  size_t plane() const { return size_t(H) * size_t(Wh); }
  size_t total() const { return size_t(batch) * size_t(channels) * plane(); }

  static ComplexGrid make(int batch, int channels, int H, int W) {
    ComplexGrid g;
    g.batch = batch;
    g.channels = channels;
    g.H = H;
    g.W = W;
    g.Wh = W / 2 + 1;
    g.re.assign(g.total(), 0.0);
    g.im.assign(g.total(), 0.0);
    return g;
  }

  void validate(const char* who) const {
    if (batch <= 0 || channels <= 0 || H <= 0 || W <= 0)
      throw std::invalid_argument(std::string(who) + ": malformed half-spectrum (non-positive extent)");
    if (Wh != W / 2 + 1)
      throw std::invalid_argument(std::string(who) + ": malformed half-spectrum (half width " + std::to_string(Wh) +
                                  " does not match width " + std::to_string(W) + ")");
    if (!is_pow2(static_cast<size_t>(H)) || !is_pow2(static_cast<size_t>(W)))
      throw std::invalid_argument(std::string(who) + ": extents " + std::to_string(H) + "x" + std::to_string(W) +
                                  " are not powers of two");
    if (re.size() != total() || im.size() != total())
      throw std::invalid_argument(std::string(who) + ": malformed half-spectrum (plane storage size mismatch)");
  }
};

namespace detail {

// rfft2 of one H*W real plane into H*Wh split re/im.
inline void rfft2_plane(const double* x, int H, int W, double* out_re, double* out_im) {
  const int Wh = W / 2 + 1;
  std::vector<cplx> row(static_cast<size_t>(W));
  std::vector<cplx> tmp(size_t(H) * size_t(Wh));
  for (int m = 0; m < H; ++m) {
    for (int n = 0; n < W; ++n) row[size_t(n)] = cplx(x[size_t(m) * W + n], 0.0);
    fft1d(row, -1);
    for (int v = 0; v < Wh; ++v) tmp[size_t(m) * Wh + v] = row[size_t(v)];
  }
  std::vector<cplx> col(static_cast<size_t>(H));
  for (int v = 0; v < Wh; ++v) {
    for (int m = 0; m < H; ++m) col[size_t(m)] = tmp[size_t(m) * Wh + v];
    fft1d(col, -1);
    for (int u = 0; u < H; ++u) {
      out_re[size_t(u) * Wh + v] = col[size_t(u)].real();
      out_im[size_t(u) * Wh + v] = col[size_t(u)].imag();
    }
  }
}

// Rebuild the implied full spectrum from a half-spectrum, unnormalized
// inverse transform it, and emit scale * Re(result). With hermitian=true the
// missing columns come from conjugate symmetry (the true inverse); with
// hermitian=false they are zero (the adjoint of the forward map).
inline void half_inverse_real(const double* zre, const double* zim, int H, int W, bool hermitian, double scale,
                              bool accumulate, double* out) {
  const int Wh = W / 2 + 1;
  std::vector<cplx> full(size_t(H) * size_t(W), cplx(0.0, 0.0));
  for (int u = 0; u < H; ++u)
    for (int v = 0; v < Wh; ++v) full[size_t(u) * W + v] = cplx(zre[size_t(u) * Wh + v], zim[size_t(u) * Wh + v]);
  if (hermitian) {
    for (int u = 0; u < H; ++u) {
      const int uc = (H - u) % H;
      for (int v = Wh; v < W; ++v)
        full[size_t(u) * W + v] = std::conj(full[size_t(uc) * W + (W - v)]);
    }
  }
  std::vector<cplx> row(static_cast<size_t>(W));
  for (int u = 0; u < H; ++u) {
    for (int v = 0; v < W; ++v) row[size_t(v)] = full[size_t(u) * W + v];
    fft1d(row, +1);
    for (int v = 0; v < W; ++v) full[size_t(u) * W + v] = row[size_t(v)];
  }
  std::vector<cplx> col(static_cast<size_t>(H));
  for (int n = 0; n < W; ++n) {
    for (int u = 0; u < H; ++u) col[size_t(u)] = full[size_t(u) * W + n];
    fft1d(col, +1);
    for (int m = 0; m < H; ++m) {
      const double val = scale * col[size_t(m)].real();
      if (accumulate)
        out[size_t(m) * W + n] += val;
      else
        out[size_t(m) * W + n] = val;
    }
  }
}

inline void irfft2_plane(const double* zre, const double* zim, int H, int W, double* out) {
  half_inverse_real(zre, zim, H, W, /*hermitian=*/true, 1.0 / (double(H) * double(W)), /*accumulate=*/false, out);
}

// Adjoint of rfft2: gradient w.r.t. the input plane, accumulated.
inline void rfft2_adjoint_plane(const double* gre, const double* gim, int H, int W, double* gx) {
  half_inverse_real(gre, gim, H, W, /*hermitian=*/false, 1.0, /*accumulate=*/true, gx);
}

// Adjoint of irfft2: (c_v/(H*W)) * rfft2(g), accumulated. c_v is 1 on the
// self-conjugate columns v=0 and v=W/2 and 2 elsewhere, because interior
// columns of the half-spectrum stand for two bins of the full spectrum.
inline void irfft2_adjoint_plane(const double* g, int H, int W, double* gzre, double* gzim) {
  const int Wh = W / 2 + 1;
  std::vector<double> fre(size_t(H) * size_t(Wh)), fim(size_t(H) * size_t(Wh));
  rfft2_plane(g, H, W, fre.data(), fim.data());
  const double inv = 1.0 / (double(H) * double(W));
  for (int u = 0; u < H; ++u)
    for (int v = 0; v < Wh; ++v) {
      const double cv = (v == 0 || 2 * v == W) ? 1.0 : 2.0;
      gzre[size_t(u) * Wh + v] += cv * inv * fre[size_t(u) * Wh + v];
      gzim[size_t(u) * Wh + v] += cv * inv * fim[size_t(u) * Wh + v];
    }
}

inline void require_pow2_hw(const char* who, const Shape& s) {
  if (s.size() != 4) throw std::invalid_argument(std::string(who) + ": expected rank-4 input, got " + shape_str(s));
  if (!is_pow2(size_t(s[2])) || !is_pow2(size_t(s[3])))
    throw std::invalid_argument(std::string(who) + ": spatial extents of " + shape_str(s) +
                                " are not powers of two");
}

}  // namespace detail

// --- pure half-spectrum transforms -----------------------------------------

inline ComplexGrid rfft2(const Tensor& x) {
  detail::require_pow2_hw("rfft2", x.shape());
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  ComplexGrid g = ComplexGrid::make(B, C, H, W);
  const size_t sp = size_t(H) * size_t(W);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const size_t p = size_t(b) * C + c;
      detail::rfft2_plane(x.data().data() + p * sp, H, W, g.re.data() + p * g.plane(), g.im.data() + p * g.plane());
    }
  return g;
}

inline Tensor irfft2(const ComplexGrid& g) {
  g.validate("irfft2");
  Tensor out = Tensor::zeros({g.batch, g.channels, g.H, g.W});
  const size_t sp = size_t(g.H) * size_t(g.W);
  for (int b = 0; b < g.batch; ++b)
    for (int c = 0; c < g.channels; ++c) {
      const size_t p = size_t(b) * g.channels + c;
      detail::irfft2_plane(g.re.data() + p * g.plane(), g.im.data() + p * g.plane(), g.H, g.W,
                           out.data().data() + p * sp);
    }
  return out;
}

// Gradient of rfft2 as a linear-operator adjoint: given dL/dX on the stored
// bins, returns dL/dx. No conjugate double-counting here — bins outside the
// half-spectrum were never produced, so their gradient is zero.
inline Tensor rfft2_backward(const ComplexGrid& g) {
  g.validate("rfft2_backward");
  Tensor out = Tensor::zeros({g.batch, g.channels, g.H, g.W});
  const size_t sp = size_t(g.H) * size_t(g.W);
  for (int b = 0; b < g.batch; ++b)
    for (int c = 0; c < g.channels; ++c) {
      const size_t p = size_t(b) * g.channels + c;
      detail::rfft2_adjoint_plane(g.re.data() + p * g.plane(), g.im.data() + p * g.plane(), g.H, g.W,
                                  out.data().data() + p * sp);
    }
  return out;
}

// --- autodiff bridge --------------------------------------------------------

// [B,C,H,W] -> [B,2C,H,W/2+1]; channel c holds Re of input channel c,
// channel C+c holds Im. W must be at least 2 so the inverse can recover it.
inline Tensor spectrum_forward(const Tensor& x) {
  detail::require_pow2_hw("spectrum_forward", x.shape());
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (W < 2) throw std::invalid_argument("spectrum_forward: width must be at least 2, got " + shape_str(x.shape()));
  const int Wh = W / 2 + 1;
  const size_t sp = size_t(H) * size_t(W);
  const size_t fp = size_t(H) * size_t(Wh);
  std::vector<double> val(size_t(B) * 2 * C * fp);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const size_t src = (size_t(b) * C + c) * sp;
      double* re = val.data() + (size_t(b) * 2 * C + c) * fp;
      double* im = val.data() + (size_t(b) * 2 * C + C + c) * fp;
      detail::rfft2_plane(x.data().data() + src, H, W, re, im);
    }
  return make_op({B, 2 * C, H, Wh}, std::move(val), "spectrum_forward", {x}, [B, C, H, W, sp, fp](TensorNode& n) {
    auto& px = *n.parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double* gre = n.grad.data() + (size_t(b) * 2 * C + c) * fp;
        const double* gim = n.grad.data() + (size_t(b) * 2 * C + C + c) * fp;
        detail::rfft2_adjoint_plane(gre, gim, H, W, px.grad.data() + (size_t(b) * C + c) * sp);
      }
  });
}

// [B,2C,H,Wh] -> [B,C,H,W] with W = 2*(Wh-1); inverse of the layout above.
inline Tensor spectrum_inverse(const Tensor& z) {
  const Shape& s = z.shape();
  if (s.size() != 4) throw std::invalid_argument("spectrum_inverse: expected rank-4 input, got " + shape_str(s));
  if (s[1] % 2 != 0)
    throw std::invalid_argument("spectrum_inverse: channel count of " + shape_str(s) +
                                " is odd, needs paired re/im planes");
  const int B = s[0], C = s[1] / 2, H = s[2], Wh = s[3];
  const int W = 2 * (Wh - 1);
  if (W < 2 || !is_pow2(static_cast<size_t>(W)) || !is_pow2(static_cast<size_t>(H)))
    throw std::invalid_argument("spectrum_inverse: " + shape_str(s) + " does not describe a power-of-two spectrum");
  const size_t sp = size_t(H) * size_t(W);
  const size_t fp = size_t(H) * size_t(Wh);
  std::vector<double> val(size_t(B) * C * sp);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* re = z.data().data() + (size_t(b) * 2 * C + c) * fp;
      const double* im = z.data().data() + (size_t(b) * 2 * C + C + c) * fp;
      detail::irfft2_plane(re, im, H, W, val.data() + (size_t(b) * C + c) * sp);
    }
  return make_op({B, C, H, W}, std::move(val), "spectrum_inverse", {z}, [B, C, H, W, sp, fp](TensorNode& n) {
    auto& pz = *n.parents[0];
    if (!pz.requires_grad) return;
    pz.ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double* g = n.grad.data() + (size_t(b) * C + c) * sp;
        double* gre = pz.grad.data() + (size_t(b) * 2 * C + c) * fp;
        double* gim = pz.grad.data() + (size_t(b) * 2 * C + C + c) * fp;
        detail::irfft2_adjoint_plane(g, H, W, gre, gim);
      }
  });
}

}  // namespace fftgan
