#include "fftgan/fourier.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fftgan/rng.hpp"
#include "fftgan/tensor.hpp"
#include "oracles.hpp"

using namespace fftgan;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, bool grad = false) {
  std::vector<double> v(numel(s));
  for (auto& x : v) x = rng.normal();
  Tensor t = Tensor::from_data(s, v, grad);
  return t;
}

// Separable full 2D DFT of one real plane, built on the independently written
// 1D oracle. Rows first, then columns.
std::vector<std::complex<double>> dft2_full(const std::vector<double>& x, int H, int W) {
  std::vector<std::complex<double>> grid(x.size());
  for (size_t i = 0; i < x.size(); ++i) grid[i] = {x[i], 0.0};
  for (int m = 0; m < H; ++m) {
    std::vector<std::complex<double>> row(grid.begin() + size_t(m) * W, grid.begin() + size_t(m + 1) * W);
    auto f = oracle::dft_ref(row);
    for (int v = 0; v < W; ++v) grid[size_t(m) * W + v] = f[size_t(v)];
  }
  for (int v = 0; v < W; ++v) {
    std::vector<std::complex<double>> col(static_cast<size_t>(H));
    for (int u = 0; u < H; ++u) col[size_t(u)] = grid[size_t(u) * W + v];
    auto f = oracle::dft_ref(col);
    for (int u = 0; u < H; ++u) grid[size_t(u) * W + v] = f[size_t(u)];
  }
  return grid;
}

}  // namespace

TEST(Dft1dReference, ImpulseAndConstant) {
  auto flat = dft1d_reference({{1, 0}, {0, 0}, {0, 0}, {0, 0}});
  for (auto& c : flat) {
    EXPECT_DOUBLE_EQ(c.real(), 1.0);
    EXPECT_DOUBLE_EQ(c.imag(), 0.0);
  }
  auto spike = dft1d_reference({{1, 0}, {1, 0}, {1, 0}, {1, 0}});
  EXPECT_NEAR(spike[0].real(), 4.0, 1e-12);
  for (int k = 1; k < 4; ++k) EXPECT_NEAR(std::abs(spike[size_t(k)]), 0.0, 1e-12);
}

TEST(Dft1dReference, ConjugateSymmetryForRealInput) {
  Rng rng(11);
  std::vector<cplx> x(8);
  for (auto& c : x) c = {rng.normal(), 0.0};
  auto X = dft1d_reference(x);
  for (int k = 1; k < 8; ++k) {
    EXPECT_NEAR(X[size_t(8 - k)].real(), X[size_t(k)].real(), 1e-12);
    EXPECT_NEAR(X[size_t(8 - k)].imag(), -X[size_t(k)].imag(), 1e-12);
  }
}

TEST(Fft1d, MatchesBothReferencesOnAllSmallSizes) {
  Rng rng(12);
  for (size_t n : {2u, 4u, 8u, 16u, 32u}) {
    std::vector<cplx> x(n);
    for (auto& c : x) c = {rng.normal(), rng.normal()};
    auto want_lib = dft1d_reference(x);
    auto want_ind = oracle::dft_ref(x);
    auto got = x;
    fft1d(got, -1);
    for (size_t k = 0; k < n; ++k) {
      EXPECT_NEAR(got[k].real(), want_lib[k].real(), 1e-9);
      EXPECT_NEAR(got[k].imag(), want_lib[k].imag(), 1e-9);
      EXPECT_NEAR(got[k].real(), want_ind[k].real(), 1e-9);
      EXPECT_NEAR(got[k].imag(), want_ind[k].imag(), 1e-9);
    }
  }
}

TEST(Fft1d, InverseUndoesForward) {
  Rng rng(13);
  std::vector<cplx> x(16);
  for (auto& c : x) c = {rng.normal(), rng.normal()};
  auto y = x;
  fft1d(y, -1);
  fft1d(y, +1);
  for (size_t k = 0; k < x.size(); ++k) {
    EXPECT_NEAR(y[k].real() / 16.0, x[k].real(), 1e-12);
    EXPECT_NEAR(y[k].imag() / 16.0, x[k].imag(), 1e-12);
  }
}

TEST(Fft1d, NonPowerOfTwoThrows) {
  std::vector<cplx> x(6);
  EXPECT_THROW(fft1d(x, -1), std::invalid_argument);
}

TEST(Rfft2, ConstantImageHasOnlyDCBin) {
  Tensor x = Tensor::full({1, 1, 4, 8}, 2.5);
  ComplexGrid g = rfft2(x);
  EXPECT_EQ(g.Wh, 5);
  EXPECT_NEAR(g.re[0], 2.5 * 4 * 8, 1e-9);
  EXPECT_DOUBLE_EQ(g.im[0], 0.0);
  for (size_t i = 1; i < g.total(); ++i) {
    EXPECT_NEAR(g.re[i], 0.0, 1e-9);
    EXPECT_NEAR(g.im[i], 0.0, 1e-9);
  }
}

TEST(Rfft2, ImpulseAtOriginIsFlat) {
  Tensor x = Tensor::zeros({1, 1, 8, 8});
  x.data()[0] = 1.0;
  ComplexGrid g = rfft2(x);
  for (size_t i = 0; i < g.total(); ++i) {
    EXPECT_NEAR(g.re[i], 1.0, 1e-9);
    EXPECT_NEAR(g.im[i], 0.0, 1e-9);
  }
}

TEST(Rfft2, MatchesSeparableReferenceOnAllSizePairs) {
  Rng rng(14);
  for (int H : {2, 4, 8, 16})
    for (int W : {2, 4, 8, 16}) {
      Tensor x = random_tensor({1, 1, H, W}, rng);
      ComplexGrid g = rfft2(x);
      auto full = dft2_full(x.data(), H, W);
      for (int u = 0; u < H; ++u)
        for (int v = 0; v < g.Wh; ++v) {
          EXPECT_NEAR(g.re[size_t(u) * g.Wh + v], full[size_t(u) * W + v].real(), 1e-9) << H << "x" << W;
          EXPECT_NEAR(g.im[size_t(u) * g.Wh + v], full[size_t(u) * W + v].imag(), 1e-9) << H << "x" << W;
        }
    }
}

TEST(Rfft2, ImpliedFullSpectrumIsConjugateSymmetric) {
  Rng rng(15);
  Tensor x = random_tensor({1, 1, 8, 8}, rng);
  auto full = dft2_full(x.data(), 8, 8);
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      auto a = full[size_t(u) * 8 + v];
      auto b = full[size_t((8 - u) % 8) * 8 + (8 - v) % 8];
      EXPECT_NEAR(b.real(), a.real(), 1e-9);
      EXPECT_NEAR(b.imag(), -a.imag(), 1e-9);
    }
  // DC bin of the real transform is exactly real.
  ComplexGrid g = rfft2(x);
  EXPECT_DOUBLE_EQ(g.im[0], 0.0);
}

TEST(Rfft2, Linearity) {
  Rng rng(16);
  Tensor x = random_tensor({1, 2, 8, 8}, rng);
  Tensor y = random_tensor({1, 2, 8, 8}, rng);
  const double a = 1.7, b = -0.6;
  Tensor mix = Tensor::zeros({1, 2, 8, 8});
  for (size_t i = 0; i < mix.data().size(); ++i) mix.data()[i] = a * x.data()[i] + b * y.data()[i];
  ComplexGrid gm = rfft2(mix), gx = rfft2(x), gy = rfft2(y);
  for (size_t i = 0; i < gm.total(); ++i) {
    EXPECT_NEAR(gm.re[i], a * gx.re[i] + b * gy.re[i], 1e-9);
    EXPECT_NEAR(gm.im[i], a * gx.im[i] + b * gy.im[i], 1e-9);
  }
}

TEST(Rfft2, Parseval) {
  Rng rng(17);
  Tensor x = random_tensor({1, 1, 16, 8}, rng);
  const int H = 16, W = 8;
  ComplexGrid g = rfft2(x);
  double spatial = 0.0;
  for (double v : x.data()) spatial += v * v;
  double spectral = 0.0;  // full-spectrum energy via half-spectrum double counting
  for (int u = 0; u < H; ++u)
    for (int v = 0; v < g.Wh; ++v) {
      const double cv = (v == 0 || 2 * v == W) ? 1.0 : 2.0;
      const size_t i = size_t(u) * g.Wh + v;
      spectral += cv * (g.re[i] * g.re[i] + g.im[i] * g.im[i]);
    }
  spectral /= double(H) * double(W);
  EXPECT_NEAR(spectral, spatial, 1e-6 * std::abs(spatial));
}

TEST(Rfft2, NonPowerOfTwoExtentThrows) {
  EXPECT_THROW(rfft2(Tensor::zeros({1, 1, 3, 4})), std::invalid_argument);
  EXPECT_THROW(rfft2(Tensor::zeros({1, 1, 4, 6})), std::invalid_argument);
  EXPECT_THROW(rfft2(Tensor::zeros({4, 4})), std::invalid_argument);
}

TEST(Irfft2, RoundtripIsIdentity) {
  Rng rng(18);
  for (auto [H, W] : {std::pair{4, 4}, std::pair{8, 4}, std::pair{2, 16}}) {
    Tensor x = random_tensor({2, 3, H, W}, rng);
    Tensor back = irfft2(rfft2(x));
    ASSERT_EQ(back.shape(), x.shape());
    for (size_t i = 0; i < x.data().size(); ++i) EXPECT_NEAR(back.data()[i], x.data()[i], 1e-9);
  }
}

TEST(Irfft2, ZeroSpectrumGivesZeroImage) {
  ComplexGrid g = ComplexGrid::make(1, 1, 4, 4);
  Tensor x = irfft2(g);
  for (double v : x.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Irfft2, CosineSpectrumGivesSampledCosine) {
  const int H = 8, W = 8;
  const int u0 = 2, v0 = 1;
  ComplexGrid g = ComplexGrid::make(1, 1, H, W);
  // cos(2*pi*(u0 m/H + v0 n/W)) has spectrum (HW/2) at (u0,v0) plus the
  // implicit conjugate partner the half-spectrum layout stores only once.
  g.re[size_t(u0) * g.Wh + v0] = double(H) * double(W) / 2.0;
  Tensor x = irfft2(g);
  for (int m = 0; m < H; ++m)
    for (int n = 0; n < W; ++n) {
      const double want = std::cos(2.0 * kPi * (double(u0) * m / H + double(v0) * n / W));
      EXPECT_NEAR(x.data()[size_t(m) * W + n], want, 1e-9);
    }
}

TEST(Irfft2, ForwardOfCosineHitsSingleBin) {
  const int H = 8, W = 8;
  Tensor x = Tensor::zeros({1, 1, H, W});
  for (int m = 0; m < H; ++m)
    for (int n = 0; n < W; ++n)
      x.data()[size_t(m) * W + n] = std::cos(2.0 * kPi * (2.0 * m / H + 1.0 * n / W));
  ComplexGrid g = rfft2(x);
  for (int u = 0; u < H; ++u)
    for (int v = 0; v < g.Wh; ++v) {
      const double want = (u == 2 && v == 1) ? 32.0 : 0.0;
      EXPECT_NEAR(g.re[size_t(u) * g.Wh + v], want, 1e-9);
      EXPECT_NEAR(g.im[size_t(u) * g.Wh + v], 0.0, 1e-9);
    }
}

TEST(Irfft2, MalformedHalfSpectrumThrows) {
  ComplexGrid g = ComplexGrid::make(1, 1, 4, 4);
  g.Wh = 2;  // inconsistent with W=4
  EXPECT_THROW(irfft2(g), std::invalid_argument);
  ComplexGrid h = ComplexGrid::make(1, 1, 4, 4);
  h.re.pop_back();
  EXPECT_THROW(irfft2(h), std::invalid_argument);
}

// <A x, g> == <x, A^T g> for the forward map; exact up to FFT roundoff.
TEST(Rfft2Backward, AdjointIdentity) {
  Rng rng(19);
  Tensor x = random_tensor({1, 2, 8, 8}, rng);
  ComplexGrid gx = rfft2(x);
  ComplexGrid g = ComplexGrid::make(1, 2, 8, 8);
  for (size_t i = 0; i < g.total(); ++i) {
    g.re[i] = rng.normal();
    g.im[i] = rng.normal();
  }
  double lhs = 0.0;
  for (size_t i = 0; i < g.total(); ++i) lhs += gx.re[i] * g.re[i] + gx.im[i] * g.im[i];
  Tensor at = rfft2_backward(g);
  double rhs = 0.0;
  for (size_t i = 0; i < at.data().size(); ++i) rhs += x.data()[i] * at.data()[i];
  EXPECT_NEAR(lhs, rhs, 1e-9 * std::max(1.0, std::abs(lhs)));
}

TEST(Rfft2Backward, FiniteDifferenceChecks) {
  for (uint64_t seed : {21u, 22u, 23u}) {
    Rng rng(seed);
    Tensor x = random_tensor({1, 1, 4, 4}, rng, true);
    Tensor w = random_tensor({1, 2, 4, 3}, rng);  // fixed weights over the spectrum bins
    auto forward = [&]() { return sum(mul(spectrum_forward(x), w)); };
    EXPECT_LT(oracle::grad_check_all({x}, forward), 1e-4) << "seed " << seed;
  }
}

TEST(SpectrumOps, RoundtripAndLayout) {
  Rng rng(24);
  Tensor x = random_tensor({2, 3, 8, 4}, rng);
  Tensor z = spectrum_forward(x);
  ASSERT_EQ(z.shape(), (Shape{2, 6, 8, 3}));
  // channel c is Re, channel C+c is Im of the same plane
  ComplexGrid g = rfft2(x);
  const size_t fp = g.plane();
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c)
      for (size_t i = 0; i < fp; ++i) {
        EXPECT_NEAR(z.data()[(size_t(b) * 6 + c) * fp + i], g.re[(size_t(b) * 3 + c) * fp + i], 1e-12);
        EXPECT_NEAR(z.data()[(size_t(b) * 6 + 3 + c) * fp + i], g.im[(size_t(b) * 3 + c) * fp + i], 1e-12);
      }
  Tensor back = spectrum_inverse(z);
  ASSERT_EQ(back.shape(), x.shape());
  for (size_t i = 0; i < x.data().size(); ++i) EXPECT_NEAR(back.data()[i], x.data()[i], 1e-9);
}

TEST(SpectrumOps, GradientsThroughRoundtripComposite) {
  Rng rng(25);
  Tensor x = random_tensor({1, 2, 4, 4}, rng, true);
  Tensor scalewt = random_tensor({1, 4, 4, 3}, rng, true);
  auto forward = [&]() { return sum(square(spectrum_inverse(mul(spectrum_forward(x), scalewt)))); };
  EXPECT_LT(oracle::grad_check_all({x, scalewt}, forward), 1e-4);
}

TEST(SpectrumOps, InverseAdjointIdentity) {
  Rng rng(26);
  Tensor z = random_tensor({1, 2, 8, 5}, rng, true);  // Wh=5 -> W=8
  Tensor y = random_tensor({1, 1, 8, 8}, rng);
  Tensor out = spectrum_inverse(z);
  double lhs = 0.0;
  for (size_t i = 0; i < out.data().size(); ++i) lhs += out.data()[i] * y.data()[i];
  sum(mul(out, y)).backward();
  ComplexGrid gz = ComplexGrid::make(1, 1, 8, 8);
  double rhs = 0.0;
  for (size_t i = 0; i < z.data().size(); ++i) rhs += z.data()[i] * z.grad()[i];
  (void)gz;
  EXPECT_NEAR(lhs, rhs, 1e-9 * std::max(1.0, std::abs(lhs)));
}

TEST(SpectrumOps, ShapeValidation) {
  EXPECT_THROW(spectrum_forward(Tensor::zeros({1, 1, 3, 4})), std::invalid_argument);
  EXPECT_THROW(spectrum_inverse(Tensor::zeros({1, 3, 4, 3})), std::invalid_argument);  // odd channels
  EXPECT_THROW(spectrum_inverse(Tensor::zeros({1, 2, 4, 4})), std::invalid_argument);  // Wh=4 -> W=6 not pow2
}
