#include "fftgan/resfft.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "fftgan/rng.hpp"
#include "oracles.hpp"

using namespace fftgan;

namespace {

ResFFTBlock random_block(int C, Rng& rng, bool use_freq = true) {
  ResFFTBlock b = ResFFTBlock::init(C, rng, use_freq);
  for (auto* t : {&b.s2, &b.f2})
    for (auto& v : t->data()) v = 0.3 * rng.normal();
  return b;
}

}  // namespace

TEST(ResFFT, ZeroWeightsIsExactIdentity) {
  Rng rng(31);
  ResFFTBlock b;
  b.s1 = Tensor::zeros({2, 2, 3, 3}, true);
  b.s2 = Tensor::zeros({2, 2, 3, 3}, true);
  b.f1 = Tensor::zeros({4, 4, 1, 1}, true);
  b.f2 = Tensor::zeros({4, 4, 1, 1}, true);
  Tensor x = Tensor::from_data({1, 2, 4, 4}, [&] {
    std::vector<double> v(32);
    for (auto& e : v) e = rng.normal();
    return v;
  }());
  Tensor y = b.forward(x);
  ASSERT_EQ(y.shape(), x.shape());
  for (size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(ResFFT, DefaultInitIsIdentity) {
  Rng rng(32);
  ResFFTBlock b = ResFFTBlock::init(4, rng);
  std::vector<double> v(size_t(2) * 4 * 8 * 8);
  for (auto& e : v) e = rng.normal();
  Tensor x = Tensor::from_data({2, 4, 8, 8}, v);
  Tensor y = b.forward(x);
  for (size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-12);
}

// Identity 1x1 freq convs with zero spatial convs double the input, provided
// the spectrum is nonnegative so the interior relu passes it through. A
// positive constant plus an origin impulse has exactly that property.
TEST(ResFFT, IdentityFreqConvsDoubleNonnegativeSpectrumInput) {
  const int C = 2;
  ResFFTBlock b;
  b.s1 = Tensor::zeros({C, C, 3, 3}, true);
  b.s2 = Tensor::zeros({C, C, 3, 3}, true);
  b.f1 = Tensor::zeros({2 * C, 2 * C, 1, 1}, true);
  b.f2 = Tensor::zeros({2 * C, 2 * C, 1, 1}, true);
  for (int i = 0; i < 2 * C; ++i) {
    b.f1.data()[size_t(i) * 2 * C + i] = 1.0;
    b.f2.data()[size_t(i) * 2 * C + i] = 1.0;
  }
  Tensor x = Tensor::full({1, C, 8, 8}, 0.5);
  for (int c = 0; c < C; ++c) x.data()[size_t(c) * 64] += 1.0;  // impulse at origin, spectrum stays >= 0
  Tensor y = b.forward(x);
  for (size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.data()[i], 2.0 * x.data()[i], 1e-9);
}

TEST(ResFFT, FiniteDifferenceGradientsOnAllParameters) {
  Rng rng(33);
  ResFFTBlock b = random_block(2, rng);
  Tensor x = Tensor::from_data({2, 2, 4, 4}, [&] {
    std::vector<double> v(64);
    for (auto& e : v) e = 0.5 * rng.normal();
    return v;
  }(), true);
  auto forward = [&]() { return sum(square(b.forward(x))); };
  EXPECT_LT(oracle::grad_check_all({x, b.s1, b.s2, b.f1, b.f2}, forward), 1e-4);
}

TEST(ResFFT, ShapePreservedAndNonPow2Throws) {
  Rng rng(34);
  ResFFTBlock b = random_block(3, rng);
  for (auto [H, W] : {std::pair{4, 4}, std::pair{8, 4}, std::pair{4, 16}}) {
    Tensor x = Tensor::zeros({2, 3, H, W});
    EXPECT_EQ(b.forward(x).shape(), (Shape{2, 3, H, W}));
  }
  EXPECT_THROW(b.forward(Tensor::zeros({1, 3, 6, 6})), std::invalid_argument);
}

TEST(ResFFT, AblatedBlockIsPlainResBlock) {
  Rng rng(35);
  ResFFTBlock b = random_block(2, rng, /*use_freq=*/false);
  std::vector<double> v(size_t(1) * 2 * 8 * 8);
  for (auto& e : v) e = rng.normal();
  Tensor x = Tensor::from_data({1, 2, 8, 8}, v);
  Tensor y = b.forward(x);
  Tensor want = x + conv2d(relu(conv2d(x, b.s1, 1, 1)), b.s2, 1, 1);
  ASSERT_EQ(y.shape(), want.shape());
  for (size_t i = 0; i < y.size(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], want.data()[i]);
  // ablated block also works on non power-of-two grids
  EXPECT_EQ(b.forward(Tensor::zeros({1, 2, 6, 6})).shape(), (Shape{1, 2, 6, 6}));
}

TEST(Probe, ZeroBlockHasUnitGainEverywhere) {
  ResFFTBlock b;
  b.s1 = Tensor::zeros({1, 1, 3, 3}, true);
  b.s2 = Tensor::zeros({1, 1, 3, 3}, true);
  b.f1 = Tensor::zeros({2, 2, 1, 1}, true);
  b.f2 = Tensor::zeros({2, 2, 1, 1}, true);
  for (auto [u, v] : {std::pair{0, 0}, std::pair{1, 2}, std::pair{3, 4}, std::pair{7, 0}})
    EXPECT_NEAR(frequency_response_probe(b, 16, 16, u, v), 1.0, 1e-9);
}

// DC through hand-set freq convs: input 1 -> DC bin 64; f1 doubles the real
// channel (relu passes 128), f2 halves it back to 64 -> inverse adds a
// constant 1 -> output 2, so the DC gain is exactly 2.
TEST(Probe, ClosedFormDCGain) {
  ResFFTBlock b;
  b.s1 = Tensor::zeros({1, 1, 3, 3}, true);
  b.s2 = Tensor::zeros({1, 1, 3, 3}, true);
  b.f1 = Tensor::from_data({2, 2, 1, 1}, {2.0, 0.0, 0.0, 0.0}, true);
  b.f2 = Tensor::from_data({2, 2, 1, 1}, {0.5, 0.0, 0.0, 0.0}, true);
  EXPECT_NEAR(frequency_response_probe(b, 8, 8, 0, 0), 2.0, 1e-9);
}

// A single frequency-stream block can rescale DC, which no 3x3 spatial
// residual path applied to a zero-mean-preserving kernel could do globally;
// random blocks stay finite at every probed bin.
TEST(Probe, RandomBlockFiniteGains) {
  Rng rng(36);
  ResFFTBlock b = random_block(2, rng);
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 5; ++v) {
      const double g = frequency_response_probe(b, 8, 8, u, v);
      EXPECT_TRUE(std::isfinite(g)) << u << "," << v;
    }
}

TEST(ResFFT, RegisterParamsNamesAndFreqToggle) {
  Rng rng(37);
  ParamStore store;
  ResFFTBlock full = ResFFTBlock::init(2, rng, true);
  full.register_params(store, "blk");
  EXPECT_EQ(store.items().size(), 4u);
  EXPECT_NE(store.find("blk.f1"), nullptr);
  ParamStore store2;
  ResFFTBlock ablated = ResFFTBlock::init(2, rng, false);
  ablated.register_params(store2, "blk");
  EXPECT_EQ(store2.items().size(), 2u);
  EXPECT_EQ(store2.find("blk.f1"), nullptr);
}
