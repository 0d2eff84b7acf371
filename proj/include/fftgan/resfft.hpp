#pragma once

// Residual block with a parallel frequency stream:
//   out = x + conv3x3(relu(conv3x3(x))) + irfft2(conv1x1(relu(conv1x1(rfft2(x)))))
// The 1x1 convs act on 2C channels: real planes stacked on imaginary planes.
// With use_freq=false the block degrades to a conventional ResBlock of the
// same shape, which is what the ablation harness toggles.

#include <cmath>
#include <string>
#include <vector>

#include "fftgan/fourier.hpp"
#include "fftgan/rng.hpp"
#include "fftgan/tensor.hpp"

namespace fftgan {

struct ResFFTBlock {
  Tensor s1, s2;  // [C,C,3,3]
  Tensor f1, f2;  // [2C,2C,1,1]
  bool use_freq = true;

  // Each stream's closing conv starts at zero so the block is the identity at
  // init; the opening convs get small random weights so the zero layers still
  // receive gradient (a fully zero stream would be stuck behind relu(0)).
  static ResFFTBlock init(int C, Rng& rng, bool use_freq = true) {
    ResFFTBlock b;
    b.use_freq = use_freq;
    auto he = [&rng](const Shape& s, int fan_in) {
      std::vector<double> v(numel(s));
      const double sd = std::sqrt(2.0 / double(fan_in));
      for (auto& x : v) x = sd * rng.normal();
      return Tensor::from_data(s, v, true);
    };
    b.s1 = he({C, C, 3, 3}, C * 9);
    b.s2 = Tensor::zeros({C, C, 3, 3}, true);
    b.f1 = he({2 * C, 2 * C, 1, 1}, 2 * C);
    b.f2 = Tensor::zeros({2 * C, 2 * C, 1, 1}, true);
    return b;
  }

  int channels() const { return s1.dim(1); }

  Tensor forward(const Tensor& x) const {
    Tensor out = x + conv2d(relu(conv2d(x, s1, 1, 1)), s2, 1, 1);
    if (use_freq) {
      Tensor z = spectrum_forward(x);
      z = conv2d(relu(conv2d(z, f1, 1, 0)), f2, 1, 0);
      out = out + spectrum_inverse(z);
    }
    return out;
  }

  void register_params(ParamStore& store, const std::string& prefix) {
    store.add(prefix + ".s1", s1);
    store.add(prefix + ".s2", s2);
    if (use_freq) {
      store.add(prefix + ".f1", f1);
      store.add(prefix + ".f2", f2);
    }
  }
};

// Ratio of output to input spectral magnitude at one frequency bin for a unit
// sinusoid fed to every channel. A zero-weight block gives exactly 1; a plain
// 3x3 ResBlock can only reshape what its 5-pixel receptive field sees, while
// the frequency stream is global.
inline double frequency_response_probe(const ResFFTBlock& block, int H, int W, int u0, int v0) {
  const int C = block.channels();
  Tensor x = Tensor::zeros({1, C, H, W});
  for (int c = 0; c < C; ++c)
    for (int m = 0; m < H; ++m)
      for (int n = 0; n < W; ++n)
        x.data()[(size_t(c) * H + m) * W + n] = std::cos(2.0 * kPi * (double(u0) * m / H + double(v0) * n / W));
  ComplexGrid gin = rfft2(x);
  ComplexGrid gout = rfft2(block.forward(x).detach());
  const int Wh = gin.Wh;
  const size_t bin = size_t(u0) * Wh + size_t(v0);
  double ein = 0.0, eout = 0.0;
  for (int c = 0; c < C; ++c) {
    const size_t i = size_t(c) * gin.plane() + bin;
    ein += gin.re[i] * gin.re[i] + gin.im[i] * gin.im[i];
    eout += gout.re[i] * gout.re[i] + gout.im[i] * gout.im[i];
  }
  return std::sqrt(eout / ein);
}

}  // namespace fftgan
