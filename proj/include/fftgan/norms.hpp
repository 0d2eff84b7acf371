#pragma once

// Spectral normalization with persistent power iteration, plus the two
// feature-normalization layers of the image generator: per-region style
// injection over a semantic label map, and spatially varying modulation
// predicted from an encoder feature map.

#include <cmath>
#include <string>
#include <vector>

#include "fftgan/common.hpp"
#include "fftgan/rng.hpp"
#include "fftgan/tensor.hpp"

namespace fftgan {

// Persistent left/right singular-vector estimates for one weight tensor.
// Conv kernels [O,C,k,k] are treated as their O x (C*k*k) matrix.
struct SNState {
  std::vector<double> u, v;
  double sigma = 0.0;
  std::string owner;
};

inline SNState sn_init(const Tensor& W, const std::string& owner, Rng& rng) {
  const int M = W.dim(0);
  const size_t N = W.size() / size_t(M);
  SNState s;
  s.owner = owner;
  s.u.resize(size_t(M));
  s.v.assign(N, 0.0);
  double nrm = 0.0;
  for (auto& e : s.u) {
    e = rng.normal();
    nrm += e * e;
  }
  nrm = std::sqrt(nrm);
  if (nrm == 0.0) {
    s.u[0] = 1.0;
    nrm = 1.0;
  }
  for (auto& e : s.u) e /= nrm;
  return s;
}

// v <- normalize(W^T u); u <- normalize(W v); sigma <- u^T W v.
// A zero matrix leaves the vectors untouched and reports sigma 0.
inline void power_iteration_step(const Tensor& Wt, SNState& s) {
  const int M = Wt.dim(0);
  const size_t N = Wt.size() / size_t(M);
  if (s.u.size() != size_t(M) || s.v.size() != N)
    throw std::invalid_argument("power_iteration_step: state sized " + std::to_string(s.u.size()) + "x" +
                                std::to_string(s.v.size()) + " does not match weight " + shape_str(Wt.shape()));
  const auto& w = Wt.data();
  std::vector<double> vn(N, 0.0);
  for (int m = 0; m < M; ++m) {
    const double um = s.u[size_t(m)];
    const double* row = w.data() + size_t(m) * N;
    for (size_t n = 0; n < N; ++n) vn[n] += row[n] * um;
  }
  double nv = 0.0;
  for (double e : vn) nv += e * e;
  nv = std::sqrt(nv);
  if (nv < 1e-290) {
    s.sigma = 0.0;
    return;
  }
  for (size_t n = 0; n < N; ++n) s.v[n] = vn[n] / nv;
  std::vector<double> un(size_t(M), 0.0);
  for (int m = 0; m < M; ++m) {
    const double* row = w.data() + size_t(m) * N;
    double acc = 0.0;
    for (size_t n = 0; n < N; ++n) acc += row[n] * s.v[n];
    un[size_t(m)] = acc;
  }
  double nu = 0.0;
  for (double e : un) nu += e * e;
  nu = std::sqrt(nu);
  if (nu < 1e-290) {
    s.sigma = 0.0;
    return;
  }
  for (int m = 0; m < M; ++m) s.u[size_t(m)] = un[size_t(m)] / nu;
  s.sigma = nu;  // equals u^T W v with the fresh u
}

// W / sigma, with sigma held constant in the backward pass. sigma 0 is a
// degenerate state (zero weights): warn and pass W through unscaled.
inline Tensor spectral_normalize(const Tensor& W, const SNState& s) {
  if (s.sigma <= 0.0) {
    warn("spectral_normalize: zero spectral estimate for '" + s.owner + "', leaving weights unscaled");
    return W;
  }
  return scale(W, 1.0 / s.sigma);
}

// --- semantic-region pooling and normalization ------------------------------

// Masked spatial average of F over pixels labeled j; a sample whose region j
// is empty falls back to its global spatial average. Returns [B,C].
inline Tensor per_region_pool(const Tensor& F, const Tensor& labels, int j) {
  if (j < 0 || j > 7) throw std::invalid_argument("per_region_pool: label " + std::to_string(j) + " outside 0..7");
  if (F.rank() != 4 || labels.rank() != 3) fail_dims("per_region_pool", F.shape(), labels.shape(), "need [B,C,H,W] features and [B,H,W] labels");
  const int B = F.dim(0), C = F.dim(1), H = F.dim(2), W = F.dim(3);
  if (labels.dim(0) != B || labels.dim(1) != H || labels.dim(2) != W)
    fail_dims("per_region_pool", F.shape(), labels.shape(), "have mismatched spatial extents");

  const size_t hw = size_t(H) * size_t(W);
  std::vector<double> weight(size_t(B) * hw, 0.0);
  for (int b = 0; b < B; ++b) {
    const double* lab = labels.data().data() + size_t(b) * hw;
    double count = 0.0;
    for (size_t i = 0; i < hw; ++i)
      if (lab[i] == double(j)) count += 1.0;
    double* wp = weight.data() + size_t(b) * hw;
    if (count > 0.0) {
      for (size_t i = 0; i < hw; ++i) wp[i] = (lab[i] == double(j)) ? 1.0 / count : 0.0;
    } else {
      for (size_t i = 0; i < hw; ++i) wp[i] = 1.0 / double(hw);
    }
  }

  std::vector<double> value(size_t(B) * C, 0.0);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* fp = F.data().data() + (size_t(b) * C + c) * hw;
      const double* wp = weight.data() + size_t(b) * hw;
      double acc = 0.0;
      for (size_t i = 0; i < hw; ++i) acc += fp[i] * wp[i];
      value[size_t(b) * C + c] = acc;
    }

  return make_op({B, C}, std::move(value), "per_region_pool", {F}, [B, C, hw, weight](TensorNode& n) {
    auto& pf = *n.parents[0];
    if (!pf.requires_grad) return;
    pf.ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double g = n.grad[size_t(b) * C + c];
        double* gf = pf.grad.data() + (size_t(b) * C + c) * hw;
        const double* wp = weight.data() + size_t(b) * hw;
        for (size_t i = 0; i < hw; ++i) gf[i] += g * wp[i];
      }
  });
}

// Broadcast one style vector per pixel according to its label:
// styles [B,L,D] + labels [B,H,W] -> [B,D,H,W].
inline Tensor label_select(const Tensor& styles, const Tensor& labels) {
  if (styles.rank() != 3 || labels.rank() != 3)
    fail_dims("label_select", styles.shape(), labels.shape(), "need [B,L,D] styles and [B,H,W] labels");
  const int B = styles.dim(0), L = styles.dim(1), D = styles.dim(2);
  const int H = labels.dim(1), W = labels.dim(2);
  if (labels.dim(0) != B) fail_dims("label_select", styles.shape(), labels.shape(), "have mismatched batch sizes");
  const size_t hw = size_t(H) * size_t(W);
  std::vector<int> idx(size_t(B) * hw);
  for (size_t i = 0; i < idx.size(); ++i) {
    const double lv = labels.data()[i];
    const int li = int(lv);
    if (lv != double(li) || li < 0 || li >= L)
      throw std::invalid_argument("label_select: label value " + std::to_string(lv) + " outside 0.." +
                                  std::to_string(L - 1));
    idx[i] = li;
  }
  std::vector<double> value(size_t(B) * D * hw);
  for (int b = 0; b < B; ++b)
    for (int d = 0; d < D; ++d) {
      double* out = value.data() + (size_t(b) * D + d) * hw;
      const int* ip = idx.data() + size_t(b) * hw;
      const double* sp = styles.data().data() + size_t(b) * L * D;
      for (size_t i = 0; i < hw; ++i) out[i] = sp[size_t(ip[i]) * D + d];
    }
  return make_op({B, D, H, W}, std::move(value), "label_select", {styles}, [B, L, D, hw, idx](TensorNode& n) {
    auto& ps = *n.parents[0];
    if (!ps.requires_grad) return;
    ps.ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int d = 0; d < D; ++d) {
        const double* g = n.grad.data() + (size_t(b) * D + d) * hw;
        const int* ip = idx.data() + size_t(b) * hw;
        double* gs = ps.grad.data() + size_t(b) * L * D;
        for (size_t i = 0; i < hw; ++i) gs[size_t(ip[i]) * D + d] += g[i];
      }
  });
}

inline Tensor instance_norm(const Tensor& F, double eps = 1e-5) {
  if (F.rank() != 4) throw std::invalid_argument("instance_norm: expected rank-4, got " + shape_str(F.shape()));
  const int B = F.dim(0), C = F.dim(1);
  Tensor mu = reshape(spatial_mean(F), {B, C, 1, 1});
  Tensor centered = F - mu;
  Tensor var = reshape(spatial_mean(square(centered)), {B, C, 1, 1});
  return div(centered, sqrt(add_scalar(var, eps)));
}

// Projections taking a per-pixel style vector to per-channel scale and shift.
// Zero init makes the layer start as plain instance normalization.
struct RegionNormParams {
  Tensor gw, gb;  // [C,D,1,1], [C]
  Tensor bw, bb;

  static RegionNormParams init(int C, int D) {
    RegionNormParams p;
    p.gw = Tensor::zeros({C, D, 1, 1}, true);
    p.gb = Tensor::zeros({C}, true);
    p.bw = Tensor::zeros({C, D, 1, 1}, true);
    p.bb = Tensor::zeros({C}, true);
    return p;
  }

  void register_params(ParamStore& store, const std::string& prefix) {
    store.add(prefix + ".gw", gw);
    store.add(prefix + ".gb", gb);
    store.add(prefix + ".bw", bw);
    store.add(prefix + ".bb", bb);
  }
};

// Instance-normalize F, then scale/shift each pixel by an affine projection
// of the style vector belonging to that pixel's target-region label.
inline Tensor per_region_normalize(const Tensor& F, const Tensor& labels, const Tensor& styles,
                                   const RegionNormParams& p) {
  const int C = F.dim(1);
  Tensor normed = instance_norm(F);
  Tensor smap = label_select(styles, labels);
  Tensor gamma = conv2d(smap, p.gw) + reshape(p.gb, {1, C, 1, 1});
  Tensor beta = conv2d(smap, p.bw) + reshape(p.bb, {1, C, 1, 1});
  return normed + mul(normed, gamma) + beta;
}

// 3x3 replicate-pad convs over an encoder map predict spatially varying
// scale/shift. Zero init again reduces to plain instance normalization.
struct SpatialNormParams {
  Tensor scale_w, shift_w;  // [C,Ce,3,3]

  static SpatialNormParams init(int C, int Ce) {
    SpatialNormParams p;
    p.scale_w = Tensor::zeros({C, Ce, 3, 3}, true);
    p.shift_w = Tensor::zeros({C, Ce, 3, 3}, true);
    return p;
  }

  void register_params(ParamStore& store, const std::string& prefix) {
    store.add(prefix + ".scale_w", scale_w);
    store.add(prefix + ".shift_w", shift_w);
  }
};

inline Tensor spatial_aware_normalize(const Tensor& F, const Tensor& E, const SpatialNormParams& p) {
  if (F.rank() != 4 || E.rank() != 4) fail_dims("spatial_aware_normalize", F.shape(), E.shape(), "must both be rank-4");
  if (E.dim(2) != F.dim(2) || E.dim(3) != F.dim(3))
    fail_dims("spatial_aware_normalize", F.shape(), E.shape(), "need matching spatial extents (resize E first)");
  Tensor normed = instance_norm(F);
  Tensor s = conv2d_replicate(E, p.scale_w);
  Tensor t = conv2d_replicate(E, p.shift_w);
  return normed + mul(normed, s) + t;
}

}  // namespace fftgan
