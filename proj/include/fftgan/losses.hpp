#pragma once

// Training objectives: parsing losses (l1 + cross-entropy), image losses
// (correspondence, perceptual, style), the Sinkhorn realization of the
// Wasserstein adversarial term, and the discriminator's hinge loss.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fftgan/common.hpp"
#include "fftgan/rng.hpp"
#include "fftgan/tensor.hpp"

namespace fftgan {

// Fixed random-weight feature extractor standing in for a pretrained
// perceptual backbone: 4 stages of conv3x3 + ReLU + avgpool, tapped after
// each stage. Weights are seeded, immutable, and never receive gradient;
// gradient still flows through the convs into the input image.
struct FeatureNet {
  std::vector<Tensor> ws;

  static constexpr int kStages = 4;

  static FeatureNet make(int in_ch = 3, std::uint64_t seed = 77) {
    static constexpr int kWidths[kStages] = {8, 12, 16, 20};
    FeatureNet f;
    Rng rng(seed);
    int c = in_ch;
    for (int s = 0; s < kStages; ++s) {
      const int o = kWidths[s];
      std::vector<double> v(size_t(o) * c * 9);
      const double sd = std::sqrt(2.0 / double(c * 9));
      for (auto& e : v) e = sd * rng.normal();
      f.ws.push_back(Tensor::from_data({o, c, 3, 3}, v, /*requires_grad=*/false));
      c = o;
    }
    return f;
  }

  // Input [B,C,H,W] with H,W divisible by 2^kStages.
  std::vector<Tensor> taps(const Tensor& x) const {
    std::vector<Tensor> out;
    Tensor h = x;
    for (const auto& w : ws) {
      h = avgpool2x2(relu(conv2d(h, w, 1, 1)));
      out.push_back(h);
    }
    return out;
  }
};

// Which FeatureNet tap the generator's correspondence head mimics.
inline constexpr int kCorrTap = 1;

// One-hot encode an integer label map [B,H,W] -> constant [B,K,H,W].
inline Tensor onehot_labels(const Tensor& labels, int K = 8) {
  if (labels.rank() != 3)
    throw std::invalid_argument("onehot_labels: expected [B,H,W] labels, got " + shape_str(labels.shape()));
  const int B = labels.dim(0), H = labels.dim(1), W = labels.dim(2);
  const size_t hw = size_t(H) * size_t(W);
  std::vector<double> v(size_t(B) * K * hw, 0.0);
  for (int b = 0; b < B; ++b)
    for (size_t i = 0; i < hw; ++i) {
      const double lv = labels.data()[size_t(b) * hw + i];
      const int li = int(lv);
      if (lv != double(li) || li < 0 || li >= K)
        throw std::invalid_argument("onehot_labels: label value " + std::to_string(lv) + " outside 0.." +
                                    std::to_string(K - 1));
      v[(size_t(b) * K + li) * hw + i] = 1.0;
    }
  return Tensor::from_data({B, K, H, W}, std::move(v));
}

inline Tensor l1_loss(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) fail_dims("l1_loss", a.shape(), b.shape(), "must match");
  return mean(abs(a - b));
}

// -mean over pixels of log softmax probability of the true label.
inline Tensor cross_entropy(const Tensor& logits, const Tensor& labels) {
  if (logits.rank() != 4 || logits.dim(1) != 8)
    throw std::invalid_argument("cross_entropy: expected [B,8,H,W] logits, got " + shape_str(logits.shape()));
  const int B = logits.dim(0), H = logits.dim(2), W = logits.dim(3);
  if (labels.shape() != Shape{B, H, W}) fail_dims("cross_entropy", logits.shape(), labels.shape(), "are inconsistent");
  Tensor onehot = onehot_labels(labels, 8);
  return scale(sum(mul(log_softmax_channels(logits), onehot)), -1.0 / (double(B) * H * W));
}

// Mean squared feature distance between the generator's feature map and the
// matching feature-net tap of the target image.
inline Tensor correspondence_loss(const Tensor& fn, const Tensor& feat_target) {
  if (fn.shape() != feat_target.shape()) fail_dims("correspondence_loss", fn.shape(), feat_target.shape(), "must match");
  return mean(square(fn - feat_target));
}

inline Tensor perceptual_loss(const FeatureNet& fnet, const Tensor& ig, const Tensor& it) {
  auto tg = fnet.taps(ig);
  auto tt = fnet.taps(it);
  Tensor acc = Tensor::scalar(0.0);
  for (size_t i = 0; i < tg.size(); ++i) acc = acc + l1_loss(tg[i], tt[i]);
  return acc;
}

// G[b] = (1/(C*H*W)) * F_flat F_flat^T with F_flat C x (HW).
inline Tensor gram(const Tensor& F) {
  if (F.rank() != 4) throw std::invalid_argument("gram: expected rank-4, got " + shape_str(F.shape()));
  const int B = F.dim(0), C = F.dim(1);
  const size_t hw = size_t(F.dim(2)) * size_t(F.dim(3));
  const double s = 1.0 / (double(C) * double(hw));
  std::vector<double> value(size_t(B) * C * C, 0.0);
  for (int b = 0; b < B; ++b) {
    const double* fb = F.data().data() + size_t(b) * C * hw;
    double* gb = value.data() + size_t(b) * C * C;
    for (int i = 0; i < C; ++i)
      for (int j = i; j < C; ++j) {
        double acc = 0.0;
        for (size_t t = 0; t < hw; ++t) acc += fb[size_t(i) * hw + t] * fb[size_t(j) * hw + t];
        gb[size_t(i) * C + j] = s * acc;
        gb[size_t(j) * C + i] = s * acc;
      }
  }
  Tensor tf = F;
  return make_op({B, C, C}, std::move(value), "gram", {F}, [tf, B, C, hw, s](TensorNode& n) {
    if (!tf.requires_grad()) return;
    tf.node()->ensure_grad();
    auto& gf = tf.node()->grad;
    const auto& fv = tf.data();
    for (int b = 0; b < B; ++b) {
      const double* fb = fv.data() + size_t(b) * C * hw;
      const double* gg = n.grad.data() + size_t(b) * C * C;
      double* gfb = gf.data() + size_t(b) * C * hw;
      for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j) {
          const double w = s * (gg[size_t(i) * C + j] + gg[size_t(j) * C + i]);
          if (w == 0.0) continue;
          const double* fj = fb + size_t(j) * hw;
          double* gi = gfb + size_t(i) * hw;
          for (size_t t = 0; t < hw; ++t) gi[t] += w * fj[t];
        }
    }
  });
}

inline Tensor style_loss(const FeatureNet& fnet, const Tensor& ig, const Tensor& it) {
  auto tg = fnet.taps(ig);
  auto tt = fnet.taps(it);
  Tensor acc = Tensor::scalar(0.0);
  for (size_t i = 0; i < tg.size(); ++i) acc = acc + l1_loss(gram(tg[i]), gram(tt[i]));
  return acc;
}

// --- Sinkhorn --------------------------------------------------------------

// Entropic-regularized optimal transport between weighted point sets, solved
// by log-domain Sinkhorn iterations unrolled through autodiff. Cost is
// squared Euclidean; the return value is <plan, cost> without the entropy
// term. Emits a warning when the marginals have not converged to 1e-6.
inline Tensor sinkhorn_distance(const Tensor& x, const std::vector<double>& a, const Tensor& y,
                                const std::vector<double>& b, double eps = 0.05, int iters = 100) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1))
    fail_dims("sinkhorn_distance", x.shape(), y.shape(), "need [n,d] and [m,d] point sets");
  const int n = x.dim(0), m = y.dim(0);
  if (int(a.size()) != n || int(b.size()) != m)
    throw std::invalid_argument("sinkhorn_distance: weight counts " + std::to_string(a.size()) + "," +
                                std::to_string(b.size()) + " do not match point counts " + std::to_string(n) + "," +
                                std::to_string(m));
  if (eps <= 0.0) throw std::invalid_argument("sinkhorn_distance: eps must be positive");
  if (iters < 1) throw std::invalid_argument("sinkhorn_distance: need at least one iteration");
  auto check_weights = [](const std::vector<double>& w, const char* name) {
    double total = 0.0;
    for (double v : w) {
      if (v < 0.0) throw std::invalid_argument(std::string("sinkhorn_distance: negative weight in ") + name);
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9)
      throw std::invalid_argument(std::string("sinkhorn_distance: weights ") + name + " sum to " +
                                  std::to_string(total) + ", expected 1");
  };
  check_weights(a, "p");
  check_weights(b, "q");

  // C_ij = |x_i|^2 + |y_j|^2 - 2 x_i . y_j, clamped at 0 against roundoff.
  Tensor x2 = sum_axis(square(x), 1, true);                       // [n,1]
  Tensor y2t = transpose(sum_axis(square(y), 1, true));           // [1,m]
  Tensor C = relu(x2 + y2t - scale(matmul(x, transpose(y)), 2.0));  // [n,m]

  std::vector<double> la(a.size()), lb(b.size());
  for (size_t i = 0; i < a.size(); ++i) la[i] = std::log(a[i]);  // -inf for zero weights is fine
  for (size_t j = 0; j < b.size(); ++j) lb[j] = std::log(b[j]);
  Tensor loga = Tensor::from_data({n, 1}, la);
  Tensor logb = Tensor::from_data({1, m}, lb);

  Tensor f = Tensor::zeros({n, 1});
  Tensor g = Tensor::zeros({1, m});
  const double inv_eps = 1.0 / eps;
  for (int it = 0; it < iters; ++it) {
    f = scale(logsumexp_axis(scale(g - C, inv_eps) + logb, 1, true), -eps);
    g = scale(logsumexp_axis(scale(f - C, inv_eps) + loga, 0, true), -eps);
  }
  Tensor plan = exp(loga + logb + scale(f + g - C, inv_eps));

  double residual = 0.0;
  for (int i = 0; i < n; ++i) {
    double row = 0.0;
    for (int j = 0; j < m; ++j) row += plan.data()[size_t(i) * m + j];
    residual = std::max(residual, std::abs(row - a[size_t(i)]));
  }
  for (int j = 0; j < m; ++j) {
    double col = 0.0;
    for (int i = 0; i < n; ++i) col += plan.data()[size_t(i) * m + j];
    residual = std::max(residual, std::abs(col - b[size_t(j)]));
  }
  if (residual >= 1e-6)
    warn("sinkhorn_distance: marginal residual " + std::to_string(residual) + " after " + std::to_string(iters) +
         " iterations");

  return sum(mul(plan, C));
}

inline Tensor sinkhorn_distance(const Tensor& x, const Tensor& y, double eps = 0.05, int iters = 100) {
  std::vector<double> a(size_t(x.dim(0)), 1.0 / double(x.dim(0)));
  std::vector<double> b(size_t(y.dim(0)), 1.0 / double(y.dim(0)));
  return sinkhorn_distance(x, a, y, b, eps, iters);
}

// --- combined objectives ----------------------------------------------------

struct LossWeights {
  double pl = 5.0;   // parsing l1
  double c = 1.0;    // correspondence
  double l = 5.0;    // image l1
  double p = 1.0;    // perceptual
  double s = 100.0;  // style
  double a = 1.0;    // adversarial (Sinkhorn)
};

// Scalar components for logging plus the differentiable objective.
struct LossBreakdown {
  double l1 = 0.0, ce = 0.0, cor = 0.0, perc = 0.0, style = 0.0, wass = 0.0, total = 0.0;
  Tensor objective;
};

inline LossBreakdown parsing_loss(const Tensor& logits, const Tensor& labels, double lambda_pl) {
  LossBreakdown out;
  Tensor l1t = l1_loss(softmax_channels(logits), onehot_labels(labels, 8));
  Tensor cet = cross_entropy(logits, labels);
  out.l1 = l1t.item();
  out.ce = cet.item();
  out.objective = scale(l1t, lambda_pl) + cet;
  out.total = lambda_pl * out.l1 + out.ce;
  return out;
}

inline LossBreakdown image_loss(const FeatureNet& fnet, const Tensor& ig, const Tensor& it, const Tensor& fn,
                                const Tensor& embed_real, const Tensor& embed_fake, const LossWeights& lw,
                                double sink_eps = 0.05, int sink_iters = 100) {
  LossBreakdown out;
  Tensor l1t = l1_loss(ig, it);
  Tensor cort = correspondence_loss(fn, fnet.taps(it)[kCorrTap]);
  Tensor perct = perceptual_loss(fnet, ig, it);
  Tensor stylet = style_loss(fnet, ig, it);
  Tensor wasst = sinkhorn_distance(embed_fake, embed_real, sink_eps, sink_iters);
  out.l1 = l1t.item();
  out.cor = cort.item();
  out.perc = perct.item();
  out.style = stylet.item();
  out.wass = wasst.item();
  out.objective = scale(cort, lw.c) + scale(l1t, lw.l) + scale(perct, lw.p) + scale(stylet, lw.s) + scale(wasst, lw.a);
  out.total = lw.c * out.cor + lw.l * out.l1 + lw.p * out.perc + lw.s * out.style + lw.a * out.wass;
  return out;
}

// Hinge loss for the discriminator; the WGAN critic form sits behind the
// harness config switch.
inline Tensor discriminator_loss(const Tensor& d_real, const Tensor& d_fake) {
  return mean(relu(add_scalar(neg(d_real), 1.0))) + mean(relu(add_scalar(d_fake, 1.0)));
}

inline Tensor wgan_discriminator_loss(const Tensor& d_real, const Tensor& d_fake) {
  return mean(d_fake) - mean(d_real);
}

// Generator-side adversarial term used when the Sinkhorn term is ablated.
inline Tensor generator_adversarial_loss(const Tensor& d_fake) { return neg(mean(d_fake)); }

}  // namespace fftgan
