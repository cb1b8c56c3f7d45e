#pragma once

// Training objectives. Every loss is a differentiable function of Tensors and
// returns a single-element tensor. Batched inputs are averaged over the batch.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "daefuse/config.hpp"
#include "daefuse/error.hpp"
#include "daefuse/networks.hpp"
#include "daefuse/tensor.hpp"

namespace daefuse {

/// Log arguments are clamped to [kLogClamp, 1 - kLogClamp].
inline constexpr double kLogClamp = 1e-7;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

inline void require_same_dims(const Tensor& a, const Tensor& b, const char* what) {
  if (a.dims() != b.dims()) {
    fail(ErrorKind::ShapeError, std::string(what) + ": " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  }
}

inline void require_scores(const Tensor& s, const char* what) {
  for (double v : s.values()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      fail(ErrorKind::DomainError, std::string(what) + ": score " + std::to_string(v) + " outside (0,1)");
    }
  }
}

inline Tensor clamped_log(const Tensor& x) { return log(clamp(x, kLogClamp, 1.0 - kLogClamp)); }

inline bool is_constant(const Tensor& t) {
  const auto v = t.values();
  return std::adjacent_find(v.begin(), v.end(), std::not_equal_to<>()) == v.end();
}

inline Tensor fixed_kernel(Dims dims, std::vector<double> values) { return Tensor(dims, std::move(values), false); }

// Separable Gaussian (radius 5, sigma 1.5) with zero padding, renormalized by
// the in-bounds kernel mass so that constants are preserved at the borders.
inline Tensor gaussian_blur(const Tensor& x) {
  constexpr int radius = 5;
  constexpr double sigma = 1.5;
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += (k[i + radius] = std::exp(-(i * i) / (2 * sigma * sigma)));
  for (double& v : k) v /= total;
  const Tensor row = fixed_kernel({1, 1, 1, 2 * radius + 1}, k);
  const Tensor col = fixed_kernel({1, 1, 2 * radius + 1, 1}, k);
  const Tensor none;
  auto blur = [&](const Tensor& t) { return conv2d(conv2d(t, row, none, 1, 0, radius), col, none, 1, radius, 0); };
  Tensor mass;
  {
    NoGradGuard no_grad;
    mass = blur(Tensor::full({1, 1, x.dim(2), x.dim(3)}, 1.0));
  }
  return blur(x) / mass;
}

}  // namespace detail

/// Pearson correlation over all elements of `a` and `b`.
inline Tensor correlation_coefficient(const Tensor& a, const Tensor& b) {
  detail::require_same_dims(a, b, "correlation_coefficient");
  if (detail::is_constant(a) || detail::is_constant(b)) {
    fail(ErrorKind::DegenerateInput, "correlation of a constant input is undefined");
  }
  const Tensor ac = a - mean_all(a);
  const Tensor bc = b - mean_all(b);
  return sum_all(ac * bc) / sqrt(sum_all(square(ac)) * sum_all(square(bc)));
}

/// CC(high_a, high_b)^2 / (CC(low_a, low_b) + epsilon)
inline Tensor correlation_decomposition_loss(const Tensor& high_a, const Tensor& high_b, const Tensor& low_a,
                                             const Tensor& low_b, double epsilon) {
  return square(correlation_coefficient(high_a, high_b)) / (correlation_coefficient(low_a, low_b) + epsilon);
}

inline Tensor correlation_decomposition_loss(const FeatureEmbedding& emb_a, const FeatureEmbedding& emb_b,
                                             const LossWeights& w) {
  return correlation_decomposition_loss(emb_a.high, emb_b.high, emb_a.low, emb_b.low, w.epsilon_cc);
}

/// Local SSIM map (Gaussian window, sigma 1.5) on [N,1,H,W] images in [0,1].
/// Works for any image size; the window is renormalized at the borders.
inline Tensor ssim_map(const Tensor& x, const Tensor& y) {
  detail::require_same_dims(x, y, "ssim");
  const Tensor mx = detail::gaussian_blur(x);
  const Tensor my = detail::gaussian_blur(y);
  const Tensor sxx = detail::gaussian_blur(square(x)) - square(mx);
  const Tensor syy = detail::gaussian_blur(square(y)) - square(my);
  const Tensor sxy = detail::gaussian_blur(x * y) - mx * my;
  const Tensor num = (2.0 * (mx * my) + kSsimC1) * (2.0 * sxy + kSsimC2);
  const Tensor den = (square(mx) + square(my) + kSsimC1) * (sxx + syy + kSsimC2);
  return num / den;
}

/// ||x - x_rec||_2^2 + (1 - SSIM(x, x_rec)), averaged over the batch.
inline Tensor content_loss(const Tensor& x, const Tensor& x_rec) {
  detail::require_same_dims(x, x_rec, "content_loss");
  const double batch = static_cast<double>(x.dim(0));
  return sum_all(square(x - x_rec)) * (1.0 / batch) + (1.0 - mean_all(ssim_map(x, x_rec)));
}

/// E[log(1 - D1(a_rec))] + E[log(1 - D2(b_rec))]
inline Tensor adversarial_loss_ae_phase1(const Tensor& score_a_rec, const Tensor& score_b_rec) {
  detail::require_scores(score_a_rec, "adversarial_loss_ae_phase1");
  detail::require_scores(score_b_rec, "adversarial_loss_ae_phase1");
  return mean_all(detail::clamped_log(1.0 - score_a_rec)) + mean_all(detail::clamped_log(1.0 - score_b_rec));
}

/// E[-log D(real)] + E[-log(1 - D(fake))] for one discriminator.
inline Tensor adversarial_loss_disc_phase1(const Tensor& score_real, const Tensor& score_fake) {
  detail::require_scores(score_real, "adversarial_loss_disc_phase1");
  detail::require_scores(score_fake, "adversarial_loss_disc_phase1");
  return -mean_all(detail::clamped_log(score_real)) - mean_all(detail::clamped_log(1.0 - score_fake));
}

inline void require_finite_loss(const Tensor& t, const char* what) {
  if (t.defined() && !std::isfinite(t.item())) fail(ErrorKind::NumericalError, std::string(what) + " is not finite");
}

/// lambda * adv + sigma * corr + (1 - sigma) * content. An undefined `adv`
/// (adversarial term ablated) contributes nothing.
inline Tensor phase1_ae_loss(const Tensor& adv, const Tensor& corr, const Tensor& content, const LossWeights& w) {
  require_finite_loss(adv, "adversarial term");
  require_finite_loss(corr, "correlation term");
  require_finite_loss(content, "content term");
  Tensor total = w.sigma * corr + (1.0 - w.sigma) * content;
  if (adv.defined()) total = w.lambda_adv * adv + total;
  return total;
}

/// Per-pixel Sobel gradient magnitude of [N,1,H,W] images with reflected
/// borders. Kernels are the unnormalized [-1 0 1; -2 0 2; -1 0 1] pair, so a
/// unit-slope ramp yields 8.
inline Tensor sobel_gradient(const Tensor& images) {
  if (images.dim(1) != 1) fail(ErrorKind::ShapeError, "sobel_gradient expects single-channel images");
  constexpr double delta = 1e-12;
  const Tensor kx = detail::fixed_kernel({1, 1, 3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1});
  const Tensor ky = detail::fixed_kernel({1, 1, 3, 3}, {-1, -2, -1, 0, 0, 0, 1, 2, 1});
  const Tensor padded = pad_reflect(images, 1, 1, 1, 1);
  const Tensor none;
  const Tensor gx = conv2d(padded, kx, none, 1, 0, 0);
  const Tensor gy = conv2d(padded, ky, none, 1, 0, 0);
  return sqrt(square(gx) + square(gy) + delta) - std::sqrt(delta);
}

/// mean |grad_f - max(grad_a, grad_b)| on precomputed gradient maps.
inline Tensor gradient_deviation_loss(const Tensor& grad_f, const Tensor& grad_a, const Tensor& grad_b) {
  detail::require_same_dims(grad_f, grad_a, "text_loss");
  detail::require_same_dims(grad_f, grad_b, "text_loss");
  return mean_all(abs(grad_f - maximum(grad_a, grad_b)));
}

/// (1/HW) || grad(f) - max(|grad a|, |grad b|) ||_1
inline Tensor text_loss(const Tensor& fused, const Tensor& a, const Tensor& b) {
  detail::require_same_dims(fused, a, "text_loss");
  detail::require_same_dims(fused, b, "text_loss");
  return gradient_deviation_loss(sobel_gradient(fused), sobel_gradient(a), sobel_gradient(b));
}

/// (1/HW) || f - max(a, b) ||_1
inline Tensor intensity_loss(const Tensor& fused, const Tensor& a, const Tensor& b) {
  detail::require_same_dims(fused, a, "intensity_loss");
  detail::require_same_dims(fused, b, "intensity_loss");
  return mean_all(abs(fused - maximum(a, b)));
}

/// (1/HW) || F_t - F_{t-1} ||_1; zero when there is no previous frame.
inline Tensor temporal_consistency_loss(const Tensor& fused_t, const Tensor& fused_prev) {
  if (!fused_prev.defined()) return Tensor::scalar(0.0);
  detail::require_same_dims(fused_t, fused_prev, "temporal_consistency_loss");
  return mean_all(abs(fused_t - fused_prev));
}

/// Autoencoder side: E[log(1 - D1(F))] + E[log(1 - D2(F))]
inline Tensor adversarial_loss_phase2_ae(const Tensor& score_a_on_fused, const Tensor& score_b_on_fused) {
  detail::require_scores(score_a_on_fused, "adversarial_loss_phase2");
  detail::require_scores(score_b_on_fused, "adversarial_loss_phase2");
  return mean_all(detail::clamped_log(1.0 - score_a_on_fused)) +
         mean_all(detail::clamped_log(1.0 - score_b_on_fused));
}

/// Discriminator side for one block: E[-log D(source)] + E[-log(1 - D(F))]
inline Tensor adversarial_loss_phase2_dm(const Tensor& score_source, const Tensor& score_fused) {
  return adversarial_loss_disc_phase1(score_source, score_fused);
}

/// Undefined members are absent from the sum.
struct Phase2Components {
  Tensor adversarial;
  Tensor text;
  Tensor intensity;
  Tensor temporal;
};

/// adv + gamma_text * text + gamma_int * int + gamma_temp * temporal
inline Tensor phase2_total_loss(const Phase2Components& c, const LossWeights& w) {
  require_finite_loss(c.adversarial, "adversarial term");
  require_finite_loss(c.text, "text term");
  require_finite_loss(c.intensity, "intensity term");
  require_finite_loss(c.temporal, "temporal term");
  Tensor total = Tensor::scalar(0.0);
  if (c.adversarial.defined()) total = total + c.adversarial;
  if (c.text.defined()) total = total + w.gamma_text * c.text;
  if (c.intensity.defined()) total = total + w.gamma_int * c.intensity;
  if (c.temporal.defined()) total = total + w.gamma_temp * c.temporal;
  return total;
}

}  // namespace daefuse
