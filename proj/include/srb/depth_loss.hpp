#pragma once

#include <limits>

#include "srb/autograd.hpp"

namespace srb {

struct DepthLossParams {
  Real alpha = 1.0;
  Real rho = 0.85;
  int64_t num_scales = 4;

  void validate() const {
    if (!(alpha > 0.0)) throw InvalidInputError("depth loss alpha must be positive");
    if (!(rho >= 0.0 && rho <= 1.0)) throw InvalidInputError("depth loss rho must lie in [0,1]");
    if (num_scales < 1) throw InvalidInputError("depth loss needs at least one scale");
  }
};

namespace detail {

// Accepts [H,W] or [B,H,W]; returns the map as [B,H,W].
inline ag::Var as_depth_cube(const ag::Var& v, const char* role) {
  const auto& s = v->value.shape();
  if (s.size() == 2) return ag::reshape(v, {1, s[0], s[1]});
  if (s.size() == 3) return v;
  throw InvalidInputError(std::string(role) + " depth map must be [H,W] or [B,H,W]");
}

inline void require_positive(const Tensor& t, const char* role) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!(t[i] > 0.0))
      throw InvalidInputError(std::string(role) + " depth must be strictly positive");
}

}  // namespace detail

// Multi-scale gradient matching on log-depth residuals. The residual map is
// halved by 2x2 mean pooling between scales; scales too small to pool simply
// contribute nothing, and the divisor stays the requested scale count. The
// result is averaged over batch images.
inline ag::Var grad_matching_loss(const ag::Var& pred, const ag::Var& gt,
                                  int64_t num_scales = 4) {
  if (num_scales < 1) throw InvalidInputError("grad matching loss needs at least one scale");
  if (!pred->value.same_shape(gt->value))
    throw InvalidInputError("pred and gt depth shapes differ");
  detail::require_positive(pred->value, "predicted");
  detail::require_positive(gt->value, "ground-truth");

  ag::Var r = ag::sub(ag::vlog(detail::as_depth_cube(pred, "predicted")),
                      ag::vlog(detail::as_depth_cube(gt, "ground-truth")));
  const int64_t batch = r->value.dim(0);
  ag::Var total = ag::constant(Tensor::scalar(0.0));
  for (int64_t k = 0; k < num_scales; ++k) {
    const int64_t h = r->value.dim(1), w = r->value.dim(2);
    if (w >= 2) {
      ag::Var dx = ag::sub(ag::slice(r, 2, 1, w - 1), ag::slice(r, 2, 0, w - 1));
      total = ag::add(total, ag::sum_all(ag::vabs(dx)));
    }
    if (h >= 2) {
      ag::Var dy = ag::sub(ag::slice(r, 1, 1, h - 1), ag::slice(r, 1, 0, h - 1));
      total = ag::add(total, ag::sum_all(ag::vabs(dy)));
    }
    if (k + 1 == num_scales || h < 2 || w < 2) break;
    r = ag::avg_pool2(r);
  }
  return ag::scale(total, 1.0 / (static_cast<Real>(num_scales) * static_cast<Real>(batch)));
}

// Scale-invariant log-depth loss: alpha * sqrt(mean(g^2) - rho * mean(g)^2)
// with g the per-pixel log residual; computed per image, averaged over the
// batch. The sqrt argument is clamped at zero against rounding.
inline ag::Var pixelwise_depth_loss(const ag::Var& pred, const ag::Var& gt,
                                    const DepthLossParams& params = {}) {
  params.validate();
  if (!pred->value.same_shape(gt->value))
    throw InvalidInputError("pred and gt depth shapes differ");
  detail::require_positive(pred->value, "predicted");
  detail::require_positive(gt->value, "ground-truth");

  ag::Var g = ag::sub(ag::vlog(detail::as_depth_cube(pred, "predicted")),
                      ag::vlog(detail::as_depth_cube(gt, "ground-truth")));
  const Real T = static_cast<Real>(g->value.dim(1) * g->value.dim(2));
  ag::Var sum_sq = ag::sum_per_sample(ag::mul(g, g));  // [B]
  ag::Var sum_g = ag::sum_per_sample(g);               // [B]
  ag::Var arg = ag::sub(ag::scale(sum_sq, 1.0 / T),
                        ag::scale(ag::mul(sum_g, sum_g), params.rho / (T * T)));
  ag::Var per_image =
      ag::vsqrt(ag::clamp(arg, 0.0, std::numeric_limits<Real>::infinity()));
  return ag::scale(ag::mean_all(per_image), params.alpha);
}

inline ag::Var combined_depth_loss(const ag::Var& pred, const ag::Var& gt,
                                   const DepthLossParams& params = {}) {
  return ag::add(ag::scale(grad_matching_loss(pred, gt, params.num_scales), 0.5),
                 pixelwise_depth_loss(pred, gt, params));
}

// plain-number conveniences for evaluation code and tests

inline Real grad_matching_loss(const Tensor& pred, const Tensor& gt, int64_t num_scales = 4) {
  ag::NoGradGuard ng;
  return ag::scalar_value(grad_matching_loss(ag::constant(pred), ag::constant(gt), num_scales));
}

inline Real pixelwise_depth_loss(const Tensor& pred, const Tensor& gt,
                                 const DepthLossParams& params = {}) {
  ag::NoGradGuard ng;
  return ag::scalar_value(pixelwise_depth_loss(ag::constant(pred), ag::constant(gt), params));
}

inline Real combined_depth_loss(const Tensor& pred, const Tensor& gt,
                                const DepthLossParams& params = {}) {
  ag::NoGradGuard ng;
  return ag::scalar_value(combined_depth_loss(ag::constant(pred), ag::constant(gt), params));
}

}  // namespace srb
