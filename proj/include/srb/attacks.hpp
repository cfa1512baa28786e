#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "srb/depth_loss.hpp"
#include "srb/encoder.hpp"
#include "srb/heads.hpp"
#include "srb/metrics.hpp"
#include "srb/optim.hpp"

namespace srb {

// l-inf projected gradient ascent and the four attack objectives built on it:
// embedding distance, classification cross-entropy, weighted segmentation
// cross-entropy with a ramped split between correct and incorrect pixels, and
// the combined depth loss.

struct AttackBudget {
  Real epsilon = 8.0 / 255.0;    // l-inf radius in pixel units
  Real step_size = 2.0 / 255.0;  // per-step magnitude
  int64_t num_steps = 20;
  bool random_init = true;

  void validate() const {
    if (!(epsilon > 0.0 && epsilon <= 1.0))
      throw InvalidBudgetError("epsilon must lie in (0, 1]");
    if (!(step_size > 0.0)) throw InvalidBudgetError("step_size must be positive");
    if (num_steps < 0) throw InvalidBudgetError("num_steps must be non-negative");
  }
};

struct AttackResult {
  ImageBatch x_adv;
  std::vector<Real> objective_trace;  // objective at x^0 .. x^T, length num_steps+1
  uint64_t seed = 0;
};

// clamp the perturbation into [-eps, eps], then the image into [0, 1];
// pixels already inside both constraints are left bit-identical
inline void project_linf(Tensor& x, const Tensor& x_orig, Real epsilon) {
  if (!x.same_shape(x_orig)) throw InvalidInputError("projection shapes differ");
  for (int64_t i = 0; i < x.numel(); ++i) {
    const Real delta = x[i] - x_orig[i];
    const Real clamped = std::min(epsilon, std::max(-epsilon, delta));
    const Real v = clamped == delta ? x[i] : x_orig[i] + clamped;
    x[i] = std::min(1.0, std::max(0.0, v));
  }
}

// scalar objective of the adversarial batch; `step` lets schedules like the
// segmentation ramp vary the objective across iterations (0..num_steps)
using StepObjective = std::function<ag::Var(const ag::Var& x_adv, int64_t step)>;

inline AttackResult pgd_maximize(const StepObjective& objective, const ImageBatch& x,
                                 const AttackBudget& budget, uint64_t seed) {
  budget.validate();
  const Tensor& x_orig = x.data;
  Tensor x_cur = x_orig;

  Rng rng(splitmix64(seed ^ 0x7067640aULL));
  if (budget.random_init) {
    for (int64_t i = 0; i < x_cur.numel(); ++i)
      x_cur[i] += rng.uniform(-budget.epsilon, budget.epsilon);
    project_linf(x_cur, x_orig, budget.epsilon);
  }

  std::vector<Real> trace;
  trace.reserve(budget.num_steps + 1);
  for (int64_t t = 0; t < budget.num_steps; ++t) {
    ag::Var xv = ag::leaf(x_cur, true);
    ag::Var loss = objective(xv, t);
    if (loss->value.numel() != 1) throw ContractError("attack objective must be scalar");
    trace.push_back(ag::scalar_value(loss));
    if (loss->requires_grad) ag::backward(loss);
    if (xv->grad.numel() != 0) {
      for (int64_t i = 0; i < x_cur.numel(); ++i) {
        const Real g = xv->grad[i];
        x_cur[i] += budget.step_size * (g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0));
      }
    }
    project_linf(x_cur, x_orig, budget.epsilon);
  }
  {
    ag::NoGradGuard ng;
    ag::Var final_loss = objective(ag::constant(x_cur), budget.num_steps);
    if (final_loss->value.numel() != 1) throw ContractError("attack objective must be scalar");
    trace.push_back(ag::scalar_value(final_loss));
  }

  AttackResult result;
  result.x_adv = ImageBatch(std::move(x_cur));
  result.objective_trace = std::move(trace);
  result.seed = seed;
  return result;
}

// --- embedding-space attack --------------------------------------------------

// Maximizes the per-sample l2 distance between the frozen reference
// embedding f(x) and f(x_adv), summed over the batch. CLS mode measures the
// global token; patch mode measures all patch embeddings flattened.
inline AttackResult embed_attack(const Encoder& encoder, const ImageBatch& x, EncodeMode mode,
                                 const AttackBudget& budget, uint64_t seed) {
  x.check_patch_size(encoder.config().patch_size);
  const Tensor reference = encode(encoder, x, mode);  // computed once, held fixed

  FrozenGuard guard(encoder.param_vars());
  StepObjective objective = [&](const ag::Var& xv, int64_t) {
    auto [cls, patches] = encoder.forward_vars(xv);
    ag::Var emb = mode == EncodeMode::Cls ? cls : patches;
    ag::Var diff = ag::sub(emb, ag::constant(reference));
    ag::Var dist = ag::vsqrt(ag::sum_per_sample(ag::mul(diff, diff)));  // [B]
    return ag::sum_all(dist);
  };
  return pgd_maximize(objective, x, budget, seed);
}

// --- classification attack ---------------------------------------------------

inline AttackResult classification_attack(const Encoder& encoder, const ClassificationHead& head,
                                          const ImageBatch& x, const std::vector<int64_t>& labels,
                                          const AttackBudget& budget, uint64_t seed) {
  x.check_patch_size(encoder.config().patch_size);
  if (static_cast<int64_t>(labels.size()) != x.batch())
    throw InvalidInputError("one label per image required");
  for (int64_t y : labels)
    if (y < 0 || y >= head.num_classes()) throw InvalidInputError("class label out of range");

  FrozenGuard enc_guard(encoder.param_vars());
  FrozenGuard head_guard({head.weight, head.bias});
  StepObjective objective = [&](const ag::Var& xv, int64_t) {
    auto [cls, patches] = encoder.forward_vars(xv);
    (void)patches;
    return detail::classification_batch_loss(head, cls, labels);
  };
  return pgd_maximize(objective, x, budget, seed);
}

// --- segmentation attack -----------------------------------------------------

// ramp weighting incorrect pixels in: 0 at the first step, 1/2 at the last
inline Real lambda_schedule(int64_t t, int64_t total_steps) {
  if (total_steps < 1) throw InvalidInputError("schedule needs at least one step");
  if (t < 0 || t > total_steps) throw InvalidInputError("schedule step out of range");
  return static_cast<Real>(t) / (2.0 * static_cast<Real>(total_steps));
}

// Weighted pixel cross-entropy: correctly classified pixels carry (1-lambda),
// misclassified ones lambda, both normalized by the count of non-ignored
// pixels. Plain-number form over one [H,W,K] logit map.
inline Real segpgd_loss(const Tensor& logits, const Tensor& gt_mask, Real lambda_t,
                        int64_t ignore_index = kIgnoreIndex) {
  if (logits.rank() != 3) throw InvalidInputError("logits must be [H,W,K]");
  const int64_t H = logits.dim(0), W = logits.dim(1), K = logits.dim(2);
  if (gt_mask.rank() != 2 || gt_mask.dim(0) != H || gt_mask.dim(1) != W)
    throw InvalidInputError("mask shape does not match the logit map");
  if (!(lambda_t >= 0.0 && lambda_t <= 0.5))
    throw InvalidInputError("lambda must lie in [0, 0.5]");

  Real total = 0.0;
  int64_t valid = 0;
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      const int64_t t = static_cast<int64_t>(gt_mask.at(y, x));
      if (t == ignore_index) continue;
      if (t < 0 || t >= K) throw InvalidInputError("mask label out of range");
      ++valid;
      Real mx = logits.at(y, x, 0);
      int64_t am = 0;
      for (int64_t k = 1; k < K; ++k)
        if (logits.at(y, x, k) > logits.at(y, x, am)) am = k;
      for (int64_t k = 1; k < K; ++k) mx = std::max(mx, logits.at(y, x, k));
      Real lse = 0.0;
      for (int64_t k = 0; k < K; ++k) lse += std::exp(logits.at(y, x, k) - mx);
      const Real ce = std::log(lse) + mx - logits.at(y, x, t);
      total += (am == t ? 1.0 - lambda_t : lambda_t) * ce;
    }
  if (valid == 0) throw InvalidInputError("mask has no labeled pixels");
  return total / static_cast<Real>(valid);
}

namespace detail {

// batched Var form of the ramped segmentation loss: mean over images of the
// per-image weighted pixel cross-entropy
inline ag::Var segpgd_batch_loss(const SegmentationHead& head, const ag::Var& patches,
                                 const Tensor& masks, int64_t grid_h, int64_t grid_w,
                                 Real lambda_t) {
  const int64_t B = masks.dim(0), H = masks.dim(1), W = masks.dim(2);
  const int64_t K = head.num_classes();
  ag::Var map = head.logit_map(patches, grid_h, grid_w, H, W);  // [B,H,W,K]
  ag::Var rows = ag::reshape(map, {B * H * W, K});

  std::vector<int64_t> valid_per_image(B, 0);
  for (int64_t i = 0; i < B * H * W; ++i)
    if (static_cast<int64_t>(masks[i]) != kIgnoreIndex) ++valid_per_image[i / (H * W)];

  std::vector<int64_t> labels(B * H * W, 0);
  std::vector<Real> weights(B * H * W, 0.0);
  const Tensor& logits = rows->value;
  for (int64_t i = 0; i < B * H * W; ++i) {
    const int64_t t = static_cast<int64_t>(masks[i]);
    if (t == kIgnoreIndex) continue;
    if (t < 0 || t >= K) throw InvalidInputError("mask label out of range");
    if (valid_per_image[i / (H * W)] == 0) continue;
    int64_t am = 0;
    for (int64_t k = 1; k < K; ++k)
      if (logits[i * K + k] > logits[i * K + am]) am = k;
    labels[i] = t;
    weights[i] = (am == t ? 1.0 - lambda_t : lambda_t) /
                 (static_cast<Real>(valid_per_image[i / (H * W)]) * static_cast<Real>(B));
  }
  return ag::weighted_cross_entropy(rows, labels, weights);
}

}  // namespace detail

inline AttackResult segpgd_attack(const Encoder& encoder, const SegmentationHead& head,
                                  const ImageBatch& x, const Tensor& gt_masks,
                                  const AttackBudget& budget, uint64_t seed) {
  x.check_patch_size(encoder.config().patch_size);
  if (gt_masks.rank() != 3 || gt_masks.dim(0) != x.batch() || gt_masks.dim(1) != x.height() ||
      gt_masks.dim(2) != x.width())
    throw InvalidInputError("masks must be [B,H,W] matching the images");

  const int64_t p = encoder.config().patch_size;
  const int64_t gh = x.height() / p, gw = x.width() / p;
  FrozenGuard enc_guard(encoder.param_vars());
  FrozenGuard head_guard({head.weight, head.bias});
  StepObjective objective = [&](const ag::Var& xv, int64_t step) {
    const Real lambda_t =
        budget.num_steps >= 1 ? lambda_schedule(step, budget.num_steps) : 0.5;
    auto [cls, patches] = encoder.forward_vars(xv);
    (void)cls;
    return detail::segpgd_batch_loss(head, patches, gt_masks, gh, gw, lambda_t);
  };
  return pgd_maximize(objective, x, budget, seed);
}

// --- depth attack --------------------------------------------------------------

inline AttackResult depth_attack(const Encoder& encoder, const DepthHead& head,
                                 const ImageBatch& x, const Tensor& gt_depth,
                                 const AttackBudget& budget, uint64_t seed,
                                 const DepthLossParams& params = {}) {
  x.check_patch_size(encoder.config().patch_size);
  if (gt_depth.rank() != 3 || gt_depth.dim(0) != x.batch() || gt_depth.dim(1) != x.height() ||
      gt_depth.dim(2) != x.width())
    throw InvalidInputError("depth maps must be [B,H,W] matching the images");
  detail::require_positive(gt_depth, "ground-truth");

  const int64_t p = encoder.config().patch_size;
  const int64_t gh = x.height() / p, gw = x.width() / p;
  FrozenGuard enc_guard(encoder.param_vars());
  FrozenGuard head_guard({head.weight, head.bias});
  StepObjective objective = [&](const ag::Var& xv, int64_t) {
    auto [cls, patches] = encoder.forward_vars(xv);
    ag::Var pred = head.depth_map(cls, patches, gh, gw, x.height(), x.width());
    return combined_depth_loss(pred, ag::constant(gt_depth), params);
  };
  return pgd_maximize(objective, x, budget, seed);
}

}  // namespace srb
