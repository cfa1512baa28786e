#pragma once

#include <cmath>

#include "srb/dataset.hpp"
#include "srb/tensor.hpp"

namespace srb {

// Procedural shapes-on-canvas dataset. Every sample carries all three
// annotations so one corpus serves classification, segmentation, and depth:
//   label  — shape class in [0, num_shape_classes)
//   mask   — shape pixels labeled class+1, background 0
//   depth  — constant over the shape, nearer for larger shapes:
//            max_depth - (shape_area / image_area) * (max_depth - min_depth),
//            background at max_depth
struct SyntheticShapesSpec {
  int64_t num_samples = 256;
  int64_t image_size = 32;
  int64_t num_shape_classes = 3;
  Real min_depth = 1.0;
  Real max_depth = 9.0;
  uint64_t seed = 0;

  void validate() const {
    if (num_samples < 1) throw ConfigError("synthetic.num_samples", "must be at least 1");
    if (image_size < 8) throw ConfigError("synthetic.image_size", "must be at least 8");
    if (num_shape_classes < 2 || num_shape_classes > 6)
      throw ConfigError("synthetic.num_shape_classes", "must lie in [2, 6]");
    if (!(min_depth > 0.0)) throw ConfigError("synthetic.min_depth", "must be positive");
    if (!(max_depth > min_depth))
      throw ConfigError("synthetic.max_depth", "must exceed min_depth");
  }
};

namespace detail {

// dy, dx relative to the shape center; r is the shape radius in pixels.
inline bool inside_shape(int64_t cls, Real dy, Real dx, Real r) {
  switch (cls) {
    case 0:  // circle
      return dy * dy + dx * dx <= r * r;
    case 1:  // square
      return std::max(std::abs(dy), std::abs(dx)) <= 0.8 * r;
    case 2: {  // triangle, apex up
      Real t = (dy + r) / (2.0 * r);
      return t >= 0.0 && t <= 1.0 && std::abs(dx) <= t * r;
    }
    case 3: {  // ring
      Real d2 = dy * dy + dx * dx;
      return d2 <= r * r && d2 >= 0.55 * 0.55 * r * r;
    }
    case 4:  // cross
      return (std::abs(dx) <= 0.35 * r && std::abs(dy) <= r) ||
             (std::abs(dy) <= 0.35 * r && std::abs(dx) <= r);
    case 5:  // diamond
      return std::abs(dy) + std::abs(dx) <= r;
    default:
      throw ContractError("shape class out of range");
  }
}

}  // namespace detail

inline Dataset generate_synthetic_dataset(const SyntheticShapesSpec& spec,
                                          int64_t patch_align = 1) {
  spec.validate();
  if (patch_align < 1) throw InvalidInputError("patch_align must be positive");
  if (spec.image_size % patch_align != 0)
    throw ConfigError("synthetic.image_size",
                      "must be divisible by the encoder patch size (" +
                          std::to_string(patch_align) + ")");

  const int64_t S = spec.image_size;
  Rng rng(splitmix64(spec.seed ^ 0x7368617065ULL));
  Dataset ds;
  ds.num_classes = spec.num_shape_classes;
  ds.num_seg_classes = spec.num_shape_classes + 1;
  ds.samples.reserve(spec.num_samples);

  for (int64_t n = 0; n < spec.num_samples; ++n) {
    const int64_t cls = static_cast<int64_t>(rng.index(spec.num_shape_classes));
    // Geometry dominates the appearance on purpose: sizes vary mildly, the
    // shape sits near the center, and fore/background bands never overlap,
    // so class identity is the strongest factor of variation at desk scale.
    const Real r = rng.uniform(0.26, 0.36) * static_cast<Real>(S);
    const Real cy = (0.5 + rng.uniform(-0.06, 0.06)) * static_cast<Real>(S);
    const Real cx = (0.5 + rng.uniform(-0.06, 0.06)) * static_cast<Real>(S);
    Real bg[3], fg[3];
    for (int c = 0; c < 3; ++c) bg[c] = rng.uniform(0.10, 0.25);
    for (int c = 0; c < 3; ++c) fg[c] = rng.uniform(0.70, 0.90);

    Sample s;
    s.image = Tensor({3, S, S});
    s.mask = Tensor::zeros({S, S});
    s.label = cls;

    int64_t area = 0;
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x) {
        const bool in = detail::inside_shape(cls, static_cast<Real>(y) - cy,
                                             static_cast<Real>(x) - cx, r);
        if (in) {
          ++area;
          s.mask.at(y, x) = static_cast<Real>(cls + 1);
        }
        for (int64_t c = 0; c < 3; ++c) {
          Real v = (in ? fg[c] : bg[c]) + rng.uniform(-0.02, 0.02);
          s.image.at(c, y, x) = std::min(1.0, std::max(0.0, v));
        }
      }

    const Real frac = static_cast<Real>(area) / static_cast<Real>(S * S);
    const Real shape_depth = spec.max_depth - frac * (spec.max_depth - spec.min_depth);
    s.depth = Tensor::full({S, S}, spec.max_depth);
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x)
        if (s.mask.at(y, x) > 0.0) s.depth.at(y, x) = shape_depth;

    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace srb
