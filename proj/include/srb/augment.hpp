#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "srb/dataset.hpp"
#include "srb/tensor.hpp"

namespace srb {

// Data augmentation on [C,H,W] images and whole samples. Every transform draws
// from the caller's Rng in a fixed order, so a seed pins the full pipeline.

namespace detail {

inline Tensor flip_w(const Tensor& t) {  // flip last axis of [C,H,W] or [H,W]
  Tensor out(t.shape());
  const int64_t W = t.dim(t.rank() - 1);
  const int64_t rows = t.numel() / W;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t x = 0; x < W; ++x) out[r * W + (W - 1 - x)] = t[r * W + x];
  return out;
}

inline Tensor flip_h(const Tensor& t) {  // flip row axis of [C,H,W] or [H,W]
  Tensor out(t.shape());
  const int64_t W = t.dim(t.rank() - 1);
  const int64_t H = t.dim(t.rank() - 2);
  const int64_t planes = t.numel() / (H * W);
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t y = 0; y < H; ++y)
      std::copy(t.data() + (p * H + y) * W, t.data() + (p * H + y + 1) * W,
                out.data() + (p * H + (H - 1 - y)) * W);
  return out;
}

// Edge-replicate padding for images; constant fill for annotation maps.
inline Tensor pad2d(const Tensor& t, int64_t pad, bool replicate, Real fill) {
  const int64_t W = t.dim(t.rank() - 1);
  const int64_t H = t.dim(t.rank() - 2);
  const int64_t planes = t.numel() / (H * W);
  Shape out_shape = t.shape();
  out_shape[t.rank() - 1] = W + 2 * pad;
  out_shape[t.rank() - 2] = H + 2 * pad;
  Tensor out = Tensor::full(out_shape, fill);
  const int64_t W2 = W + 2 * pad, H2 = H + 2 * pad;
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t y = 0; y < H2; ++y)
      for (int64_t x = 0; x < W2; ++x) {
        int64_t sy = y - pad, sx = x - pad;
        if (replicate) {
          sy = std::min(H - 1, std::max<int64_t>(0, sy));
          sx = std::min(W - 1, std::max<int64_t>(0, sx));
        } else if (sy < 0 || sy >= H || sx < 0 || sx >= W) {
          continue;  // keep the fill value
        }
        out[(p * H2 + y) * W2 + x] = t[(p * H + sy) * W + sx];
      }
  return out;
}

inline Tensor crop2d(const Tensor& t, int64_t y0, int64_t x0, int64_t h, int64_t w) {
  const int64_t W = t.dim(t.rank() - 1);
  const int64_t H = t.dim(t.rank() - 2);
  if (y0 < 0 || x0 < 0 || y0 + h > H || x0 + w > W)
    throw InvalidInputError("crop window leaves the map");
  const int64_t planes = t.numel() / (H * W);
  Shape out_shape = t.shape();
  out_shape[t.rank() - 1] = w;
  out_shape[t.rank() - 2] = h;
  Tensor out(out_shape);
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t y = 0; y < h; ++y)
      std::copy(t.data() + (p * H + y0 + y) * W + x0, t.data() + (p * H + y0 + y) * W + x0 + w,
                out.data() + (p * h + y) * w);
  return out;
}

inline Tensor resize_bilinear_chw(const Tensor& t, int64_t h2, int64_t w2) {
  ag::NoGradGuard ng;
  const int64_t C = t.rank() == 3 ? t.dim(0) : 1;  // a [H,W] map rides as one channel
  Shape s3{C, t.dim(t.rank() - 2), t.dim(t.rank() - 1)};
  Tensor cube(s3);
  std::copy(t.data(), t.data() + t.numel(), cube.data());
  auto out = ag::bilinear_resize(ag::constant(cube), h2, w2)->value;
  if (t.rank() == 2) {
    Tensor flat({h2, w2});
    std::copy(out.data(), out.data() + out.numel(), flat.data());
    return flat;
  }
  return out;
}

inline Tensor resize_nearest_2d(const Tensor& t, int64_t h2, int64_t w2) {
  const int64_t H = t.dim(0), W = t.dim(1);
  Tensor out({h2, w2});
  for (int64_t y = 0; y < h2; ++y)
    for (int64_t x = 0; x < w2; ++x) {
      int64_t sy = std::min<int64_t>(H - 1, (y * H + h2 / 2) / h2);
      int64_t sx = std::min<int64_t>(W - 1, (x * W + w2 / 2) / w2);
      out.at(y, x) = t.at(sy, sx);
    }
  return out;
}

}  // namespace detail

// --- image-level transforms (used directly by contrastive pretraining) -----

inline Tensor hflip_image(const Tensor& img) { return detail::flip_w(img); }

inline Tensor color_jitter_image(const Tensor& img, Rng& rng, Real strength = 0.4) {
  if (img.rank() != 3) throw InvalidInputError("color jitter expects [C,H,W]");
  const Real brightness = 1.0 + rng.uniform(-strength, strength);
  const Real contrast = 1.0 + rng.uniform(-strength, strength);
  std::vector<Real> channel_shift(img.dim(0));
  for (auto& s : channel_shift) s = rng.uniform(-0.5 * strength, 0.5 * strength);
  const Real mean = img.mean();
  Tensor out(img.shape());
  const int64_t plane = img.dim(1) * img.dim(2);
  for (int64_t c = 0; c < img.dim(0); ++c)
    for (int64_t i = 0; i < plane; ++i) {
      Real v = img[c * plane + i] * brightness;
      v = (v - mean) * contrast + mean + channel_shift[c];
      out[c * plane + i] = std::min(1.0, std::max(0.0, v));
    }
  return out;
}

// Random area crop (aspect preserved) resized back to the input size.
inline Tensor resized_crop_image(const Tensor& img, Rng& rng, Real min_area = 0.5,
                                 Real max_area = 1.0) {
  if (img.rank() != 3) throw InvalidInputError("resized crop expects [C,H,W]");
  if (!(min_area > 0.0 && min_area <= max_area && max_area <= 1.0))
    throw InvalidInputError("crop area fractions must satisfy 0 < min <= max <= 1");
  const int64_t H = img.dim(1), W = img.dim(2);
  const Real frac = std::sqrt(rng.uniform(min_area, max_area));
  const int64_t ch = std::max<int64_t>(1, static_cast<int64_t>(std::lround(frac * H)));
  const int64_t cw = std::max<int64_t>(1, static_cast<int64_t>(std::lround(frac * W)));
  const int64_t y0 = ch < H ? rng.index(H - ch + 1) : 0;
  const int64_t x0 = cw < W ? rng.index(W - cw + 1) : 0;
  Tensor crop = detail::crop2d(img, y0, x0, ch, cw);
  return detail::resize_bilinear_chw(crop, H, W);
}

// --- sample-level transforms (image + mask + depth stay aligned) -----------

inline Sample hflip_sample(const Sample& s) {
  Sample out = s;
  out.image = detail::flip_w(s.image);
  if (s.mask.numel() > 0) out.mask = detail::flip_w(s.mask);
  if (s.depth.numel() > 0) out.depth = detail::flip_w(s.depth);
  return out;
}

inline Sample vflip_sample(const Sample& s) {
  Sample out = s;
  out.image = detail::flip_h(s.image);
  if (s.mask.numel() > 0) out.mask = detail::flip_h(s.mask);
  if (s.depth.numel() > 0) out.depth = detail::flip_h(s.depth);
  return out;
}

// Pad by `pad` pixels then crop back to the original size: a small random
// shift that keeps the resolution (and thus patch divisibility) intact.
// Padded mask pixels are ignore-labeled; padded depth pixels are invalid.
inline Sample random_crop_sample(const Sample& s, Rng& rng, int64_t pad = 4) {
  if (pad <= 0) throw InvalidInputError("pad must be positive");
  const int64_t H = s.image.dim(1), W = s.image.dim(2);
  const int64_t y0 = rng.index(2 * pad + 1);
  const int64_t x0 = rng.index(2 * pad + 1);
  Sample out = s;
  out.image = detail::crop2d(detail::pad2d(s.image, pad, true, 0.0), y0, x0, H, W);
  if (s.mask.numel() > 0)
    out.mask = detail::crop2d(detail::pad2d(s.mask, pad, false, static_cast<Real>(kIgnoreIndex)),
                              y0, x0, H, W);
  if (s.depth.numel() > 0)
    out.depth = detail::crop2d(detail::pad2d(s.depth, pad, false, 0.0), y0, x0, H, W);
  return out;
}

inline Sample resized_crop_sample(const Sample& s, Rng& rng, Real min_area = 0.5,
                                  Real max_area = 1.0) {
  const int64_t H = s.image.dim(1), W = s.image.dim(2);
  if (!(min_area > 0.0 && min_area <= max_area && max_area <= 1.0))
    throw InvalidInputError("crop area fractions must satisfy 0 < min <= max <= 1");
  const Real frac = std::sqrt(rng.uniform(min_area, max_area));
  const int64_t ch = std::max<int64_t>(1, static_cast<int64_t>(std::lround(frac * H)));
  const int64_t cw = std::max<int64_t>(1, static_cast<int64_t>(std::lround(frac * W)));
  const int64_t y0 = ch < H ? rng.index(H - ch + 1) : 0;
  const int64_t x0 = cw < W ? rng.index(W - cw + 1) : 0;
  Sample out = s;
  out.image = detail::resize_bilinear_chw(detail::crop2d(s.image, y0, x0, ch, cw), H, W);
  if (s.mask.numel() > 0)
    out.mask = detail::resize_nearest_2d(detail::crop2d(s.mask, y0, x0, ch, cw), H, W);
  if (s.depth.numel() > 0)
    out.depth = detail::resize_bilinear_chw(detail::crop2d(s.depth, y0, x0, ch, cw), H, W);
  return out;
}

inline Sample color_jitter_sample(const Sample& s, Rng& rng, Real strength = 0.4) {
  Sample out = s;
  out.image = color_jitter_image(s.image, rng, strength);
  return out;
}

// Applies named transforms in order. Flips fire with probability 1/2; the
// coin is drawn every time so the Rng stream does not depend on outcomes.
inline Sample apply_augmentations(const Sample& s, const std::vector<std::string>& names,
                                  Rng& rng) {
  Sample out = s;
  for (const auto& name : names) {
    if (name == "hflip") {
      bool fire = rng.coin();
      if (fire) out = hflip_sample(out);
    } else if (name == "vflip") {
      bool fire = rng.coin();
      if (fire) out = vflip_sample(out);
    } else if (name == "random_crop") {
      out = random_crop_sample(out, rng);
    } else if (name == "resized_crop") {
      out = resized_crop_sample(out, rng);
    } else if (name == "color_jitter") {
      out = color_jitter_sample(out, rng);
    } else {
      throw InvalidInputError("unknown augmentation '" + name + "'");
    }
  }
  return out;
}

}  // namespace srb
