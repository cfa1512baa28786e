#pragma once

#include <string>
#include <type_traits>
#include <vector>

#include "srb/augment.hpp"
#include "srb/checkpoint.hpp"
#include "srb/dataset.hpp"
#include "srb/depth_loss.hpp"
#include "srb/encoder.hpp"
#include "srb/optim.hpp"

namespace srb {

// Linear task heads over frozen encoder embeddings. Each head exposes a
// Var-level builder from (cls, patches) so attack objectives can reuse the
// exact inference graph, plus plain-tensor predict_* entry points.

struct ClassificationHead {
  ag::Var weight;  // [D, K]
  ag::Var bias;    // [K]

  ClassificationHead(int64_t dim, int64_t num_classes, uint64_t seed) {
    if (num_classes < 2) throw InvalidInputError("classification needs at least 2 classes");
    if (dim < 1) throw InvalidInputError("embedding dim must be positive");
    Rng rng(splitmix64(seed ^ 0x636c73686421ULL));
    weight = ag::leaf(rng.normal_tensor({dim, num_classes}, 0.0, 0.02), true);
    bias = ag::leaf(Tensor::zeros({num_classes}), true);
  }

  int64_t dim() const { return weight->value.dim(0); }
  int64_t num_classes() const { return weight->value.dim(1); }
  ParamList params() { return {{"head.weight", weight}, {"head.bias", bias}}; }

  ag::Var logits(const ag::Var& cls) const {  // [B,D] -> [B,K]
    return ag::linear(cls, weight, bias);
  }
};

struct SegmentationHead {
  ag::Var weight;  // [D, K]
  ag::Var bias;    // [K]

  SegmentationHead(int64_t dim, int64_t num_classes, uint64_t seed) {
    if (num_classes < 2) throw InvalidInputError("segmentation needs at least 2 classes");
    if (dim < 1) throw InvalidInputError("embedding dim must be positive");
    Rng rng(splitmix64(seed ^ 0x736567686421ULL));
    weight = ag::leaf(rng.normal_tensor({dim, num_classes}, 0.0, 0.02), true);
    bias = ag::leaf(Tensor::zeros({num_classes}), true);
  }

  int64_t dim() const { return weight->value.dim(0); }
  int64_t num_classes() const { return weight->value.dim(1); }
  ParamList params() { return {{"head.weight", weight}, {"head.bias", bias}}; }

  // per-patch logits bilinearly interpolated to pixel resolution: [B,H,W,K]
  ag::Var logit_map(const ag::Var& patches, int64_t grid_h, int64_t grid_w, int64_t out_h,
                    int64_t out_w) const {
    const int64_t B = patches->value.dim(0);
    const int64_t K = num_classes();
    if (patches->value.dim(1) != grid_h * grid_w)
      throw InvalidInputError("patch count does not match the stated grid");
    ag::Var per_patch = ag::linear(patches, weight, bias);        // [B,N,K]
    ag::Var chan = ag::transpose_last2(per_patch);                // [B,K,N]
    ag::Var grid = ag::reshape(chan, {B * K, grid_h, grid_w});    // classes ride as channels
    ag::Var up = ag::bilinear_resize(grid, out_h, out_w);         // [B*K,H,W]
    ag::Var flat = ag::reshape(up, {B, K, out_h * out_w});
    return ag::reshape(ag::transpose_last2(flat), {B, out_h, out_w, K});
  }
};

struct DepthHead {
  ag::Var weight;  // [2D, 1]
  ag::Var bias;    // [1]
  int64_t upsample_factor;
  Real min_depth;
  Real max_depth;

  DepthHead(int64_t dim, int64_t upsample, uint64_t seed, Real min_d = 0.001, Real max_d = 10.0)
      : upsample_factor(upsample), min_depth(min_d), max_depth(max_d) {
    if (dim < 1) throw InvalidInputError("embedding dim must be positive");
    if (upsample < 1) throw InvalidInputError("upsample factor must be positive");
    if (!(min_d > 0.0 && max_d > min_d))
      throw InvalidInputError("depth range needs 0 < min < max");
    Rng rng(splitmix64(seed ^ 0x646570686421ULL));
    weight = ag::leaf(rng.normal_tensor({2 * dim, 1}, 0.0, 0.02), true);
    // start predictions mid-range so the output clamp never kills gradients
    bias = ag::leaf(Tensor::ones({1}), true);
  }

  int64_t dim() const { return weight->value.dim(0) / 2; }
  ParamList params() { return {{"head.weight", weight}, {"head.bias", bias}}; }

  // [B,H,W] depth in meters; every location sees CLS ++ its own patch token
  ag::Var depth_map(const ag::Var& cls, const ag::Var& patches, int64_t grid_h, int64_t grid_w,
                    int64_t out_h, int64_t out_w) const {
    const int64_t B = patches->value.dim(0);
    const int64_t N = patches->value.dim(1);
    if (N != grid_h * grid_w) throw InvalidInputError("patch count does not match the grid");
    ag::Var feat = ag::concat_last(ag::expand_rows(cls, N), patches);  // [B,N,2D]
    ag::Var raw = ag::linear(feat, weight, bias);                      // [B,N,1]
    ag::Var grid = ag::reshape(raw, {B, grid_h, grid_w});
    // token upsampling by the head's factor, then a fit to the pixel grid
    // (identity when factor == patch size); the linear map commutes with
    // bilinear interpolation, so projecting first costs nothing
    ag::Var up = ag::bilinear_resize(grid, grid_h * upsample_factor, grid_w * upsample_factor);
    if (grid_h * upsample_factor != out_h || grid_w * upsample_factor != out_w)
      up = ag::bilinear_resize(up, out_h, out_w);
    return ag::clamp(up, min_depth, max_depth);
  }
};

// --- plain-tensor inference ------------------------------------------------

inline Tensor predict_classification(const Encoder& encoder, const ClassificationHead& head,
                                     const ImageBatch& batch) {
  ag::NoGradGuard ng;
  auto [cls, patches] = encoder.forward_vars(ag::constant(batch.data));
  (void)patches;
  return ag::softmax_last(head.logits(cls))->value;  // [B,K] rows sum to 1
}

inline Tensor predict_segmentation(const Encoder& encoder, const SegmentationHead& head,
                                   const ImageBatch& batch) {
  batch.check_patch_size(encoder.config().patch_size);
  ag::NoGradGuard ng;
  const int64_t p = encoder.config().patch_size;
  const int64_t H = batch.height(), W = batch.width();
  auto [cls, patches] = encoder.forward_vars(ag::constant(batch.data));
  (void)cls;
  return head.logit_map(patches, H / p, W / p, H, W)->value;  // [B,H,W,K]
}

inline Tensor predict_depth(const Encoder& encoder, const DepthHead& head,
                            const ImageBatch& batch) {
  batch.check_patch_size(encoder.config().patch_size);
  ag::NoGradGuard ng;
  const int64_t p = encoder.config().patch_size;
  const int64_t H = batch.height(), W = batch.width();
  auto [cls, patches] = encoder.forward_vars(ag::constant(batch.data));
  return head.depth_map(cls, patches, H / p, W / p, H, W)->value;  // [B,H,W]
}

// Tiles one [3,H,W] image with fixed-size windows (clamped to the far edge),
// runs direct segmentation inference per window, and averages logits where
// windows overlap. Handles images whose size the patch grid does not divide.
inline Tensor sliding_window_inference(const Encoder& encoder, const SegmentationHead& head,
                                       const Tensor& image, std::pair<int64_t, int64_t> window,
                                       std::pair<int64_t, int64_t> stride) {
  if (image.rank() != 3 || image.dim(0) != kImageChannels)
    throw InvalidInputError("sliding window expects one [3,H,W] image");
  const int64_t H = image.dim(1), W = image.dim(2);
  const auto [wh, ww] = window;
  const auto [sh, sw] = stride;
  const int64_t p = encoder.config().patch_size;
  if (wh % p != 0 || ww % p != 0)
    throw InvalidInputError("window dims must be divisible by the patch size");
  if (sh < 1 || sw < 1 || sh > wh || sw > ww)
    throw InvalidInputError("stride must be positive and at most the window");
  if (wh > H || ww > W) throw InvalidInputError("window larger than the image");

  auto offsets = [](int64_t extent, int64_t win, int64_t step) {
    std::vector<int64_t> at;
    for (int64_t o = 0;; o += step) {
      if (o + win >= extent) {
        at.push_back(extent - win);  // clamp the last window to the edge
        break;
      }
      at.push_back(o);
    }
    return at;
  };

  const int64_t K = head.num_classes();
  Tensor sum = Tensor::zeros({H, W, K});
  Tensor count = Tensor::zeros({H, W});
  for (int64_t oy : offsets(H, wh, sh))
    for (int64_t ox : offsets(W, ww, sw)) {
      Tensor tile({1, kImageChannels, wh, ww});
      for (int64_t c = 0; c < kImageChannels; ++c)
        for (int64_t y = 0; y < wh; ++y)
          std::copy(image.data() + (c * H + oy + y) * W + ox,
                    image.data() + (c * H + oy + y) * W + ox + ww,
                    tile.data() + (c * wh + y) * ww);
      Tensor logits = predict_segmentation(encoder, head, ImageBatch(tile));  // [1,wh,ww,K]
      for (int64_t y = 0; y < wh; ++y)
        for (int64_t x = 0; x < ww; ++x) {
          count.at(oy + y, ox + x) += 1.0;
          for (int64_t k = 0; k < K; ++k)
            sum.at(oy + y, ox + x, k) += logits.at(0, y, x, k);
        }
    }
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      if (count.at(y, x) < 1.0) throw ContractError("sliding window left a pixel uncovered");
      for (int64_t k = 0; k < K; ++k) sum.at(y, x, k) /= count.at(y, x);
    }
  return sum;  // [H,W,K]
}

// --- training --------------------------------------------------------------

struct HeadTrainConfig {
  Task task = Task::Classification;
  Real learning_rate = 0.5;
  Real weight_decay = 0.0;
  int64_t batch_size = 16;
  int64_t epochs = 5;
  std::string optimizer = "adam";
  std::vector<std::string> augmentations{"hflip"};

  static HeadTrainConfig defaults_for(Task task) {
    HeadTrainConfig c;
    c.task = task;
    switch (task) {
      case Task::Classification:
        c.learning_rate = 0.5;
        c.weight_decay = 0.0;
        c.batch_size = 16;
        c.epochs = 5;
        c.optimizer = "adam";
        c.augmentations = {"hflip"};
        break;
      case Task::Segmentation:
        c.learning_rate = 1e-4;
        c.weight_decay = 1e-3;
        c.batch_size = 16;
        c.epochs = 50;
        c.optimizer = "adamw";
        c.augmentations = {"random_crop", "hflip", "vflip"};
        break;
      case Task::Depth:
        c.learning_rate = 1e-4;
        c.weight_decay = 0.01;
        c.batch_size = 128;
        c.epochs = 20;
        c.optimizer = "adamw";
        c.augmentations = {};
        break;
    }
    return c;
  }

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("head.learning_rate", "must be positive");
    if (weight_decay < 0.0) throw ConfigError("head.weight_decay", "must be non-negative");
    if (batch_size < 1) throw ConfigError("head.batch_size", "must be positive");
    if (epochs < 1) throw ConfigError("head.epochs", "must be positive");
    if (optimizer != "adam" && optimizer != "adamw")
      throw ConfigError("head.optimizer", "must be adam or adamw");
  }
};

namespace detail {

inline void require_frozen(const Encoder& encoder) {
  if (!encoder.frozen())
    throw InvalidInputError("head training requires a frozen encoder");
}

// mean cross-entropy over labeled rows
inline ag::Var classification_batch_loss(const ClassificationHead& head, const ag::Var& cls,
                                         const std::vector<int64_t>& labels) {
  ag::Var logits = head.logits(cls);
  const int64_t B = logits->value.dim(0);
  const int64_t K = logits->value.dim(1);
  for (int64_t y : labels)
    if (y < 0 || y >= K) throw InvalidInputError("class label out of range");
  Tensor w = Tensor::ones({B});
  return ag::scale(ag::weighted_cross_entropy(logits, labels, w.vec()),
                   1.0 / static_cast<Real>(B));
}

// mean pixel-wise cross-entropy; ignore-labeled pixels carry zero weight
inline ag::Var segmentation_batch_loss(const SegmentationHead& head, const ag::Var& patches,
                                       const Tensor& masks, int64_t grid_h, int64_t grid_w) {
  const int64_t B = masks.dim(0), H = masks.dim(1), W = masks.dim(2);
  const int64_t K = head.num_classes();
  ag::Var map = head.logit_map(patches, grid_h, grid_w, H, W);   // [B,H,W,K]
  ag::Var rows = ag::reshape(map, {B * H * W, K});
  std::vector<int64_t> labels(B * H * W);
  std::vector<Real> weights(B * H * W);
  int64_t valid = 0;
  for (int64_t i = 0; i < B * H * W; ++i) {
    const int64_t v = static_cast<int64_t>(masks[i]);
    if (v == kIgnoreIndex) {
      labels[i] = 0;
      weights[i] = 0.0;
    } else {
      if (v < 0 || v >= K) throw InvalidInputError("mask label out of range");
      labels[i] = v;
      weights[i] = 1.0;
      ++valid;
    }
  }
  if (valid == 0) throw InvalidInputError("batch has no labeled pixels");
  return ag::scale(ag::weighted_cross_entropy(rows, labels, weights),
                   1.0 / static_cast<Real>(valid));
}

// invalid ground-truth pixels (non-positive) are overwritten with the
// prediction snapshot so they contribute zero residual and no gradient
inline ag::Var depth_batch_loss(const DepthHead& head, const ag::Var& cls,
                                const ag::Var& patches, const Tensor& gt, int64_t grid_h,
                                int64_t grid_w, const DepthLossParams& params) {
  const int64_t H = gt.dim(1), W = gt.dim(2);
  ag::Var pred = head.depth_map(cls, patches, grid_h, grid_w, H, W);
  Tensor target = gt;
  for (int64_t i = 0; i < target.numel(); ++i)
    if (!(target[i] > 0.0)) target[i] = pred->value[i];
  return combined_depth_loss(pred, ag::constant(target), params);
}

}  // namespace detail

// Minimizes the task loss over head parameters with the encoder held frozen;
// embeddings are computed without the tape, so no gradient can leak into the
// encoder. Returns the per-epoch mean training loss.
template <typename Head>
std::vector<Real> train_head(const Encoder& encoder, Head& head, const Dataset& dataset,
                             const HeadTrainConfig& cfg, uint64_t seed) {
  cfg.validate();
  detail::require_frozen(encoder);
  if (dataset.empty()) throw InvalidInputError("cannot train a head on an empty dataset");

  constexpr bool is_cls = std::is_same_v<Head, ClassificationHead>;
  constexpr bool is_seg = std::is_same_v<Head, SegmentationHead>;
  constexpr bool is_dep = std::is_same_v<Head, DepthHead>;
  static_assert(is_cls || is_seg || is_dep, "unknown head type");
  if ((is_cls && cfg.task != Task::Classification) || (is_seg && cfg.task != Task::Segmentation) ||
      (is_dep && cfg.task != Task::Depth))
    throw InvalidInputError("head type does not match the configured task");
  for (const auto& s : dataset.samples) {
    if (is_cls && s.label < 0) throw InvalidInputError("classification sample lacks a label");
    if (is_seg && s.mask.numel() == 0) throw InvalidInputError("segmentation sample lacks a mask");
    if (is_dep && s.depth.numel() == 0) throw InvalidInputError("depth sample lacks a depth map");
  }

  const int64_t p = encoder.config().patch_size;
  Adam opt(vars_of(head.params()), cfg.learning_rate, cfg.weight_decay);
  Rng rng(splitmix64(seed ^ 0x68656164ULL));
  DepthLossParams depth_params;

  std::vector<Real> epoch_losses;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = rng.permutation(dataset.size());
    Real loss_sum = 0.0;
    int64_t batches = 0;
    for (int64_t at = 0; at < dataset.size(); at += cfg.batch_size) {
      const int64_t bsz = std::min<int64_t>(cfg.batch_size, dataset.size() - at);
      std::vector<Sample> batch_samples;
      batch_samples.reserve(bsz);
      for (int64_t i = 0; i < bsz; ++i)
        batch_samples.push_back(
            apply_augmentations(dataset.samples[order[at + i]], cfg.augmentations, rng));

      Dataset view;
      view.samples = std::move(batch_samples);
      auto idx = all_indices(view);
      ImageBatch images = stack_images(view, idx);
      images.check_patch_size(p);
      const int64_t gh = images.height() / p, gw = images.width() / p;

      Tensor cls_emb, patch_emb;
      {
        ag::NoGradGuard ng;
        auto [c, pt] = encoder.forward_vars(ag::constant(images.data));
        cls_emb = c->value;
        patch_emb = pt->value;
      }

      ag::Var loss;
      if constexpr (is_cls) {
        loss = detail::classification_batch_loss(head, ag::constant(cls_emb),
                                                 gather_labels(view, idx));
      } else if constexpr (is_seg) {
        loss = detail::segmentation_batch_loss(head, ag::constant(patch_emb),
                                               stack_masks(view, idx), gh, gw);
      } else {
        loss = detail::depth_batch_loss(head, ag::constant(cls_emb), ag::constant(patch_emb),
                                        stack_depths(view, idx), gh, gw, depth_params);
      }
      opt.zero_grad();
      ag::backward(loss);
      opt.step();
      loss_sum += ag::scalar_value(loss);
      ++batches;
    }
    epoch_losses.push_back(loss_sum / static_cast<Real>(batches));
  }
  return epoch_losses;
}

// classifier fit directly on a fixed embedding matrix: the training math of
// train_head isolated from the encoder, used for oracle tests and probes
inline std::vector<Real> train_classifier_on_embeddings(ClassificationHead& head,
                                                        const Tensor& embeddings,
                                                        const std::vector<int64_t>& labels,
                                                        Real lr, int64_t epochs,
                                                        int64_t batch_size, uint64_t seed) {
  if (embeddings.rank() != 2) throw InvalidInputError("embeddings must be [M,D]");
  const int64_t M = embeddings.dim(0), D = embeddings.dim(1);
  if (static_cast<int64_t>(labels.size()) != M)
    throw InvalidInputError("one label per embedding row required");
  if (D != head.dim()) throw InvalidInputError("embedding width does not match the head");
  if (epochs < 1 || batch_size < 1) throw InvalidInputError("epochs and batch size are positive");

  Adam opt(vars_of(head.params()), lr);
  Rng rng(splitmix64(seed ^ 0x70726f6265ULL));
  std::vector<Real> epoch_losses;
  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    auto order = rng.permutation(M);
    Real loss_sum = 0.0;
    int64_t batches = 0;
    for (int64_t at = 0; at < M; at += batch_size) {
      const int64_t bsz = std::min<int64_t>(batch_size, M - at);
      Tensor rows({bsz, D});
      std::vector<int64_t> batch_labels(bsz);
      for (int64_t i = 0; i < bsz; ++i) {
        std::copy(embeddings.data() + order[at + i] * D, embeddings.data() + (order[at + i] + 1) * D,
                  rows.data() + i * D);
        batch_labels[i] = labels[order[at + i]];
      }
      ag::Var loss =
          detail::classification_batch_loss(head, ag::constant(rows), batch_labels);
      opt.zero_grad();
      ag::backward(loss);
      opt.step();
      loss_sum += ag::scalar_value(loss);
      ++batches;
    }
    epoch_losses.push_back(loss_sum / static_cast<Real>(batches));
  }
  return epoch_losses;
}

// --- head checkpointing ----------------------------------------------------

namespace detail {
inline nlohmann::json head_header(Task task) {
  nlohmann::json j;
  j["kind"] = "head";
  j["task"] = task_name(task);
  return j;
}
inline CheckpointData load_head_checkpoint(const std::string& path, Task task) {
  CheckpointData data = read_checkpoint(path);
  if (data.header.value("kind", "") != "head")
    throw IncompatibleCheckpointError("'" + path + "' does not hold a head");
  if (data.header.value("task", "") != task_name(task))
    throw IncompatibleCheckpointError("'" + path + "' holds a " +
                                      data.header.value("task", "?") + " head, wanted " +
                                      task_name(task));
  return data;
}
}  // namespace detail

inline void head_save(const std::string& path, const ClassificationHead& head) {
  CheckpointData data;
  data.header = detail::head_header(Task::Classification);
  data.arrays = {{"head.weight", head.weight->value}, {"head.bias", head.bias->value}};
  write_checkpoint(path, data);
}

inline void head_save(const std::string& path, const SegmentationHead& head) {
  CheckpointData data;
  data.header = detail::head_header(Task::Segmentation);
  data.arrays = {{"head.weight", head.weight->value}, {"head.bias", head.bias->value}};
  write_checkpoint(path, data);
}

inline void head_save(const std::string& path, const DepthHead& head) {
  CheckpointData data;
  data.header = detail::head_header(Task::Depth);
  data.header["upsample_factor"] = head.upsample_factor;
  data.header["min_depth"] = head.min_depth;
  data.header["max_depth"] = head.max_depth;
  data.arrays = {{"head.weight", head.weight->value}, {"head.bias", head.bias->value}};
  write_checkpoint(path, data);
}

inline ClassificationHead load_classification_head(const std::string& path) {
  CheckpointData data = detail::load_head_checkpoint(path, Task::Classification);
  const Tensor& w = data.find("head.weight");
  ClassificationHead head(w.dim(0), w.dim(1), 0);
  head.weight->value = w;
  head.bias->value = data.find("head.bias");
  return head;
}

inline SegmentationHead load_segmentation_head(const std::string& path) {
  CheckpointData data = detail::load_head_checkpoint(path, Task::Segmentation);
  const Tensor& w = data.find("head.weight");
  SegmentationHead head(w.dim(0), w.dim(1), 0);
  head.weight->value = w;
  head.bias->value = data.find("head.bias");
  return head;
}

inline DepthHead load_depth_head(const std::string& path) {
  CheckpointData data = detail::load_head_checkpoint(path, Task::Depth);
  const Tensor& w = data.find("head.weight");
  DepthHead head(w.dim(0) / 2, data.header.value("upsample_factor", 1), 0,
                 data.header.value("min_depth", 0.001), data.header.value("max_depth", 10.0));
  head.weight->value = w;
  head.bias->value = data.find("head.bias");
  return head;
}

}  // namespace srb
