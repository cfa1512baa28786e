#pragma once

#include <cmath>
#include <vector>

#include "srb/dataset.hpp"
#include "srb/tensor.hpp"

namespace srb {

// Task metrics with dataset-wide accumulators: per-image numbers are not
// averaged; counts are pooled first and reduced once at the end.

struct AccuracyAccumulator {
  int64_t correct = 0;
  int64_t total = 0;

  void add(int64_t predicted, int64_t truth) {
    if (predicted == truth) ++correct;
    ++total;
  }
  Real value() const {
    if (total == 0) throw InvalidInputError("accuracy over zero predictions");
    return static_cast<Real>(correct) / static_cast<Real>(total);
  }
};

// intersection/union pooled per class over every pixel seen
struct MiouAccumulator {
  std::vector<int64_t> intersection;
  std::vector<int64_t> union_;
  int64_t ignore_index;

  explicit MiouAccumulator(int64_t num_classes, int64_t ignore = kIgnoreIndex)
      : intersection(num_classes, 0), union_(num_classes, 0), ignore_index(ignore) {
    if (num_classes < 1) throw InvalidInputError("mIoU needs at least one class");
  }

  void add(const Tensor& predicted, const Tensor& truth) {
    if (!predicted.same_shape(truth))
      throw InvalidInputError("prediction and ground-truth masks differ in shape");
    const int64_t K = static_cast<int64_t>(union_.size());
    for (int64_t i = 0; i < predicted.numel(); ++i) {
      const int64_t t = static_cast<int64_t>(truth[i]);
      if (t == ignore_index) continue;
      const int64_t p = static_cast<int64_t>(predicted[i]);
      if (t < 0 || t >= K) throw InvalidInputError("ground-truth label out of range");
      if (p < 0 || p >= K) throw InvalidInputError("predicted label out of range");
      if (p == t) {
        ++intersection[t];
        ++union_[t];
      } else {
        ++union_[t];
        ++union_[p];
      }
    }
  }

  // classes absent from both prediction and ground truth are excluded
  Real value() const {
    Real sum = 0.0;
    int64_t present = 0;
    for (size_t k = 0; k < union_.size(); ++k) {
      if (union_[k] == 0) continue;
      sum += static_cast<Real>(intersection[k]) / static_cast<Real>(union_[k]);
      ++present;
    }
    if (present == 0) throw InvalidInputError("mIoU undefined: every pixel was ignored");
    return sum / static_cast<Real>(present);
  }
};

// squared error pooled over valid (ground truth > 0) pixels
struct RmseAccumulator {
  Real sq_sum = 0.0;
  int64_t count = 0;

  void add(const Tensor& predicted, const Tensor& truth) {
    if (!predicted.same_shape(truth))
      throw InvalidInputError("prediction and ground-truth depth differ in shape");
    for (int64_t i = 0; i < predicted.numel(); ++i) {
      if (!(truth[i] > 0.0)) continue;
      const Real d = predicted[i] - truth[i];
      sq_sum += d * d;
      ++count;
    }
  }
  Real value() const {
    if (count == 0) throw InvalidInputError("RMSE over zero valid pixels");
    return std::sqrt(sq_sum / static_cast<Real>(count));
  }
};

// --- one-shot conveniences ---------------------------------------------------

inline Real accuracy(const std::vector<int64_t>& predicted, const std::vector<int64_t>& truth) {
  if (predicted.size() != truth.size())
    throw InvalidInputError("prediction and label counts differ");
  AccuracyAccumulator acc;
  for (size_t i = 0; i < predicted.size(); ++i) acc.add(predicted[i], truth[i]);
  return acc.value();
}

inline Real miou(const Tensor& predicted, const Tensor& truth, int64_t num_classes,
                 int64_t ignore_index = kIgnoreIndex) {
  MiouAccumulator acc(num_classes, ignore_index);
  acc.add(predicted, truth);
  return acc.value();
}

inline Real rmse(const Tensor& predicted, const Tensor& truth) {
  RmseAccumulator acc;
  acc.add(predicted, truth);
  return acc.value();
}

// argmax over the trailing class axis of a [H,W,K] or [B,H,W,K] logit map;
// ties resolve to the lowest class index
inline Tensor argmax_classes(const Tensor& logits) {
  if (logits.rank() < 2) throw InvalidInputError("logit map must end in a class axis");
  const int64_t K = logits.dim(logits.rank() - 1);
  Shape out_shape(logits.shape().begin(), logits.shape().end() - 1);
  const int64_t cells = logits.numel() / K;
  Tensor out(out_shape);
  for (int64_t i = 0; i < cells; ++i) {
    int64_t best = 0;
    for (int64_t k = 1; k < K; ++k)
      if (logits[i * K + k] > logits[i * K + best]) best = k;
    out[i] = static_cast<Real>(best);
  }
  return out;
}

}  // namespace srb
