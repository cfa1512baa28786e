#pragma once

// Toy self-distillation pretraining. A student encoder is trained to match a
// slowly moving teacher copy of itself: each image yields two augmented
// views, the teacher's projected embedding of one view becomes a
// temperature-softened target distribution for the student's projection of
// the other, and the teacher tracks the student by exponential moving
// average. Gradients flow only through the student; the teacher is treated
// as a constant at every step. Multi-crop and output centering are omitted
// at this scale, and the projection head is discarded after training.

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "srb/augment.hpp"
#include "srb/dataset.hpp"
#include "srb/encoder.hpp"
#include "srb/optim.hpp"

namespace srb {

struct DinoPretrainConfig {
  Real teacher_momentum = 0.99;
  Real temperature_student = 0.1;
  Real temperature_teacher = 0.07;
  int64_t epochs = 5;
  int64_t batch_size = 16;
  Real learning_rate = 1e-3;
  int64_t projection_dim = 256;
  std::vector<std::string> augmentations = {"resized_crop", "hflip", "color_jitter"};
  uint64_t seed = 0;

  void validate() const {
    if (!(teacher_momentum >= 0.0 && teacher_momentum <= 1.0))
      throw ConfigError("dino.teacher_momentum", "must lie in [0,1]");
    if (!(temperature_student > 0.0))
      throw ConfigError("dino.temperature_student", "must be positive");
    if (!(temperature_teacher > 0.0))
      throw ConfigError("dino.temperature_teacher", "must be positive");
    if (epochs < 1) throw ConfigError("dino.epochs", "must be at least 1");
    if (batch_size < 1) throw ConfigError("dino.batch_size", "must be at least 1");
    if (!(learning_rate > 0.0)) throw ConfigError("dino.learning_rate", "must be positive");
    if (projection_dim < 1) throw ConfigError("dino.projection_dim", "must be at least 1");
  }
};

// teacher <- m * teacher + (1 - m) * student, parameter by parameter.
inline void ema_update(ParamList& teacher, const ParamList& student, Real momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0))
    throw InvalidInputError("ema_update: momentum must lie in [0,1]");
  if (teacher.size() != student.size())
    throw InvalidInputError("ema_update: parameter lists differ in length");
  for (size_t i = 0; i < teacher.size(); ++i) {
    Tensor& t = teacher[i].var->value;
    const Tensor& s = student[i].var->value;
    if (t.shape() != s.shape())
      throw InvalidInputError("ema_update: shape mismatch at parameter '" + teacher[i].name +
                              "'");
    for (int64_t j = 0; j < t.numel(); ++j)
      t[j] = momentum * t[j] + (1.0 - momentum) * s[j];
  }
}

namespace detail {

// Two-layer projection head mapping CLS embeddings to distillation logits.
// MLP bottleneck over the CLS token concatenated with the average-pooled
// patch tokens, batch-standardized and L2-normalized, then matched against a
// prototype layer. The pooled patches give the targets a view of local
// structure from the very first step, unit-norm input keeps the logits at
// unit scale so the softmax temperatures bite, and the batch normalization
// removes the constant-output solution: identical embeddings would yield
// all-zero standardized features and uninformative targets, so the
// distillation objective only pays off while embeddings stay spread out.
inline ParamList make_projection(int64_t dim, int64_t out_dim, Rng& rng) {
  ParamList p;
  p.push_back(
      {"proj.fc1.weight", ag::leaf(rng.normal_tensor({2 * dim, out_dim}, 0.0, 0.02), true)});
  p.push_back({"proj.fc1.bias", ag::leaf(Tensor::zeros({out_dim}), true)});
  p.push_back(
      {"proj.fc2.weight", ag::leaf(rng.normal_tensor({out_dim, out_dim}, 0.0, 0.02), true)});
  p.push_back({"proj.fc2.bias", ag::leaf(Tensor::zeros({out_dim}), true)});
  p.push_back(
      {"proj.proto.weight", ag::leaf(rng.normal_tensor({out_dim, out_dim}, 0.0, 1.0), true)});
  return p;
}

// unit-norm bottleneck embedding shared by both networks
inline ag::Var distill_embed(const ParamList& proj, const ag::Var& cls, const ag::Var& patches) {
  const int64_t B = patches->value.dim(0), T = patches->value.dim(1);
  const int64_t D = patches->value.dim(2);
  ag::Var pool = ag::reshape(
      ag::bmm(ag::constant(Tensor::full({B, 1, T}, 1.0 / static_cast<Real>(T))), patches),
      {B, D});
  ag::Var h = ag::gelu(ag::linear(ag::concat_last(cls, pool), proj[0].var, proj[1].var));
  return ag::normalize_rows(ag::batchnorm_cols(ag::linear(h, proj[2].var, proj[3].var)));
}

inline ag::Var project(const ParamList& proj, const ag::Var& cls, const ag::Var& patches) {
  return ag::matmul(distill_embed(proj, cls, patches), proj[4].var);
}

// Student-only predictor MLP between the student's embedding and the
// prototypes. The teacher has no counterpart, which breaks the symmetry of
// the two networks: the student can track the teacher's targets by adapting
// the predictor instead of degenerating its trunk.
inline ParamList make_predictor(int64_t out_dim, Rng& rng) {
  ParamList p;
  p.push_back(
      {"pred.fc1.weight", ag::leaf(rng.normal_tensor({out_dim, out_dim}, 0.0, 0.02), true)});
  p.push_back({"pred.fc1.bias", ag::leaf(Tensor::zeros({out_dim}), true)});
  p.push_back(
      {"pred.fc2.weight", ag::leaf(rng.normal_tensor({out_dim, out_dim}, 0.0, 0.02), true)});
  p.push_back({"pred.fc2.bias", ag::leaf(Tensor::zeros({out_dim}), true)});
  return p;
}

inline ag::Var predict(const ParamList& pred, const ag::Var& zn) {
  ag::Var h = ag::gelu(ag::linear(zn, pred[0].var, pred[1].var));
  return ag::normalize_rows(ag::linear(h, pred[2].var, pred[3].var));
}

// Teacher target: row-wise softmax of projected embeddings at the teacher
// temperature, evaluated without building a graph.
inline Tensor teacher_targets(const Encoder& teacher, const ParamList& proj,
                              const ImageBatch& view, Real temperature) {
  ag::NoGradGuard ng;
  auto [cls, patches] = teacher.forward_vars(ag::constant(view.data));
  ag::Var logits = project(proj, cls, patches);
  return ag::softmax_last(ag::scale(logits, 1.0 / temperature))->value;
}

// Mean over rows of cross-entropy between a fixed target distribution and the
// student's temperature-scaled log-probabilities.
inline ag::Var distill_ce(const Tensor& targets, const ag::Var& student_logits,
                          Real temperature) {
  ag::Var logp = ag::log_softmax_last(ag::scale(student_logits, 1.0 / temperature));
  ag::Var per_row = ag::sum_last(ag::mul(ag::constant(targets), logp));
  return ag::neg(ag::mean_all(per_row));
}

}  // namespace detail

// Holds the student/teacher pair plus projection heads and performs one
// distillation update per step. Exposed separately from the pretraining
// driver so the EMA and loss mechanics stay testable in isolation.
class DinoTrainer {
 public:
  DinoTrainer(const Encoder& student, DinoPretrainConfig cfg)
      : cfg_(validated(std::move(cfg))),
        student_(student.clone()),
        teacher_(student.clone()),
        rng_(splitmix64(cfg_.seed ^ 0x64696e6fULL)),
        proj_s_(detail::make_projection(student.config().dim, cfg_.projection_dim, rng_)),
        proj_t_(detail::make_projection(student.config().dim, cfg_.projection_dim, rng_)),
        pred_s_(detail::make_predictor(cfg_.projection_dim, rng_)),
        opt_(trainable_vars(), cfg_.learning_rate) {
    student_.set_frozen(false);
    teacher_.set_frozen(false);
    // teacher projection starts as a copy of the student's
    for (size_t i = 0; i < proj_t_.size(); ++i) proj_t_[i].var->value = proj_s_[i].var->value;
  }

  // One optimization step on a batch of samples: build two augmented views,
  // distill teacher(view A) into student(view B) and vice versa, update the
  // student by gradient descent and the teacher by EMA. Returns the loss.
  Real step(const std::vector<Sample>& batch) {
    if (batch.empty()) throw InvalidInputError("dino step: batch must be non-empty");
    std::vector<Sample> v1, v2;
    v1.reserve(batch.size());
    v2.reserve(batch.size());
    for (const Sample& s : batch) {
      v1.push_back(apply_augmentations(s, cfg_.augmentations, rng_));
      v2.push_back(apply_augmentations(s, cfg_.augmentations, rng_));
    }
    ImageBatch x1 = stack_images(v1), x2 = stack_images(v2);

    Tensor q1 = detail::teacher_targets(teacher_, proj_t_, x1, cfg_.temperature_teacher);
    Tensor q2 = detail::teacher_targets(teacher_, proj_t_, x2, cfg_.temperature_teacher);

    auto [cls1, p1] = student_.forward_vars(ag::constant(x1.data));
    auto [cls2, p2] = student_.forward_vars(ag::constant(x2.data));
    ag::Var s1 = ag::matmul(detail::predict(pred_s_, detail::distill_embed(proj_s_, cls1, p1)),
                            proj_s_[4].var);
    ag::Var s2 = ag::matmul(detail::predict(pred_s_, detail::distill_embed(proj_s_, cls2, p2)),
                            proj_s_[4].var);

    // symmetric pairing: each view is scored against the other view's target
    ag::Var loss = ag::scale(ag::add(detail::distill_ce(q2, s1, cfg_.temperature_student),
                                     detail::distill_ce(q1, s2, cfg_.temperature_student)),
                             0.5);
    opt_.zero_grad();
    ag::backward(loss);
    opt_.step();

    ema_update(teacher_.params(), student_.params(), cfg_.teacher_momentum);
    ema_update(proj_t_, proj_s_, cfg_.teacher_momentum);
    return ag::scalar_value(loss);
  }

  Encoder& student() { return student_; }
  const Encoder& student() const { return student_; }
  const Encoder& teacher() const { return teacher_; }
  const ParamList& student_projection() const { return proj_s_; }
  const ParamList& teacher_projection() const { return proj_t_; }
  Rng& rng() { return rng_; }

 private:
  static DinoPretrainConfig validated(DinoPretrainConfig cfg) {
    cfg.validate();
    return cfg;
  }

  std::vector<ag::Var> trainable_vars() const {
    std::vector<ag::Var> vars = vars_of(student_.params());
    for (const auto& p : proj_s_) vars.push_back(p.var);
    for (const auto& p : pred_s_) vars.push_back(p.var);
    return vars;
  }

  DinoPretrainConfig cfg_;
  Encoder student_;
  Encoder teacher_;
  Rng rng_;
  ParamList proj_s_;
  ParamList proj_t_;
  ParamList pred_s_;
  Adam opt_;
};

// Full toy pretraining loop over a dataset. Returns the trained student
// encoder; the projection heads and the teacher are discarded. Per-epoch mean
// losses are appended to epoch_losses when given.
inline Encoder toy_dino_pretrain(const Encoder& student, const Dataset& dataset,
                                 const DinoPretrainConfig& config,
                                 std::vector<Real>* epoch_losses = nullptr) {
  config.validate();
  if (dataset.empty()) throw InvalidInputError("dino pretrain: dataset must be non-empty");

  DinoTrainer trainer(student, config);
  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int64_t> order =
        trainer.rng().permutation(static_cast<int64_t>(dataset.size()));
    Real total = 0.0;
    int64_t batches = 0;
    for (size_t start = 0; start < order.size(); start += config.batch_size) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      std::vector<Sample> batch;
      batch.reserve(stop - start);
      for (size_t i = start; i < stop; ++i) batch.push_back(dataset.samples[order[i]]);
      total += trainer.step(batch);
      ++batches;
    }
    if (epoch_losses) epoch_losses->push_back(total / batches);
  }
  return trainer.student().clone();
}

}  // namespace srb
