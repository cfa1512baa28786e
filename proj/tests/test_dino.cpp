#include <cmath>

#include "doctest.h"
#include "srb/dino.hpp"
#include "srb/synthetic.hpp"

using namespace srb;

namespace {

EncoderConfig tiny_cfg() {
  EncoderConfig c;
  c.patch_size = 4;
  c.dim = 16;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2.0;
  return c;
}

Dataset tiny_dataset(int64_t n = 12) {
  SyntheticShapesSpec spec;
  spec.num_samples = n;
  spec.image_size = 8;
  spec.num_shape_classes = 2;
  spec.seed = 9;
  return generate_synthetic_dataset(spec, 4);
}

Tensor snapshot(const ParamList& params) {
  int64_t total = 0;
  for (const auto& p : params) total += p.var->value.numel();
  Tensor out({total});
  int64_t at = 0;
  for (const auto& p : params)
    for (int64_t j = 0; j < p.var->value.numel(); ++j) out[at++] = p.var->value[j];
  return out;
}

}  // namespace

TEST_CASE("pretrain config defaults and validation") {
  DinoPretrainConfig c;
  CHECK(c.teacher_momentum == 0.99);
  CHECK(c.temperature_student == 0.1);
  CHECK(c.temperature_teacher == 0.07);
  CHECK(c.projection_dim == 256);
  CHECK(c.augmentations ==
        std::vector<std::string>{"resized_crop", "hflip", "color_jitter"});
  CHECK_NOTHROW(c.validate());

  c.teacher_momentum = 1.001;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.teacher_momentum = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.temperature_student = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.temperature_teacher = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.projection_dim = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("ema update blends parameter lists elementwise") {
  Rng rng(4);
  ParamList teacher, student;
  for (int i = 0; i < 3; ++i) {
    teacher.push_back({"p" + std::to_string(i), ag::leaf(rng.uniform_tensor({4}, -1, 1), true)});
    student.push_back({"p" + std::to_string(i), ag::leaf(rng.uniform_tensor({4}, -1, 1), true)});
  }
  Tensor t0 = snapshot(teacher), s0 = snapshot(student);

  ParamList t1;
  for (const auto& p : teacher) t1.push_back({p.name, ag::leaf(p.var->value, false)});
  ema_update(t1, student, 0.75);
  Tensor blended = snapshot(t1);
  for (int64_t j = 0; j < blended.numel(); ++j)
    CHECK(blended[j] == doctest::Approx(0.75 * t0[j] + 0.25 * s0[j]).epsilon(1e-12));

  ParamList t_keep;
  for (const auto& p : teacher) t_keep.push_back({p.name, ag::leaf(p.var->value, false)});
  ema_update(t_keep, student, 1.0);
  CHECK(max_abs_diff(snapshot(t_keep), t0) == 0.0);

  ParamList t_copy;
  for (const auto& p : teacher) t_copy.push_back({p.name, ag::leaf(p.var->value, false)});
  ema_update(t_copy, student, 0.0);
  CHECK(max_abs_diff(snapshot(t_copy), s0) == 0.0);

  ParamList short_list(student.begin(), student.begin() + 2);
  CHECK_THROWS_AS(ema_update(teacher, short_list, 0.5), InvalidInputError);
  CHECK_THROWS_AS(ema_update(teacher, student, 1.5), InvalidInputError);
  CHECK_THROWS_AS(ema_update(teacher, student, -0.5), InvalidInputError);
}

TEST_CASE("momentum one freezes the teacher, momentum zero copies the student") {
  Dataset ds = tiny_dataset();
  std::vector<Sample> batch(ds.samples.begin(), ds.samples.begin() + 4);

  DinoPretrainConfig cfg;
  cfg.teacher_momentum = 1.0;
  cfg.projection_dim = 8;
  cfg.seed = 1;
  Encoder enc(tiny_cfg(), 2);
  DinoTrainer frozen_teacher(enc, cfg);
  Tensor t0 = snapshot(frozen_teacher.teacher().params());
  frozen_teacher.step(batch);
  frozen_teacher.step(batch);
  CHECK(max_abs_diff(snapshot(frozen_teacher.teacher().params()), t0) == 0.0);
  // while the student moved
  CHECK(max_abs_diff(snapshot(frozen_teacher.student().params()), t0) > 0.0);

  cfg.teacher_momentum = 0.0;
  DinoTrainer mirror(enc, cfg);
  mirror.step(batch);
  CHECK(max_abs_diff(snapshot(mirror.teacher().params()),
                     snapshot(mirror.student().params())) == 0.0);
  CHECK(max_abs_diff(snapshot(mirror.teacher_projection()),
                     snapshot(mirror.student_projection())) == 0.0);
}

TEST_CASE("distillation steps run, report finite loss, and are seed-deterministic") {
  Dataset ds = tiny_dataset();
  DinoPretrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.projection_dim = 8;
  cfg.seed = 3;

  Encoder enc(tiny_cfg(), 5);
  std::vector<Real> losses_a, losses_b;
  Encoder out_a = toy_dino_pretrain(enc, ds, cfg, &losses_a);
  Encoder out_b = toy_dino_pretrain(enc, ds, cfg, &losses_b);
  CHECK(losses_a.size() == 2);
  CHECK(losses_a == losses_b);
  for (Real l : losses_a) {
    CHECK(std::isfinite(l));
    CHECK(l > 0.0);  // cross-entropy against a softmax target is positive
  }
  CHECK(max_abs_diff(snapshot(out_a.params()), snapshot(out_b.params())) == 0.0);
  // training moved the student away from its initialization
  CHECK(max_abs_diff(snapshot(out_a.params()), snapshot(enc.params())) > 0.0);

  cfg.seed = 4;
  Encoder out_c = toy_dino_pretrain(enc, ds, cfg);
  CHECK(max_abs_diff(snapshot(out_a.params()), snapshot(out_c.params())) > 0.0);
}

TEST_CASE("pretraining rejects degenerate inputs") {
  Encoder enc(tiny_cfg(), 2);
  DinoPretrainConfig cfg;
  cfg.projection_dim = 8;
  Dataset empty;
  CHECK_THROWS_AS(toy_dino_pretrain(enc, empty, cfg), InvalidInputError);

  DinoTrainer trainer(enc, cfg);
  CHECK_THROWS_AS(trainer.step({}), InvalidInputError);
}
