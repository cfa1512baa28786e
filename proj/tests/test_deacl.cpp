#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>

#include "doctest.h"
#include "srb/deacl.hpp"
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

Dataset tiny_dataset(int64_t n = 10) {
  SyntheticShapesSpec spec;
  spec.num_samples = n;
  spec.image_size = 8;
  spec.num_shape_classes = 2;
  spec.seed = 17;
  return generate_synthetic_dataset(spec, 4);
}

DeACLConfig tiny_deacl() {
  DeACLConfig c;
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.batch_size = 8;
  c.attack_steps = 1;
  c.eval_every = 1;
  c.learning_rate = 1e-3;
  return c;
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

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("srb_deacl_" + std::to_string(std::rand()) + std::to_string(std::rand()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("deacl config carries the published defaults") {
  DeACLConfig c;
  CHECK(c.gamma == 2.0);
  CHECK(c.adv_epsilon == 4.0 / 255.0);
  CHECK(c.learning_rate == 0.05);
  CHECK(c.warmup_epochs == 10);
  CHECK(c.epochs == 100);
  CHECK(c.sgd_momentum == 0.9);
  CHECK(c.batch_size == 128);
  CHECK(c.weight_decay == 0.0);
  CHECK(c.attack_steps == 5);
  CHECK(c.augmentations == std::vector<std::string>{"random_crop", "hflip", "vflip"});
  CHECK_FALSE(c.adversary_on_student);
  CHECK_NOTHROW(c.validate());

  c.gamma = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.adv_epsilon = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.warmup_epochs = 100;  // must stay below epochs
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.sgd_momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.eval_every = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.weight_decay = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("distillation loss hits its closed-form corners") {
  // identical student/teacher/adversarial rows: both cosines are 1
  Tensor rows({2, 3});
  rows.at(0, 0) = 1.0;
  rows.at(0, 1) = 2.0;
  rows.at(0, 2) = -1.0;
  rows.at(1, 0) = 0.5;
  rows.at(1, 1) = -0.25;
  rows.at(1, 2) = 3.0;
  ag::Var same = ag::constant(rows);
  Real l_same = ag::scalar_value(deacl_loss_from_embeddings(same, same, same, 2.0));
  CHECK(l_same == doctest::Approx(-3.0).epsilon(1e-6));

  // orthogonal clean embeddings, adversarial equal to clean: -0 - gamma*1
  Tensor ex({1, 2}), ey({1, 2});
  ex.at(0, 0) = 1.0;
  ex.at(0, 1) = 0.0;
  ey.at(0, 0) = 0.0;
  ey.at(0, 1) = 1.0;
  ag::Var student = ag::constant(ex), teacher = ag::constant(ey);
  Real l_orth = ag::scalar_value(deacl_loss_from_embeddings(student, teacher, student, 2.0));
  CHECK(l_orth == doctest::Approx(-2.0).epsilon(1e-6));

  // zero-norm embeddings degrade to similarity zero, not a division blowup
  ag::Var zero = ag::constant(Tensor::zeros({1, 2}));
  Real l_zero = ag::scalar_value(deacl_loss_from_embeddings(zero, teacher, zero, 2.0));
  CHECK(std::isfinite(l_zero));
  CHECK(l_zero == doctest::Approx(0.0).epsilon(1e-9));

  CHECK_THROWS_AS(deacl_loss_from_embeddings(student, teacher, student, 0.0),
                  InvalidInputError);
}

TEST_CASE("encoder-level loss agrees with the corners and blocks shape mismatch") {
  Encoder enc(tiny_cfg(), 3);
  Rng rng(4);
  ImageBatch x(rng.uniform_tensor({2, 3, 8, 8}, 0.2, 0.8));
  // robust == teacher and x_adv == x: every cosine is 1, loss = -(1+gamma)
  Real l = ag::scalar_value(deacl_loss(enc, enc, x, x, 2.0));
  CHECK(l == doctest::Approx(-3.0).epsilon(1e-6));

  ImageBatch wrong(rng.uniform_tensor({2, 3, 4, 4}, 0.2, 0.8));
  CHECK_THROWS_AS(deacl_loss(enc, enc, x, wrong, 2.0), InvalidInputError);
}

TEST_CASE("loss gradient w.r.t. robust-encoder parameters matches finite differences") {
  Encoder robust(tiny_cfg(), 5);
  Encoder teacher(tiny_cfg(), 6);
  Rng rng(7);
  ImageBatch x(rng.uniform_tensor({2, 3, 8, 8}, 0.2, 0.8));
  Tensor delta = rng.uniform_tensor(x.data.shape(), -0.01, 0.01);
  ImageBatch x_adv(x.data);
  for (int64_t i = 0; i < delta.numel(); ++i) x_adv.data[i] += delta[i];

  ag::Var loss = deacl_loss(robust, teacher, x, x_adv, 2.0);
  ag::backward(loss);

  auto loss_value = [&]() {
    ag::NoGradGuard ng;
    return ag::scalar_value(deacl_loss(robust, teacher, x, x_adv, 2.0));
  };

  const Real h = 1e-5;
  for (const char* name : {"patch_embed.weight", "block0.attn.qkv.weight", "final_ln.gamma"}) {
    ag::Var p = robust.find(name);
    REQUIRE(p->grad.numel() == p->value.numel());
    for (int k = 0; k < 4; ++k) {
      const int64_t j = rng.index(p->value.numel());
      const Real keep = p->value[j];
      p->value[j] = keep + h;
      const Real up = loss_value();
      p->value[j] = keep - h;
      const Real down = loss_value();
      p->value[j] = keep;
      const Real fd = (up - down) / (2.0 * h);
      const Real scale = std::max({std::abs(fd), std::abs(p->grad[j]), Real(1e-6)});
      CHECK(std::abs(fd - p->grad[j]) / scale < 1e-2);
    }
  }
}

TEST_CASE("adversarial example generation respects the ball and freezes the teacher") {
  Encoder teacher(tiny_cfg(), 8);
  teacher.set_frozen(true);
  Rng rng(9);
  ImageBatch x(rng.uniform_tensor({2, 3, 8, 8}, 0.3, 0.7));
  Tensor before = snapshot(teacher.params());

  ImageBatch adv = deacl_adversarial_examples(teacher, x, 4.0 / 255.0, 5, 11);
  for (int64_t i = 0; i < x.data.numel(); ++i) {
    CHECK(std::abs(adv.data[i] - x.data[i]) <= 4.0 / 255.0 + 1e-9);
    CHECK(adv.data[i] >= 0.0);
    CHECK(adv.data[i] <= 1.0);
  }
  CHECK(max_abs_diff(snapshot(teacher.params()), before) == 0.0);
  CHECK_FALSE(teacher.params()[0].var->requires_grad);  // frozen flag survives

  ImageBatch still = deacl_adversarial_examples(teacher, x, 4.0 / 255.0, 0, 11);
  CHECK(max_abs_diff(still.data, x.data) == 0.0);
}

TEST_CASE("learning-rate schedule ramps linearly then decays by cosine") {
  DeACLConfig c;  // lr 0.05, warmup 10, epochs 100
  CHECK(deacl_lr_at(0, c) == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(deacl_lr_at(4, c) == doctest::Approx(0.025).epsilon(1e-12));
  CHECK(deacl_lr_at(9, c) == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(deacl_lr_at(10, c) == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(deacl_lr_at(55, c) == doctest::Approx(0.025).epsilon(1e-12));  // cosine midpoint
  CHECK(deacl_lr_at(100, c) == doctest::Approx(0.0).epsilon(1e-15));

  Real prev = 0.0;
  for (int64_t e = 0; e < c.warmup_epochs; ++e) {
    Real lr = deacl_lr_at(e, c);
    CHECK(lr >= prev);
    prev = lr;
  }
  for (int64_t e = c.warmup_epochs; e <= c.epochs; ++e) {
    Real lr = deacl_lr_at(e, c);
    CHECK(lr <= prev + 1e-15);
    prev = lr;
  }

  CHECK_THROWS_AS(deacl_lr_at(-1, c), InvalidInputError);
  CHECK_THROWS_AS(deacl_lr_at(101, c), InvalidInputError);
}

TEST_CASE("fine-tuning snapshots epoch zero from the pretrained encoder") {
  Encoder pre(tiny_cfg(), 12);
  Dataset ds = tiny_dataset();
  DeACLConfig cfg = tiny_deacl();

  Rng rng(13);
  ImageBatch probe(rng.uniform_tensor({2, 3, 8, 8}, 0.2, 0.8));
  Tensor pre_embed = encode(pre, probe, EncodeMode::Cls);

  std::vector<Real> epoch0_fingerprint;
  EvolutionEvaluator eval = [&](const Encoder& e, int64_t epoch) {
    // fingerprint the encoder by its embedding of a fixed probe batch
    Tensor emb = encode(e, probe, EncodeMode::Cls);
    if (epoch == 0) epoch0_fingerprint.push_back(max_abs_diff(emb, pre_embed));
    std::vector<EvolutionPoint> out;
    for (Task t : {Task::Classification, Task::Segmentation, Task::Depth}) {
      EvolutionPoint p;
      p.task = t;
      p.dataset = "toy";
      p.metric_clean = emb[0];
      out.push_back(p);
    }
    return out;
  };

  auto [robust, trace] = deacl_finetune(pre, ds, cfg, eval);
  REQUIRE(epoch0_fingerprint.size() == 1);
  CHECK(epoch0_fingerprint[0] == 0.0);  // epoch-0 snapshot IS the pretrained encoder

  // eval_every=1 over 2 epochs: cadence points 0, 1, 2 with three tasks each
  REQUIRE(trace.size() == 9);
  for (size_t i = 0; i < 3; ++i) CHECK(trace[i].epoch == 0);
  for (size_t i = 3; i < 6; ++i) CHECK(trace[i].epoch == 1);
  for (size_t i = 6; i < 9; ++i) CHECK(trace[i].epoch == 2);
  CHECK_NOTHROW(validate_trace(trace));

  // fine-tuning moved the robust encoder; the input encoder is untouched
  CHECK(max_abs_diff(snapshot(robust.params()), snapshot(pre.params())) > 0.0);
  CHECK(max_abs_diff(encode(pre, probe, EncodeMode::Cls), pre_embed) == 0.0);

  Dataset empty;
  CHECK_THROWS_AS(deacl_finetune(pre, empty, cfg), InvalidInputError);
}

TEST_CASE("fine-tuning is deterministic in the seed and writes cadence artifacts") {
  Encoder pre(tiny_cfg(), 14);
  Dataset ds = tiny_dataset(8);
  DeACLConfig cfg = tiny_deacl();
  cfg.eval_every = 2;

  TempDir tmp;
  EvolutionEvaluator eval = [&](const Encoder&, int64_t) {
    EvolutionPoint p;
    p.dataset = "toy";
    return std::vector<EvolutionPoint>{p};
  };
  auto [r1, t1] = deacl_finetune(pre, ds, cfg, eval, tmp.str());
  auto [r2, t2] = deacl_finetune(pre, ds, cfg);
  CHECK(max_abs_diff(snapshot(r1.params()), snapshot(r2.params())) == 0.0);

  // cadence: epochs {0 (snapshot only), 2}; checkpoint only at epoch 2
  REQUIRE(t1.size() == 2);
  CHECK(t1[0].epoch == 0);
  CHECK(t1[1].epoch == 2);
  CHECK(std::filesystem::exists(tmp.path / "deacl_epoch_2.ckpt"));
  CHECK_FALSE(std::filesystem::exists(tmp.path / "deacl_epoch_1.ckpt"));

  Encoder reloaded = checkpoint_load((tmp.path / "deacl_epoch_2.ckpt").string());
  CHECK(max_abs_diff(snapshot(reloaded.params()), snapshot(r1.params())) == 0.0);

  EvolutionTrace on_disk = read_trace_jsonl((tmp.path / "evolution.jsonl").string());
  REQUIRE(on_disk.size() == t1.size());
  for (size_t i = 0; i < on_disk.size(); ++i) {
    CHECK(on_disk[i].epoch == t1[i].epoch);
    CHECK(on_disk[i].dataset == t1[i].dataset);
    CHECK(on_disk[i].metric_clean == t1[i].metric_clean);
  }
}

TEST_CASE("trace validation and jsonl persistence") {
  EvolutionTrace trace;
  EvolutionPoint a;
  a.epoch = 0;
  a.dataset = "toy";
  a.task = Task::Classification;
  EvolutionPoint b = a;
  b.epoch = 5;
  EvolutionPoint c = a;  // same epoch, different task: allowed
  c.task = Task::Depth;
  trace = {a, b, c};
  CHECK_NOTHROW(validate_trace(trace));

  EvolutionPoint dup = a;  // same series, repeated epoch: rejected
  trace.push_back(dup);
  CHECK_THROWS_AS(validate_trace(trace), InvalidInputError);

  TempDir tmp;
  const std::string path = (tmp.path / "trace.jsonl").string();
  append_trace_jsonl(path, {a, b});
  append_trace_jsonl(path, {c});  // append-only: earlier lines survive
  EvolutionTrace read = read_trace_jsonl(path);
  REQUIRE(read.size() == 3);
  CHECK(read[0].epoch == 0);
  CHECK(read[1].epoch == 5);
  CHECK(read[2].task == Task::Depth);

  CHECK_THROWS_AS(read_trace_jsonl((tmp.path / "missing.jsonl").string()), NotFoundError);
  std::ofstream bad((tmp.path / "bad.jsonl").string());
  bad << "{not json\n";
  bad.close();
  CHECK_THROWS_AS(read_trace_jsonl((tmp.path / "bad.jsonl").string()), IoError);
}
