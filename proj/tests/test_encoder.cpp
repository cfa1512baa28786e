#include "doctest.h"
#include "grad_check.hpp"
#include "srb/encoder.hpp"

using namespace srb;
using namespace srb::testutil;
namespace ag = srb::ag;

namespace {
EncoderConfig tiny_cfg() {
  EncoderConfig c;
  c.patch_size = 4;
  c.dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2.0;
  return c;
}

ImageBatch random_batch(uint64_t seed, int64_t b, int64_t h, int64_t w) {
  Rng r(seed);
  return ImageBatch(r.uniform_tensor({b, kImageChannels, h, w}, 0.1, 0.9));
}
}  // namespace

TEST_CASE("encoder config validation") {
  EncoderConfig c = tiny_cfg();
  CHECK_NOTHROW(c.validate());
  c.heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_cfg();
  c.patch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_cfg();
  c.mlp_ratio = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_cfg();
  c.depth = 0;
  CHECK_THROWS_AS(Encoder{c}, ConfigError);
}

TEST_CASE("image batch validation") {
  CHECK_THROWS_AS(ImageBatch(Tensor::ones({2, 3, 4})), InvalidInputError);
  CHECK_THROWS_AS(ImageBatch(Tensor::ones({1, 1, 8, 8})), InvalidInputError);
  Tensor bad = Tensor::ones({1, 3, 8, 8});
  bad[5] = 1.5;
  CHECK_THROWS_AS(ImageBatch{bad}, InvalidInputError);
  bad[5] = -0.1;
  CHECK_THROWS_AS(ImageBatch{bad}, InvalidInputError);
  CHECK_NOTHROW(ImageBatch(Tensor::ones({1, 3, 8, 8})));

  ImageBatch ok = random_batch(1, 2, 8, 12);
  CHECK(ok.batch() == 2);
  CHECK(ok.height() == 8);
  CHECK(ok.width() == 12);
  CHECK_NOTHROW(ok.check_patch_size(4));
  CHECK_THROWS_AS(ok.check_patch_size(5), InvalidInputError);
}

TEST_CASE("encode produces the contracted shapes") {
  Encoder enc(tiny_cfg(), 7);
  // patch_size=4 on 32x32 -> 8x8 = 64 patch embeddings
  ImageBatch b32 = random_batch(2, 2, 32, 32);
  Tensor patches = encode(enc, b32, EncodeMode::Patch);
  CHECK(patches.shape() == Shape{2, 64, 16});

  ImageBatch b8 = random_batch(3, 8, 8, 8);
  Tensor cls = encode(enc, b8, EncodeMode::Cls);
  CHECK(cls.shape() == Shape{8, 16});

  // non-square and non-base grids go through position resizing
  ImageBatch b_rect = random_batch(4, 1, 8, 16);
  CHECK(encode(enc, b_rect, EncodeMode::Patch).shape() == Shape{1, 8, 16});

  CHECK(parse_encode_mode("cls") == EncodeMode::Cls);
  CHECK(parse_encode_mode("patch") == EncodeMode::Patch);
  CHECK_THROWS_AS(parse_encode_mode("both"), InvalidInputError);
}

TEST_CASE("encode is deterministic and row-independent") {
  Encoder enc(tiny_cfg(), 11);
  ImageBatch b = random_batch(5, 3, 16, 16);
  EmbeddingSet e1 = enc.forward(b);
  EmbeddingSet e2 = enc.forward(b);
  CHECK(e1.cls == e2.cls);
  CHECK(e1.patches == e2.patches);

  // duplicate one image inside a batch: embedding rows must match bitwise
  Tensor dup({2, 3, 16, 16});
  for (int64_t i = 0; i < 3 * 16 * 16; ++i) {
    dup[i] = b.data[i];
    dup[3 * 16 * 16 + i] = b.data[i];
  }
  EmbeddingSet ed = Encoder(tiny_cfg(), 11).forward(ImageBatch(dup));
  for (int64_t j = 0; j < 16; ++j) CHECK(ed.cls.at(0, j) == ed.cls.at(1, j));
  for (int64_t n = 0; n < ed.patches.dim(1); ++n)
    for (int64_t j = 0; j < 16; ++j) CHECK(ed.patches.at(0, n, j) == ed.patches.at(1, n, j));
}

TEST_CASE("different seeds give different parameters, same seed identical outputs") {
  ImageBatch b = random_batch(6, 1, 8, 8);
  Encoder a(tiny_cfg(), 1), a2(tiny_cfg(), 1), c(tiny_cfg(), 2);
  CHECK(a.forward(b).cls == a2.forward(b).cls);
  CHECK(max_abs_diff(a.forward(b).cls, c.forward(b).cls) > 0.0);
}

TEST_CASE("input gradient matches finite differences across seeds") {
  for (uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    Encoder enc(tiny_cfg(), seed);
    ImageBatch b = random_batch(100 + seed, 1, 8, 8);

    EmbeddingObjective obj = [](const ag::Var& cls, const ag::Var&) { return ag::sum_all(cls); };
    Tensor g = input_gradient(enc, b, obj);
    CHECK(g.shape() == b.data.shape());
    Tensor fd = fd_gradient(
        [&](const Tensor& t) {
          return encode(enc, ImageBatch(t), EncodeMode::Cls).sum();
        },
        b.data, 1e-3);
    CHECK(rel_err(g, fd) < 1e-2);
  }
}

TEST_CASE("input gradient through patch embeddings matches finite differences") {
  Encoder enc(tiny_cfg(), 9);
  ImageBatch b = random_batch(200, 1, 8, 8);
  EmbeddingObjective obj = [](const ag::Var&, const ag::Var& patches) {
    return ag::sum_all(ag::mul(patches, patches));
  };
  Tensor g = input_gradient(enc, b, obj);
  Tensor fd = fd_gradient(
      [&](const Tensor& t) {
        Tensor p = encode(enc, ImageBatch(t), EncodeMode::Patch);
        Real s = 0;
        for (int64_t i = 0; i < p.numel(); ++i) s += p[i] * p[i];
        return s;
      },
      b.data, 1e-3);
  CHECK(rel_err(g, fd) < 1e-2);
}

TEST_CASE("constant objective yields a zero gradient") {
  Encoder enc(tiny_cfg(), 3);
  ImageBatch b = random_batch(7, 2, 8, 8);
  EmbeddingObjective obj = [](const ag::Var&, const ag::Var&) {
    return ag::constant(Tensor::scalar(5.0));
  };
  Tensor g = input_gradient(enc, b, obj);
  CHECK(g.shape() == b.data.shape());
  CHECK(g.min() == 0.0);
  CHECK(g.max() == 0.0);
}

TEST_CASE("non-scalar objective is a contract violation") {
  Encoder enc(tiny_cfg(), 3);
  ImageBatch b = random_batch(8, 1, 8, 8);
  EmbeddingObjective obj = [](const ag::Var& cls, const ag::Var&) { return cls; };
  CHECK_THROWS_AS(input_gradient(enc, b, obj), ContractError);
}

TEST_CASE("input gradient leaves parameter gradients untouched") {
  Encoder enc(tiny_cfg(), 4);
  ImageBatch b = random_batch(9, 1, 8, 8);
  EmbeddingObjective obj = [](const ag::Var& cls, const ag::Var&) { return ag::sum_all(cls); };
  input_gradient(enc, b, obj);
  for (const auto& p : enc.params()) {
    CHECK(p.var->requires_grad);           // restored by the guard
    CHECK(p.var->grad.numel() == 0);       // never accumulated
  }
}

TEST_CASE("frozen flag toggles parameter trainability") {
  Encoder enc(tiny_cfg(), 5);
  CHECK_FALSE(enc.frozen());
  enc.set_frozen(true);
  CHECK(enc.frozen());
  for (const auto& p : enc.params()) CHECK_FALSE(p.var->requires_grad);
  // attacks still get input gradients through a frozen encoder
  ImageBatch b = random_batch(10, 1, 8, 8);
  EmbeddingObjective obj = [](const ag::Var& cls, const ag::Var&) { return ag::sum_all(cls); };
  Tensor g = input_gradient(enc, b, obj);
  CHECK(g.max() != 0.0);
  enc.set_frozen(false);
  for (const auto& p : enc.params()) CHECK(p.var->requires_grad);
}

TEST_CASE("clone is deep") {
  Encoder enc(tiny_cfg(), 6);
  Encoder copy = enc.clone();
  ImageBatch b = random_batch(11, 1, 8, 8);
  CHECK(enc.forward(b).cls == copy.forward(b).cls);
  copy.params()[0].var->value.fill(0.0);
  CHECK(max_abs_diff(enc.forward(b).cls, copy.forward(b).cls) > 0.0);
}

TEST_CASE("unknown parameter name raises not-found") {
  Encoder enc(tiny_cfg(), 1);
  CHECK_THROWS_AS(enc.find("no_such_param"), NotFoundError);
}
