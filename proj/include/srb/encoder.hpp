#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "srb/autograd.hpp"
#include "srb/optim.hpp"
#include "srb/tensor.hpp"

namespace srb {

// All images are RGB; channel count is part of the format, not the config.
inline constexpr int64_t kImageChannels = 3;
// Learned position embeddings live on a fixed base grid and are bilinearly
// resized to the actual patch grid, so one checkpoint serves any input size.
inline constexpr int64_t kPosGrid = 8;

// Batch of images, values in [0,1], laid out [B,C,H,W].
struct ImageBatch {
  Tensor data;

  ImageBatch() : data(Shape{0, kImageChannels, 0, 0}) {}
  explicit ImageBatch(Tensor t) : data(std::move(t)) {
    if (data.rank() != 4) throw InvalidInputError("image batch must be [B,C,H,W]");
    if (data.dim(1) != kImageChannels)
      throw InvalidInputError("image batch must have " + std::to_string(kImageChannels) +
                              " channels");
    for (int64_t i = 0; i < data.numel(); ++i)
      if (!(data[i] >= 0.0 && data[i] <= 1.0))
        throw InvalidInputError("image batch has pixel values outside [0,1]");
  }

  int64_t batch() const { return data.dim(0); }
  int64_t height() const { return data.dim(2); }
  int64_t width() const { return data.dim(3); }

  void check_patch_size(int64_t p) const {
    if (height() % p != 0 || width() % p != 0)
      throw InvalidInputError("image size " + std::to_string(height()) + "x" +
                              std::to_string(width()) + " not divisible by patch size " +
                              std::to_string(p));
  }
};

// CLS embedding plus per-patch embeddings for one batch.
struct EmbeddingSet {
  Tensor cls;      // [B, dim]
  Tensor patches;  // [B, N, dim]

  void check() const {
    if (!cls.all_finite() || !patches.all_finite())
      throw ContractError("embedding set contains non-finite values");
  }
};

enum class EncodeMode { Cls, Patch };

inline EncodeMode parse_encode_mode(const std::string& s) {
  if (s == "cls") return EncodeMode::Cls;
  if (s == "patch") return EncodeMode::Patch;
  throw InvalidInputError("encode mode must be 'cls' or 'patch', got '" + s + "'");
}

struct EncoderConfig {
  int64_t patch_size = 4;
  int64_t dim = 64;
  int64_t depth = 3;
  int64_t heads = 4;
  Real mlp_ratio = 2.0;

  void validate() const {
    if (patch_size <= 0) throw ConfigError("encoder.patch_size", "must be positive");
    if (dim <= 0) throw ConfigError("encoder.dim", "must be positive");
    if (depth <= 0) throw ConfigError("encoder.depth", "must be positive");
    if (heads <= 0) throw ConfigError("encoder.heads", "must be positive");
    if (mlp_ratio <= 0.0) throw ConfigError("encoder.mlp_ratio", "must be positive");
    if (dim % heads != 0) throw ConfigError("encoder.dim", "must be divisible by encoder.heads");
  }

  int64_t mlp_hidden() const { return static_cast<int64_t>(dim * mlp_ratio); }

  bool operator==(const EncoderConfig& o) const {
    return patch_size == o.patch_size && dim == o.dim && depth == o.depth && heads == o.heads &&
           mlp_ratio == o.mlp_ratio;
  }
};

// Small pre-LN vision transformer: patchify -> linear embed -> +pos -> CLS ->
// blocks(MHSA, MLP) -> final LN. Deterministic in evaluation and training;
// there are no stochastic layers.
class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg, uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(splitmix64(seed ^ 0x656e636f646572ULL));
    auto mk = [&](const std::string& name, Shape shape, Real stddev) {
      Tensor t = stddev > 0.0 ? rng.normal_tensor(std::move(shape), 0.0, stddev)
                              : Tensor::zeros(std::move(shape));
      params_.push_back({name, ag::leaf(std::move(t), true)});
      return params_.back().var;
    };
    auto mk_ones = [&](const std::string& name, Shape shape) {
      params_.push_back({name, ag::leaf(Tensor::ones(std::move(shape)), true)});
      return params_.back().var;
    };

    const int64_t F = cfg_.patch_size * cfg_.patch_size * kImageChannels;
    const int64_t D = cfg_.dim, Dh = cfg_.mlp_hidden();
    const Real s = 0.02;
    mk("patch_embed.weight", {F, D}, s);
    mk("patch_embed.bias", {D}, 0.0);
    mk("cls_token", {D}, s);
    mk("cls_pos", {D}, s);
    mk("pos_grid", {D, kPosGrid, kPosGrid}, s);
    for (int64_t b = 0; b < cfg_.depth; ++b) {
      std::string pre = "block" + std::to_string(b) + ".";
      mk_ones(pre + "ln1.gamma", {D});
      mk(pre + "ln1.beta", {D}, 0.0);
      mk(pre + "attn.qkv.weight", {D, 3 * D}, s);
      mk(pre + "attn.qkv.bias", {3 * D}, 0.0);
      mk(pre + "attn.proj.weight", {D, D}, s);
      mk(pre + "attn.proj.bias", {D}, 0.0);
      mk_ones(pre + "ln2.gamma", {D});
      mk(pre + "ln2.beta", {D}, 0.0);
      mk(pre + "mlp.fc1.weight", {D, Dh}, s);
      mk(pre + "mlp.fc1.bias", {Dh}, 0.0);
      mk(pre + "mlp.fc2.weight", {Dh, D}, s);
      mk(pre + "mlp.fc2.bias", {D}, 0.0);
    }
    mk_ones("final_ln.gamma", {D});
    mk("final_ln.beta", {D}, 0.0);
  }

  const EncoderConfig& config() const { return cfg_; }
  const ParamList& params() const { return params_; }
  ParamList& params() { return params_; }

  bool frozen() const { return frozen_; }
  void set_frozen(bool f) {
    frozen_ = f;
    for (auto& p : params_) p.var->requires_grad = !f;
  }

  std::vector<ag::Var> param_vars() const { return vars_of(params_); }

  Encoder clone() const {
    Encoder out(cfg_);
    for (size_t i = 0; i < params_.size(); ++i) out.params_[i].var->value = params_[i].var->value;
    out.set_frozen(frozen_);
    return out;
  }

  ag::Var find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.var;
    throw NotFoundError("encoder has no parameter named '" + name + "'");
  }

  // Full forward on the tape; gradients flow into x and any live parameters.
  // Returns {cls [B,D], patches [B,N,D]}.
  std::pair<ag::Var, ag::Var> forward_vars(const ag::Var& x) const {
    const auto& s = x->value.shape();
    if (s.size() != 4 || s[1] != kImageChannels)
      throw InvalidInputError("encoder input must be [B," + std::to_string(kImageChannels) +
                              ",H,W]");
    const int64_t p = cfg_.patch_size, D = cfg_.dim;
    if (s[2] % p != 0 || s[3] % p != 0)
      throw InvalidInputError("input size not divisible by patch size");
    const int64_t gh = s[2] / p, gw = s[3] / p, N = gh * gw;

    auto tok = ag::linear(ag::patchify(x, p), find("patch_embed.weight"), find("patch_embed.bias"));
    tok = ag::add_bcast_rows(tok, pos_for(gh, gw));
    auto cls0 = ag::add(find("cls_token"), find("cls_pos"));
    auto h = ag::prepend_row(cls0, tok);  // [B, N+1, D]

    const int64_t H = cfg_.heads, dh = D / H;
    const Real attn_scale = 1.0 / std::sqrt(static_cast<Real>(dh));
    for (int64_t b = 0; b < cfg_.depth; ++b) {
      std::string pre = "block" + std::to_string(b) + ".";
      auto a = ag::layernorm_last(h, find(pre + "ln1.gamma"), find(pre + "ln1.beta"));
      auto qkv = ag::linear(a, find(pre + "attn.qkv.weight"), find(pre + "attn.qkv.bias"));
      auto q = ag::split_heads(ag::slice(qkv, 2, 0, D), H);
      auto k = ag::split_heads(ag::slice(qkv, 2, D, D), H);
      auto v = ag::split_heads(ag::slice(qkv, 2, 2 * D, D), H);
      auto scores = ag::scale(ag::bmm(q, ag::transpose_last2(k)), attn_scale);
      auto attn = ag::merge_heads(ag::bmm(ag::softmax_last(scores), v), H);
      attn = ag::linear(attn, find(pre + "attn.proj.weight"), find(pre + "attn.proj.bias"));
      h = ag::add(h, attn);

      auto m = ag::layernorm_last(h, find(pre + "ln2.gamma"), find(pre + "ln2.beta"));
      m = ag::linear(m, find(pre + "mlp.fc1.weight"), find(pre + "mlp.fc1.bias"));
      m = ag::linear(ag::gelu(m), find(pre + "mlp.fc2.weight"), find(pre + "mlp.fc2.bias"));
      h = ag::add(h, m);
    }
    h = ag::layernorm_last(h, find("final_ln.gamma"), find("final_ln.beta"));

    auto cls = ag::reshape(ag::slice(h, 1, 0, 1), {s[0], D});
    auto patches = ag::slice(h, 1, 1, N);
    return {cls, patches};
  }

  EmbeddingSet forward(const ImageBatch& batch) const {
    batch.check_patch_size(cfg_.patch_size);
    ag::NoGradGuard ng;
    auto [cls, patches] = forward_vars(ag::constant(batch.data));
    EmbeddingSet out{cls->value, patches->value};
    out.check();
    return out;
  }

 private:
  // position embeddings for a gh x gw grid, as [gh*gw, D]
  ag::Var pos_for(int64_t gh, int64_t gw) const {
    auto pos = find("pos_grid");  // [D, kPosGrid, kPosGrid]
    if (gh != kPosGrid || gw != kPosGrid) pos = ag::bilinear_resize(pos, gh, gw);
    return ag::transpose_last2(ag::reshape(pos, {cfg_.dim, gh * gw}));
  }

  EncoderConfig cfg_;
  ParamList params_;
  bool frozen_ = false;
};

// scalar objective over (cls, patches)
using EmbeddingObjective = std::function<ag::Var(const ag::Var& cls, const ag::Var& patches)>;

inline Tensor encode(const Encoder& encoder, const ImageBatch& batch, EncodeMode mode) {
  EmbeddingSet e = encoder.forward(batch);
  return mode == EncodeMode::Cls ? e.cls : e.patches;
}

// d objective / d input, holding all encoder parameters fixed. An objective
// with no dependence on the input yields an all-zero gradient.
inline Tensor input_gradient(const Encoder& encoder, const ImageBatch& batch,
                             const EmbeddingObjective& objective) {
  batch.check_patch_size(encoder.config().patch_size);
  FrozenGuard fg(encoder.param_vars());
  auto x = ag::leaf(batch.data, true);
  auto [cls, patches] = encoder.forward_vars(x);
  auto loss = objective(cls, patches);
  if (loss->value.numel() != 1) throw ContractError("input_gradient: objective is not scalar");
  if (loss->requires_grad) ag::backward(loss);
  if (x->grad.numel() == 0) return Tensor::zeros(batch.data.shape());
  return x->grad;
}

}  // namespace srb
