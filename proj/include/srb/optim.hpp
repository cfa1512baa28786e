#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "srb/autograd.hpp"

namespace srb {

struct NamedVar {
  std::string name;
  ag::Var var;
};
using ParamList = std::vector<NamedVar>;

inline std::vector<ag::Var> vars_of(const ParamList& params) {
  std::vector<ag::Var> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.var);
  return out;
}

// Temporarily clears requires_grad on a set of parameters so that backward
// passes built in scope produce input gradients only.
class FrozenGuard {
 public:
  explicit FrozenGuard(const std::vector<ag::Var>& params) : params_(params) {
    prev_.reserve(params_.size());
    for (auto& p : params_) {
      prev_.push_back(p->requires_grad);
      p->requires_grad = false;
    }
  }
  ~FrozenGuard() {
    for (size_t i = 0; i < params_.size(); ++i) params_[i]->requires_grad = prev_[i];
  }
  FrozenGuard(const FrozenGuard&) = delete;
  FrozenGuard& operator=(const FrozenGuard&) = delete;

 private:
  std::vector<ag::Var> params_;
  std::vector<bool> prev_;
};

namespace detail {
inline const Tensor& grad_or_zero(const ag::Var& p, Tensor& scratch) {
  if (p->grad.numel() != 0) return p->grad;
  scratch = Tensor::zeros(p->value.shape());
  return scratch;
}
}  // namespace detail

class SgdMomentum {
 public:
  SgdMomentum(std::vector<ag::Var> params, Real lr, Real momentum = 0.0, Real weight_decay = 0.0)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), wd_(weight_decay) {
    require(lr > 0.0, "learning rate must be positive");
    require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0,1)");
    require(weight_decay >= 0.0, "weight decay must be nonnegative");
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.push_back(Tensor::zeros(p->value.shape()));
  }

  void set_lr(Real lr) {
    require(lr >= 0.0, "learning rate must be nonnegative");
    lr_ = lr;
  }
  Real lr() const { return lr_; }

  void zero_grad() { ag::zero_grads(params_); }

  // v <- momentum*v + (g + wd*p);  p <- p - lr*v
  void step() {
    Tensor scratch;
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const Tensor& g = detail::grad_or_zero(p, scratch);
      for (int64_t j = 0; j < p->value.numel(); ++j) {
        velocity_[i][j] = momentum_ * velocity_[i][j] + g[j] + wd_ * p->value[j];
        p->value[j] -= lr_ * velocity_[i][j];
      }
    }
  }

 private:
  std::vector<ag::Var> params_;
  Real lr_, momentum_, wd_;
  std::vector<Tensor> velocity_;
};

// Adam with decoupled weight decay; weight_decay = 0 gives plain Adam.
class Adam {
 public:
  Adam(std::vector<ag::Var> params, Real lr, Real weight_decay = 0.0, Real beta1 = 0.9,
       Real beta2 = 0.999, Real eps = 1e-8)
      : params_(std::move(params)),
        lr_(lr),
        wd_(weight_decay),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {
    require(lr > 0.0, "learning rate must be positive");
    require(weight_decay >= 0.0, "weight decay must be nonnegative");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must be in [0,1)");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.push_back(Tensor::zeros(p->value.shape()));
      v_.push_back(Tensor::zeros(p->value.shape()));
    }
  }

  void set_lr(Real lr) {
    require(lr >= 0.0, "learning rate must be nonnegative");
    lr_ = lr;
  }
  Real lr() const { return lr_; }

  void zero_grad() { ag::zero_grads(params_); }

  void step() {
    ++t_;
    const Real bc1 = 1.0 - std::pow(beta1_, static_cast<Real>(t_));
    const Real bc2 = 1.0 - std::pow(beta2_, static_cast<Real>(t_));
    Tensor scratch;
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const Tensor& g = detail::grad_or_zero(p, scratch);
      for (int64_t j = 0; j < p->value.numel(); ++j) {
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
        Real mhat = m_[i][j] / bc1;
        Real vhat = v_[i][j] / bc2;
        p->value[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p->value[j]);
      }
    }
  }

 private:
  std::vector<ag::Var> params_;
  Real lr_, wd_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Linear warmup over `warmup` epochs up to `base`, then cosine decay reaching
// exactly 0 at epoch `total`. Valid for epoch in [0, total].
inline Real cosine_warmup_lr(Real base, int64_t epoch, int64_t total, int64_t warmup) {
  require(base >= 0.0, "base learning rate must be nonnegative");
  require(total > 0, "total epochs must be positive");
  require(epoch >= 0 && epoch <= total, "epoch out of range");
  require(warmup >= 0 && warmup <= total, "warmup out of range");
  if (epoch < warmup) return base * static_cast<Real>(epoch + 1) / static_cast<Real>(warmup);
  if (epoch >= total) return 0.0;
  Real t = static_cast<Real>(epoch - warmup) / static_cast<Real>(total - warmup);
  return base * 0.5 * (1.0 + std::cos(M_PI * t));
}

}  // namespace srb
