#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "srb/tensor.hpp"

// Reverse-mode automatic differentiation on Tensor. Ops build a DAG of Nodes;
// backward() walks it in reverse topological order. Gradients accumulate, so
// a value used twice gets both contributions.
namespace srb::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily; same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.numel() == 0) grad = Tensor::zeros(value.shape());
  }
  void zero_grad() {
    if (grad.numel() != 0) grad.fill(0.0);
  }
};

inline thread_local bool g_grad_enabled = true;

// Disables graph construction in scope; forward values are unaffected.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline Var leaf(Tensor v, bool requires_grad = false) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad && g_grad_enabled;
  return n;
}

inline Var constant(Tensor v) { return leaf(std::move(v), false); }

inline Var detach(const Var& a) { return constant(a->value); }

inline Real scalar_value(const Var& a) {
  if (a->value.numel() != 1) throw ContractError("scalar_value: variable is not scalar");
  return a->value[0];
}

inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool rg = false;
  if (g_grad_enabled)
    for (const auto& p : parents)
      if (p->requires_grad) rg = true;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

// Seeds root's gradient with 1 and propagates. Root must be scalar.
inline void backward(const Var& root) {
  if (root->value.numel() != 1) throw ContractError("backward: root objective is not scalar");
  if (!root->requires_grad) throw ContractError("backward: graph records no gradients");

  // iterative post-order DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad.fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

inline void zero_grads(const std::vector<Var>& vars) {
  for (const auto& v : vars) v->zero_grad();
}

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

namespace detail {
inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw InvalidInputError(std::string(op) + ": shape mismatch " + shape_str(a->value.shape()) +
                            " vs " + shape_str(b->value.shape()));
}

using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;
}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->value[i];
    }
  });
}

inline Var divide(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "divide");
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] / b->value[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        Real bv = b->value[i];
        b->grad[i] -= n.grad[i] * a->value[i] / (bv * bv);
      }
    }
  });
}

inline Var neg(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = -out[i];
  return make_op(std::move(out), {a}, [a](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] -= n.grad[i];
  });
}

inline Var scale(const Var& a, Real c) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return make_op(std::move(out), {a}, [a, c](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += c * n.grad[i];
  });
}

inline Var add_scalar(const Var& a, Real c) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
  return make_op(std::move(out), {a}, [a](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// elementwise math
// ---------------------------------------------------------------------------

inline Var vlog(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  return make_op(std::move(out), {a}, [a](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] / a->value[i];
  });
}

inline Var vexp(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  return make_op(std::move(out), {a}, [a](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * n.value[i];
  });
}

// forward is exact sqrt; backward guards the singularity at 0
inline Var vsqrt(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
  return make_op(std::move(out), {a}, [a](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      a->grad[i] += n.grad[i] * 0.5 / std::max(n.value[i], 1e-12);
  });
}

inline Var vabs(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(out[i]);
  return make_op(std::move(out), {a}, [a](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      Real x = a->value[i];
      a->grad[i] += n.grad[i] * (x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0));
    }
  });
}

inline Var clamp(const Var& a, Real lo, Real hi) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, out[i]));
  return make_op(std::move(out), {a}, [a, lo, hi](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      Real x = a->value[i];
      if (x >= lo && x <= hi) a->grad[i] += n.grad[i];
    }
  });
}

inline Var gelu(const Var& a) {
  Tensor out = a->value;
  for (int64_t i = 0; i < out.numel(); ++i) {
    Real x = out[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  }
  return make_op(std::move(out), {a}, [a](Node& n) {
    a->ensure_grad();
    constexpr Real inv_sqrt2pi = 0.3989422804014327;
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      Real x = a->value[i];
      Real cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      Real pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      a->grad[i] += n.grad[i] * (cdf + x * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(0))
    throw InvalidInputError("matmul: incompatible shapes " + shape_str(a->value.shape()) + " x " +
                            shape_str(b->value.shape()));
  const int64_t M = a->value.dim(0), K = a->value.dim(1), N = b->value.dim(1);
  Tensor out({M, N});
  detail::MMap(out.data(), M, N).noalias() =
      detail::CMap(a->value.data(), M, K) * detail::CMap(b->value.data(), K, N);
  return make_op(std::move(out), {a, b}, [a, b, M, K, N](Node& n) {
    detail::CMap g(n.grad.data(), M, N);
    if (a->requires_grad) {
      a->ensure_grad();
      detail::MMap(a->grad.data(), M, K).noalias() +=
          g * detail::CMap(b->value.data(), K, N).transpose();
    }
    if (b->requires_grad) {
      b->ensure_grad();
      detail::MMap(b->grad.data(), K, N).noalias() +=
          detail::CMap(a->value.data(), M, K).transpose() * g;
    }
  });
}

inline Var bmm(const Var& a, const Var& b) {
  if (a->value.rank() != 3 || b->value.rank() != 3 || a->value.dim(0) != b->value.dim(0) ||
      a->value.dim(2) != b->value.dim(1))
    throw InvalidInputError("bmm: incompatible shapes " + shape_str(a->value.shape()) + " x " +
                            shape_str(b->value.shape()));
  const int64_t G = a->value.dim(0), M = a->value.dim(1), K = a->value.dim(2), N = b->value.dim(2);
  Tensor out({G, M, N});
  for (int64_t g = 0; g < G; ++g) {
    detail::MMap(out.data() + g * M * N, M, N).noalias() =
        detail::CMap(a->value.data() + g * M * K, M, K) *
        detail::CMap(b->value.data() + g * K * N, K, N);
  }
  return make_op(std::move(out), {a, b}, [a, b, G, M, K, N](Node& n) {
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    for (int64_t g = 0; g < G; ++g) {
      detail::CMap gm(n.grad.data() + g * M * N, M, N);
      if (a->requires_grad)
        detail::MMap(a->grad.data() + g * M * K, M, K).noalias() +=
            gm * detail::CMap(b->value.data() + g * K * N, K, N).transpose();
      if (b->requires_grad)
        detail::MMap(b->grad.data() + g * K * N, K, N).noalias() +=
            detail::CMap(a->value.data() + g * M * K, M, K).transpose() * gm;
    }
  });
}

inline Var transpose_last2(const Var& a) {
  const auto& s = a->value.shape();
  if (s.size() != 2 && s.size() != 3)
    throw InvalidInputError("transpose_last2: rank must be 2 or 3");
  const int64_t G = s.size() == 3 ? s[0] : 1;
  const int64_t M = s[s.size() - 2], N = s[s.size() - 1];
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor out(os);
  for (int64_t g = 0; g < G; ++g)
    for (int64_t i = 0; i < M; ++i)
      for (int64_t j = 0; j < N; ++j)
        out[g * M * N + j * M + i] = a->value[g * M * N + i * N + j];
  return make_op(std::move(out), {a}, [a, G, M, N](Node& n) {
    a->ensure_grad();
    for (int64_t g = 0; g < G; ++g)
      for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j)
          a->grad[g * M * N + i * N + j] += n.grad[g * M * N + j * M + i];
  });
}

// x: [..., D] treated as [M, D]; v: [D]
inline Var add_rowvec(const Var& x, const Var& v) {
  const int64_t D = v->value.numel();
  if (x->value.rank() < 1 || x->value.dim(x->value.rank() - 1) != D)
    throw InvalidInputError("add_rowvec: last dim mismatch");
  const int64_t M = x->value.numel() / D;
  Tensor out = x->value;
  for (int64_t i = 0; i < M; ++i)
    for (int64_t j = 0; j < D; ++j) out[i * D + j] += v->value[j];
  return make_op(std::move(out), {x, v}, [x, v, M, D](Node& n) {
    if (x->requires_grad) {
      x->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) x->grad[i] += n.grad[i];
    }
    if (v->requires_grad) {
      v->ensure_grad();
      for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < D; ++j) v->grad[j] += n.grad[i * D + j];
    }
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a->value.numel())
    throw InvalidInputError("reshape: numel mismatch " + shape_str(a->value.shape()) + " -> " +
                            shape_str(shape));
  Tensor out(std::move(shape), a->value.vec());
  return make_op(std::move(out), {a}, [a](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
  });
}

inline Var slice(const Var& a, size_t dim, int64_t start, int64_t len) {
  const auto& s = a->value.shape();
  if (dim >= s.size() || start < 0 || len <= 0 || start + len > s[dim])
    throw InvalidInputError("slice: out of range");
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < dim; ++i) outer *= s[i];
  for (size_t i = dim + 1; i < s.size(); ++i) inner *= s[i];
  Shape os = s;
  os[dim] = len;
  Tensor out(os);
  const int64_t in_stride = s[dim] * inner, out_stride = len * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * out_stride, a->value.data() + o * in_stride + start * inner,
                static_cast<size_t>(out_stride) * sizeof(Real));
  return make_op(std::move(out), {a}, [a, outer, inner, start, in_stride, out_stride](Node& n) {
    a->ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      Real* dst = a->grad.data() + o * in_stride + start * inner;
      const Real* src = n.grad.data() + o * out_stride;
      for (int64_t i = 0; i < out_stride; ++i) dst[i] += src[i];
    }
  });
}

inline Var concat_last(const Var& a, const Var& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != sb.size() || sa.empty())
    throw InvalidInputError("concat_last: rank mismatch");
  for (size_t i = 0; i + 1 < sa.size(); ++i)
    if (sa[i] != sb[i]) throw InvalidInputError("concat_last: leading dims differ");
  const int64_t Da = sa.back(), Db = sb.back();
  const int64_t M = a->value.numel() / Da;
  Shape os = sa;
  os.back() = Da + Db;
  Tensor out(os);
  for (int64_t i = 0; i < M; ++i) {
    std::memcpy(out.data() + i * (Da + Db), a->value.data() + i * Da,
                static_cast<size_t>(Da) * sizeof(Real));
    std::memcpy(out.data() + i * (Da + Db) + Da, b->value.data() + i * Db,
                static_cast<size_t>(Db) * sizeof(Real));
  }
  return make_op(std::move(out), {a, b}, [a, b, M, Da, Db](Node& n) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < Da; ++j) a->grad[i * Da + j] += n.grad[i * (Da + Db) + j];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < Db; ++j) b->grad[i * Db + j] += n.grad[i * (Da + Db) + Da + j];
    }
  });
}

inline Var permute3(const Var& a, std::array<int, 3> perm) {
  if (a->value.rank() != 3) throw InvalidInputError("permute3: rank must be 3");
  const auto& s = a->value.shape();
  Shape os = {s[perm[0]], s[perm[1]], s[perm[2]]};
  Tensor out(os);
  std::array<int64_t, 3> in_stride = {s[1] * s[2], s[2], 1};
  int64_t st0 = in_stride[perm[0]], st1 = in_stride[perm[1]], st2 = in_stride[perm[2]];
  int64_t flat = 0;
  for (int64_t i = 0; i < os[0]; ++i)
    for (int64_t j = 0; j < os[1]; ++j)
      for (int64_t k = 0; k < os[2]; ++k)
        out[flat++] = a->value[i * st0 + j * st1 + k * st2];
  return make_op(std::move(out), {a}, [a, os, st0, st1, st2](Node& n) {
    a->ensure_grad();
    int64_t flat = 0;
    for (int64_t i = 0; i < os[0]; ++i)
      for (int64_t j = 0; j < os[1]; ++j)
        for (int64_t k = 0; k < os[2]; ++k) a->grad[i * st0 + j * st1 + k * st2] += n.grad[flat++];
  });
}

// [B,T,D] -> [B*H, T, D/H]
inline Var split_heads(const Var& a, int64_t heads) {
  const auto& s = a->value.shape();
  if (s.size() != 3 || s[2] % heads != 0) throw InvalidInputError("split_heads: bad shape");
  const int64_t B = s[0], T = s[1], D = s[2], dh = D / heads;
  Tensor out({B * heads, T, dh});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < T; ++t)
        for (int64_t d = 0; d < dh; ++d)
          out[((b * heads + h) * T + t) * dh + d] = a->value[(b * T + t) * D + h * dh + d];
  return make_op(std::move(out), {a}, [a, B, T, D, dh, heads](Node& n) {
    a->ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t t = 0; t < T; ++t)
          for (int64_t d = 0; d < dh; ++d)
            a->grad[(b * T + t) * D + h * dh + d] += n.grad[((b * heads + h) * T + t) * dh + d];
  });
}

// [B*H, T, dh] -> [B, T, H*dh]
inline Var merge_heads(const Var& a, int64_t heads) {
  const auto& s = a->value.shape();
  if (s.size() != 3 || s[0] % heads != 0) throw InvalidInputError("merge_heads: bad shape");
  const int64_t B = s[0] / heads, T = s[1], dh = s[2], D = heads * dh;
  Tensor out({B, T, D});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < T; ++t)
        for (int64_t d = 0; d < dh; ++d)
          out[(b * T + t) * D + h * dh + d] = a->value[((b * heads + h) * T + t) * dh + d];
  return make_op(std::move(out), {a}, [a, B, T, D, dh, heads](Node& n) {
    a->ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t t = 0; t < T; ++t)
          for (int64_t d = 0; d < dh; ++d)
            a->grad[((b * heads + h) * T + t) * dh + d] += n.grad[(b * T + t) * D + h * dh + d];
  });
}

// [B,D] -> [B,n,D], repeating each row n times
inline Var expand_rows(const Var& a, int64_t n_rows) {
  const auto& s = a->value.shape();
  if (s.size() != 2 || n_rows <= 0) throw InvalidInputError("expand_rows: bad input");
  const int64_t B = s[0], D = s[1];
  Tensor out({B, n_rows, D});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t r = 0; r < n_rows; ++r)
      std::memcpy(out.data() + (b * n_rows + r) * D, a->value.data() + b * D,
                  static_cast<size_t>(D) * sizeof(Real));
  return make_op(std::move(out), {a}, [a, B, n_rows, D](Node& n) {
    a->ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t r = 0; r < n_rows; ++r)
        for (int64_t d = 0; d < D; ++d) a->grad[b * D + d] += n.grad[(b * n_rows + r) * D + d];
  });
}

// tok [D] broadcast as row 0 of every batch element: x [B,T,D] -> [B,T+1,D]
inline Var prepend_row(const Var& tok, const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() != 3 || tok->value.numel() != s[2])
    throw InvalidInputError("prepend_row: bad shapes");
  const int64_t B = s[0], T = s[1], D = s[2];
  Tensor out({B, T + 1, D});
  for (int64_t b = 0; b < B; ++b) {
    std::memcpy(out.data() + b * (T + 1) * D, tok->value.data(),
                static_cast<size_t>(D) * sizeof(Real));
    std::memcpy(out.data() + b * (T + 1) * D + D, x->value.data() + b * T * D,
                static_cast<size_t>(T * D) * sizeof(Real));
  }
  return make_op(std::move(out), {tok, x}, [tok, x, B, T, D](Node& n) {
    if (tok->requires_grad) {
      tok->ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t d = 0; d < D; ++d) tok->grad[d] += n.grad[b * (T + 1) * D + d];
    }
    if (x->requires_grad) {
      x->ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < T * D; ++i)
          x->grad[b * T * D + i] += n.grad[b * (T + 1) * D + D + i];
    }
  });
}

// x [B,T,D] + p [T,D] broadcast over batch
inline Var add_bcast_rows(const Var& x, const Var& p) {
  const auto& s = x->value.shape();
  if (s.size() != 3 || p->value.rank() != 2 || p->value.dim(0) != s[1] || p->value.dim(1) != s[2])
    throw InvalidInputError("add_bcast_rows: bad shapes");
  const int64_t B = s[0], TD = s[1] * s[2];
  Tensor out = x->value;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < TD; ++i) out[b * TD + i] += p->value[i];
  return make_op(std::move(out), {x, p}, [x, p, B, TD](Node& n) {
    if (x->requires_grad) {
      x->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) x->grad[i] += n.grad[i];
    }
    if (p->requires_grad) {
      p->ensure_grad();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < TD; ++i) p->grad[i] += n.grad[b * TD + i];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  Tensor out = Tensor::scalar(a->value.sum());
  return make_op(std::move(out), {a}, [a](Node& n) {
    a->ensure_grad();
    Real g = n.grad[0];
    for (int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
  });
}

inline Var mean_all(const Var& a) {
  if (a->value.numel() == 0) throw InvalidInputError("mean_all: empty tensor");
  const Real inv = 1.0 / static_cast<Real>(a->value.numel());
  Tensor out = Tensor::scalar(a->value.sum() * inv);
  return make_op(std::move(out), {a}, [a, inv](Node& n) {
    a->ensure_grad();
    Real g = n.grad[0] * inv;
    for (int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
  });
}

// [..., D] -> [...]; rank-1 input reduces to [1]
inline Var sum_last(const Var& a) {
  const auto& s = a->value.shape();
  if (s.empty()) throw InvalidInputError("sum_last: rank 0");
  const int64_t D = s.back();
  const int64_t M = a->value.numel() / D;
  Shape os(s.begin(), s.end() - 1);
  if (os.empty()) os = {1};
  Tensor out(os);
  for (int64_t i = 0; i < M; ++i) {
    Real acc = 0;
    for (int64_t j = 0; j < D; ++j) acc += a->value[i * D + j];
    out[i] = acc;
  }
  return make_op(std::move(out), {a}, [a, M, D](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < M; ++i)
      for (int64_t j = 0; j < D; ++j) a->grad[i * D + j] += n.grad[i];
  });
}

// [B, ...] -> [B]
inline Var sum_per_sample(const Var& a) {
  const auto& s = a->value.shape();
  if (s.empty()) throw InvalidInputError("sum_per_sample: rank 0");
  const int64_t B = s[0];
  const int64_t inner = a->value.numel() / std::max<int64_t>(B, 1);
  Tensor out({B});
  for (int64_t b = 0; b < B; ++b) {
    Real acc = 0;
    for (int64_t i = 0; i < inner; ++i) acc += a->value[b * inner + i];
    out[b] = acc;
  }
  return make_op(std::move(out), {a}, [a, B, inner](Node& n) {
    a->ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < inner; ++i) a->grad[b * inner + i] += n.grad[b];
  });
}

// ---------------------------------------------------------------------------
// nn primitives
// ---------------------------------------------------------------------------

inline Var softmax_last(const Var& a) {
  const auto& s = a->value.shape();
  if (s.empty()) throw InvalidInputError("softmax_last: rank 0");
  const int64_t D = s.back();
  const int64_t M = a->value.numel() / D;
  Tensor out = a->value;
  for (int64_t i = 0; i < M; ++i) {
    Real* row = out.data() + i * D;
    Real m = row[0];
    for (int64_t j = 1; j < D; ++j) m = std::max(m, row[j]);
    Real z = 0;
    for (int64_t j = 0; j < D; ++j) {
      row[j] = std::exp(row[j] - m);
      z += row[j];
    }
    for (int64_t j = 0; j < D; ++j) row[j] /= z;
  }
  return make_op(std::move(out), {a}, [a, M, D](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < M; ++i) {
      const Real* y = n.value.data() + i * D;
      const Real* gy = n.grad.data() + i * D;
      Real dot = 0;
      for (int64_t j = 0; j < D; ++j) dot += y[j] * gy[j];
      Real* gx = a->grad.data() + i * D;
      for (int64_t j = 0; j < D; ++j) gx[j] += y[j] * (gy[j] - dot);
    }
  });
}

inline Var log_softmax_last(const Var& a) {
  const auto& s = a->value.shape();
  if (s.empty()) throw InvalidInputError("log_softmax_last: rank 0");
  const int64_t D = s.back();
  const int64_t M = a->value.numel() / D;
  Tensor out = a->value;
  for (int64_t i = 0; i < M; ++i) {
    Real* row = out.data() + i * D;
    Real m = row[0];
    for (int64_t j = 1; j < D; ++j) m = std::max(m, row[j]);
    Real z = 0;
    for (int64_t j = 0; j < D; ++j) z += std::exp(row[j] - m);
    Real lse = m + std::log(z);
    for (int64_t j = 0; j < D; ++j) row[j] -= lse;
  }
  return make_op(std::move(out), {a}, [a, M, D](Node& n) {
    a->ensure_grad();
    for (int64_t i = 0; i < M; ++i) {
      const Real* y = n.value.data() + i * D;
      const Real* gy = n.grad.data() + i * D;
      Real gsum = 0;
      for (int64_t j = 0; j < D; ++j) gsum += gy[j];
      Real* gx = a->grad.data() + i * D;
      for (int64_t j = 0; j < D; ++j) gx[j] += gy[j] - std::exp(y[j]) * gsum;
    }
  });
}

inline Var layernorm_last(const Var& x, const Var& gamma, const Var& beta, Real eps = 1e-6) {
  const auto& s = x->value.shape();
  if (s.empty()) throw InvalidInputError("layernorm_last: rank 0");
  const int64_t D = s.back();
  if (gamma->value.numel() != D || beta->value.numel() != D)
    throw InvalidInputError("layernorm_last: gamma/beta size mismatch");
  const int64_t M = x->value.numel() / D;
  Tensor out(s);
  auto xhat = std::make_shared<Tensor>(Shape{M, D});
  auto inv_sigma = std::make_shared<Tensor>(Shape{M});
  for (int64_t i = 0; i < M; ++i) {
    const Real* row = x->value.data() + i * D;
    Real mu = 0;
    for (int64_t j = 0; j < D; ++j) mu += row[j];
    mu /= static_cast<Real>(D);
    Real var = 0;
    for (int64_t j = 0; j < D; ++j) {
      Real d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<Real>(D);
    Real is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[i] = is;
    for (int64_t j = 0; j < D; ++j) {
      Real xh = (row[j] - mu) * is;
      (*xhat)[i * D + j] = xh;
      out[i * D + j] = xh * gamma->value[j] + beta->value[j];
    }
  }
  return make_op(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_sigma, M, D](Node& n) {
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    if (x->requires_grad) x->ensure_grad();
    for (int64_t i = 0; i < M; ++i) {
      const Real* gy = n.grad.data() + i * D;
      const Real* xh = xhat->data() + i * D;
      if (gamma->requires_grad)
        for (int64_t j = 0; j < D; ++j) gamma->grad[j] += gy[j] * xh[j];
      if (beta->requires_grad)
        for (int64_t j = 0; j < D; ++j) beta->grad[j] += gy[j];
      if (x->requires_grad) {
        Real mean_dxhat = 0, mean_dxhat_xhat = 0;
        // dxhat_j = gy_j * gamma_j
        for (int64_t j = 0; j < D; ++j) {
          Real dxh = gy[j] * gamma->value[j];
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= static_cast<Real>(D);
        mean_dxhat_xhat /= static_cast<Real>(D);
        Real is = (*inv_sigma)[i];
        Real* gx = x->grad.data() + i * D;
        for (int64_t j = 0; j < D; ++j) {
          Real dxh = gy[j] * gamma->value[j];
          gx[j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
      }
    }
  });
}

// sum_i w_i * CE(logits_i, labels_i). Rows with weight 0 are skipped entirely,
// so ignore labels may be out of range there.
inline Var weighted_cross_entropy(const Var& logits, std::vector<int64_t> labels,
                                  std::vector<Real> weights) {
  if (logits->value.rank() != 2) throw InvalidInputError("weighted_cross_entropy: logits must be 2-D");
  const int64_t N = logits->value.dim(0), K = logits->value.dim(1);
  if (static_cast<int64_t>(labels.size()) != N || static_cast<int64_t>(weights.size()) != N)
    throw InvalidInputError("weighted_cross_entropy: labels/weights length mismatch");
  Real loss = 0;
  auto probs = std::make_shared<Tensor>(Shape{N, K});
  for (int64_t i = 0; i < N; ++i) {
    if (weights[i] == 0.0) continue;
    if (labels[i] < 0 || labels[i] >= K)
      throw InvalidInputError("weighted_cross_entropy: label out of range");
    const Real* row = logits->value.data() + i * K;
    Real m = row[0];
    for (int64_t j = 1; j < K; ++j) m = std::max(m, row[j]);
    Real z = 0;
    for (int64_t j = 0; j < K; ++j) z += std::exp(row[j] - m);
    Real lse = m + std::log(z);
    loss += weights[i] * (lse - row[labels[i]]);
    for (int64_t j = 0; j < K; ++j) (*probs)[i * K + j] = std::exp(row[j] - lse);
  }
  return make_op(Tensor::scalar(loss), {logits},
                 [logits, probs, labels = std::move(labels), weights = std::move(weights), N,
                  K](Node& n) {
                   logits->ensure_grad();
                   Real g = n.grad[0];
                   for (int64_t i = 0; i < N; ++i) {
                     if (weights[i] == 0.0) continue;
                     Real w = weights[i] * g;
                     Real* gx = logits->grad.data() + i * K;
                     const Real* p = probs->data() + i * K;
                     for (int64_t j = 0; j < K; ++j) gx[j] += w * p[j];
                     gx[labels[i]] -= w;
                   }
                 });
}

// ---------------------------------------------------------------------------
// image ops
// ---------------------------------------------------------------------------

// [B,C,H,W] -> [B, N, p*p*C] with N = (H/p)*(W/p); patch pixels ordered
// channel-major then row-major within the patch
inline Var patchify(const Var& x, int64_t p) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw InvalidInputError("patchify: input must be [B,C,H,W]");
  const int64_t B = s[0], C = s[1], H = s[2], W = s[3];
  if (p <= 0 || H % p != 0 || W % p != 0)
    throw InvalidInputError("patchify: H and W must be divisible by patch size");
  const int64_t gh = H / p, gw = W / p, N = gh * gw, F = p * p * C;
  Tensor out({B, N, F});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < gh; ++i)
      for (int64_t j = 0; j < gw; ++j) {
        const int64_t n_idx = i * gw + j;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t dy = 0; dy < p; ++dy)
            for (int64_t dx = 0; dx < p; ++dx)
              out[(b * N + n_idx) * F + (c * p + dy) * p + dx] =
                  x->value[((b * C + c) * H + i * p + dy) * W + j * p + dx];
      }
  return make_op(std::move(out), {x}, [x, B, C, H, W, p, gh, gw, N, F](Node& n) {
    x->ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < gh; ++i)
        for (int64_t j = 0; j < gw; ++j) {
          const int64_t n_idx = i * gw + j;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t dy = 0; dy < p; ++dy)
              for (int64_t dx = 0; dx < p; ++dx)
                x->grad[((b * C + c) * H + i * p + dy) * W + j * p + dx] +=
                    n.grad[(b * N + n_idx) * F + (c * p + dy) * p + dx];
        }
  });
}

namespace detail {
// corner-aligned sampling coordinates: output i maps to i*(H-1)/(H2-1)
inline void bilinear_axis(int64_t in, int64_t out, int64_t i, int64_t& i0, int64_t& i1, Real& t) {
  Real src = (out == 1) ? 0.5 * static_cast<Real>(in - 1)
                        : static_cast<Real>(i) * static_cast<Real>(in - 1) / static_cast<Real>(out - 1);
  i0 = static_cast<int64_t>(std::floor(src));
  i0 = std::min(std::max<int64_t>(i0, 0), in - 1);
  i1 = std::min(i0 + 1, in - 1);
  t = src - static_cast<Real>(i0);
}
}  // namespace detail

// corner-aligned bilinear resize, [C,H,W] -> [C,H2,W2]
inline Var bilinear_resize(const Var& x, int64_t H2, int64_t W2) {
  const auto& s = x->value.shape();
  if (s.size() != 3) throw InvalidInputError("bilinear_resize: input must be [C,H,W]");
  if (H2 <= 0 || W2 <= 0) throw InvalidInputError("bilinear_resize: bad target size");
  const int64_t C = s[0], H = s[1], W = s[2];
  Tensor out({C, H2, W2});
  for (int64_t i = 0; i < H2; ++i) {
    int64_t i0, i1;
    Real ty;
    detail::bilinear_axis(H, H2, i, i0, i1, ty);
    for (int64_t j = 0; j < W2; ++j) {
      int64_t j0, j1;
      Real tx;
      detail::bilinear_axis(W, W2, j, j0, j1, tx);
      for (int64_t c = 0; c < C; ++c) {
        const Real* in = x->value.data() + c * H * W;
        out[(c * H2 + i) * W2 + j] = (1 - ty) * (1 - tx) * in[i0 * W + j0] +
                                     (1 - ty) * tx * in[i0 * W + j1] +
                                     ty * (1 - tx) * in[i1 * W + j0] + ty * tx * in[i1 * W + j1];
      }
    }
  }
  return make_op(std::move(out), {x}, [x, C, H, W, H2, W2](Node& n) {
    x->ensure_grad();
    for (int64_t i = 0; i < H2; ++i) {
      int64_t i0, i1;
      Real ty;
      detail::bilinear_axis(H, H2, i, i0, i1, ty);
      for (int64_t j = 0; j < W2; ++j) {
        int64_t j0, j1;
        Real tx;
        detail::bilinear_axis(W, W2, j, j0, j1, tx);
        for (int64_t c = 0; c < C; ++c) {
          Real g = n.grad[(c * H2 + i) * W2 + j];
          Real* gx = x->grad.data() + c * H * W;
          gx[i0 * W + j0] += (1 - ty) * (1 - tx) * g;
          gx[i0 * W + j1] += (1 - ty) * tx * g;
          gx[i1 * W + j0] += ty * (1 - tx) * g;
          gx[i1 * W + j1] += ty * tx * g;
        }
      }
    }
  });
}

// 2x2 average pooling, trailing odd row/column dropped; [C,H,W] -> [C,H/2,W/2]
inline Var avg_pool2(const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() != 3) throw InvalidInputError("avg_pool2: input must be [C,H,W]");
  const int64_t C = s[0], H = s[1], W = s[2];
  if (H < 2 || W < 2) throw InvalidInputError("avg_pool2: spatial dims must be >= 2");
  const int64_t H2 = H / 2, W2 = W / 2;
  Tensor out({C, H2, W2});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < H2; ++i)
      for (int64_t j = 0; j < W2; ++j) {
        const Real* in = x->value.data() + c * H * W;
        out[(c * H2 + i) * W2 + j] = 0.25 * (in[(2 * i) * W + 2 * j] + in[(2 * i) * W + 2 * j + 1] +
                                             in[(2 * i + 1) * W + 2 * j] +
                                             in[(2 * i + 1) * W + 2 * j + 1]);
      }
  return make_op(std::move(out), {x}, [x, C, H, W, H2, W2](Node& n) {
    x->ensure_grad();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < H2; ++i)
        for (int64_t j = 0; j < W2; ++j) {
          Real g = 0.25 * n.grad[(c * H2 + i) * W2 + j];
          Real* gx = x->grad.data() + c * H * W;
          gx[(2 * i) * W + 2 * j] += g;
          gx[(2 * i) * W + 2 * j + 1] += g;
          gx[(2 * i + 1) * W + 2 * j] += g;
          gx[(2 * i + 1) * W + 2 * j + 1] += g;
        }
  });
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

// x [..., Din] @ W [Din, Dout] + b [Dout]
inline Var linear(const Var& x, const Var& W, const Var& b) {
  const auto& s = x->value.shape();
  const int64_t Din = W->value.dim(0), Dout = W->value.dim(1);
  if (s.empty() || s.back() != Din) throw InvalidInputError("linear: input dim mismatch");
  const int64_t M = x->value.numel() / Din;
  Var flat = (s.size() == 2) ? x : reshape(x, {M, Din});
  Var y = add_rowvec(matmul(flat, W), b);
  if (s.size() == 2) return y;
  Shape os(s.begin(), s.end() - 1);
  os.push_back(Dout);
  return reshape(y, os);
}

// rows of x scaled to unit L2 norm; rows shorter than eps divide by eps
inline Var normalize_rows(const Var& x, Real eps = 1e-8) {
  if (x->value.rank() != 2) throw InvalidInputError("normalize_rows: input must be [N,D]");
  const int64_t N = x->value.dim(0), D = x->value.dim(1);
  Tensor out = x->value;
  std::vector<Real> norms(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) {
    Real ss = 0.0;
    for (int64_t j = 0; j < D; ++j) ss += out[i * D + j] * out[i * D + j];
    const Real n = std::max(std::sqrt(ss), eps);
    norms[static_cast<size_t>(i)] = n;
    for (int64_t j = 0; j < D; ++j) out[i * D + j] /= n;
  }
  return make_op(std::move(out), {x}, [x, N, D, norms](Node& n) {
    x->ensure_grad();
    for (int64_t i = 0; i < N; ++i) {
      Real dot = 0.0;
      for (int64_t j = 0; j < D; ++j) dot += n.grad[i * D + j] * n.value[i * D + j];
      for (int64_t j = 0; j < D; ++j)
        x->grad[i * D + j] +=
            (n.grad[i * D + j] - n.value[i * D + j] * dot) / norms[static_cast<size_t>(i)];
    }
  });
}

// columns of x standardized to zero mean and unit variance over the batch
// (rows). Affine-free; a constant column maps to zeros rather than NaN.
inline Var batchnorm_cols(const Var& x, Real eps = 1e-5) {
  if (x->value.rank() != 2) throw InvalidInputError("batchnorm_cols: input must be [N,D]");
  const int64_t N = x->value.dim(0), D = x->value.dim(1);
  Tensor out = x->value;
  std::vector<Real> inv_std(static_cast<size_t>(D));
  for (int64_t j = 0; j < D; ++j) {
    Real mu = 0.0;
    for (int64_t i = 0; i < N; ++i) mu += out[i * D + j];
    mu /= static_cast<Real>(N);
    Real var = 0.0;
    for (int64_t i = 0; i < N; ++i) {
      const Real c = out[i * D + j] - mu;
      var += c * c;
    }
    var /= static_cast<Real>(N);
    const Real is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(j)] = is;
    for (int64_t i = 0; i < N; ++i) out[i * D + j] = (out[i * D + j] - mu) * is;
  }
  return make_op(std::move(out), {x}, [x, N, D, inv_std](Node& n) {
    x->ensure_grad();
    for (int64_t j = 0; j < D; ++j) {
      Real gbar = 0.0, gybar = 0.0;
      for (int64_t i = 0; i < N; ++i) {
        gbar += n.grad[i * D + j];
        gybar += n.grad[i * D + j] * n.value[i * D + j];
      }
      gbar /= static_cast<Real>(N);
      gybar /= static_cast<Real>(N);
      for (int64_t i = 0; i < N; ++i)
        x->grad[i * D + j] += inv_std[static_cast<size_t>(j)] *
                              (n.grad[i * D + j] - gbar - n.value[i * D + j] * gybar);
    }
  });
}

// mean over rows of cosine similarity between corresponding rows of a and b
inline Var cosine_rows_mean(const Var& a, const Var& b, Real eps = 1e-8) {
  detail::check_same_shape(a, b, "cosine_rows_mean");
  if (a->value.rank() != 2) throw InvalidInputError("cosine_rows_mean: inputs must be [N,D]");
  Var dots = sum_last(mul(a, b));
  Var na = vsqrt(sum_last(mul(a, a)));
  Var nb = vsqrt(sum_last(mul(b, b)));
  Var denom = add_scalar(mul(na, nb), eps);
  return mean_all(divide(dots, denom));
}

}  // namespace srb::ag
