#pragma once

#include "doctest.h"
#include "srb/autograd.hpp"

namespace srb::testutil {

// central finite differences of a scalar functional of one tensor input
template <typename F>
Tensor fd_gradient(F&& f, const Tensor& x, Real h = 1e-5) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    xp[i] = x[i] + h;
    Real fp = f(xp);
    xp[i] = x[i] - h;
    Real fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline Real rel_err(const Tensor& got, const Tensor& want) {
  Real scale = std::max(1.0, std::max(std::abs(want.min()), std::abs(want.max())));
  return max_abs_diff(got, want) / scale;
}

// Differentiates `build` (Var -> scalar Var) at x via the tape, compares the
// input gradient against finite differences of the same forward computation.
template <typename Build>
void check_grad(Build&& build, const Tensor& x, Real tol = 1e-7) {
  auto xv = ag::leaf(x, true);
  auto loss = build(xv);
  ag::backward(loss);
  Tensor fd = fd_gradient(
      [&](const Tensor& t) {
        ag::NoGradGuard ng;
        return ag::scalar_value(build(ag::leaf(t, false)));
      },
      x);
  // NoGrad forward on a no-grad leaf yields constant graphs; scalar_value reads the value
  INFO("analytic vs finite-difference gradient, rel err = " << rel_err(xv->grad, fd));
  CHECK(rel_err(xv->grad, fd) < tol);
}

// random projection making every output element matter in the scalar objective
inline ag::Var project_to_scalar(const ag::Var& y, uint64_t seed) {
  Rng r(seed);
  Tensor w = r.uniform_tensor(y->value.shape(), 0.25, 1.0);
  return ag::sum_all(ag::mul(y, ag::constant(w)));
}

}  // namespace srb::testutil
