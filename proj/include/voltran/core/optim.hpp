#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "voltran/core/graph.hpp"

namespace voltran::ad {

// Named trainable leaves. Modules register their parameters here so the
// optimizer and checkpoint code see one flat list.
template <typename Real>
struct param_store {
  std::vector<std::string> names;
  std::vector<var<Real>> params;

  var<Real> add(const std::string& name, tensor<Real> init) {
    for (const auto& n : names) VT_CHECK(n != name, "param_store: duplicate name ", name);
    auto p = make_leaf(std::move(init), /*requires_grad=*/true);
    names.push_back(name);
    params.push_back(p);
    return p;
  }

  var<Real> find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return params[i];
    VT_CHECK(false, "param_store: no param named ", name);
    return nullptr;
  }

  int64_t count_scalars() const {
    int64_t n = 0;
    for (const auto& p : params) n += p->val.size();
    return n;
  }

  void zero_grad() const { ad::zero_grad(params); }
};

// Adam with bias correction. lr is passed per step so schedules live
// with the trainer, not here.
template <typename Real>
struct adam {
  Real beta1 = Real(0.9), beta2 = Real(0.999), eps = Real(1e-8);
  int64_t t = 0;
  std::vector<tensor<Real>> m, v;

  explicit adam(const param_store<Real>& ps) {
    for (const auto& p : ps.params) {
      m.push_back(tensor<Real>(p->val.rows, p->val.cols));
      v.push_back(tensor<Real>(p->val.rows, p->val.cols));
    }
  }

  void step(const param_store<Real>& ps, Real lr) {
    VT_CHECK(ps.params.size() == m.size(), "adam: store size changed");
    ++t;
    Real c1 = Real(1) - std::pow(beta1, Real(t));
    Real c2 = Real(1) - std::pow(beta2, Real(t));
    for (size_t i = 0; i < ps.params.size(); ++i) {
      auto& p = *ps.params[i];
      if (p.grad.size() == 0) continue;  // param unused this step
      m[i].a() = beta1 * m[i].a() + (Real(1) - beta1) * p.grad.a();
      v[i].a() = beta2 * v[i].a() + (Real(1) - beta2) * p.grad.a().square();
      // scalar sqrt: Eigen's packet sqrt need not match std::sqrt bit for
      // bit, and the packet/peel split follows the allocation address.
      for (int64_t k = 0; k < p.val.size(); ++k)
        p.val.v[k] -= lr * (m[i].v[k] / c1) / (std::sqrt(v[i].v[k] / c2) + eps);
    }
  }
};

// Cosine decay from lr0 to 0 over total steps; step is 0-based.
template <typename Real>
Real cosine_lr(Real lr0, int64_t step, int64_t total) {
  if (total <= 1) return lr0;
  Real x = Real(step) / Real(total - 1);
  return lr0 * Real(0.5) * (Real(1) + std::cos(Real(M_PI) * x));
}

}  // namespace voltran::ad
