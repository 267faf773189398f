#pragma once

// Central finite differences against analytic gradients.

#include "camrank/grid.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace testing {

struct GradCheck {
  double max_rel = 0.0;  // worst |a - n| / max(|a|, |n|) over entries not within abs_floor
  double max_abs = 0.0;  // worst |a - n|
  int checked = 0;
};

// A pair passes when |a - n| <= rel * max(|a|, |n|), or when both are below `abs_floor`
// in difference.
inline double relative_error(double analytic, double numeric, double abs_floor = 1e-9) {
  const double diff = std::fabs(analytic - numeric);
  if (diff <= abs_floor) return 0.0;
  return diff / std::max(std::fabs(analytic), std::fabs(numeric));
}

template <typename M>
GradCheck check_gradient(M& x, const M& analytic, const std::function<double()>& f, double h = 1e-6) {
  GradCheck r;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f();
    x.data()[i] = keep - h;
    const double down = f();
    x.data()[i] = keep;
    const double numeric = (up - down) / (2 * h);
    r.max_rel = std::max(r.max_rel, relative_error(analytic.data()[i], numeric));
    r.max_abs = std::max(r.max_abs, std::fabs(analytic.data()[i] - numeric));
    ++r.checked;
  }
  return r;
}

}  // namespace testing

#include "camrank/autodiff.hpp"

#include <random>
#include <vector>

namespace testing {

// Checks every input of `f` by contracting its output with a fixed random tensor.
inline GradCheck check_op(std::vector<camrank::ad::Var> inputs,
                          const std::function<camrank::ad::Var(const std::vector<camrank::ad::Var>&)>& f,
                          std::uint64_t seed = 1, double h = 1e-6) {
  namespace ad = camrank::ad;
  const auto probe = f(inputs);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  camrank::Matrix r(probe->value().rows(), probe->value().cols());
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = n(rng);
  auto objective = [&]() {
    return ad::scalar_term({f(inputs)}, [&](std::span<const camrank::Matrix* const> v) {
      return ad::ScalarTerm{v[0]->cwiseProduct(r).sum(), {r}};
    });
  };
  for (auto& x : inputs) x->zero_grad();
  ad::backward(objective());
  GradCheck total;
  for (auto& x : inputs) {
    if (!x->requires_grad()) continue;
    camrank::Matrix analytic = x->has_grad() ? x->grad() : camrank::Matrix::Zero(x->value().rows(), x->value().cols());
    const auto one = check_gradient(x->mutable_value(), analytic, [&] { return objective()->item(); }, h);
    total.max_rel = std::max(total.max_rel, one.max_rel);
    total.max_abs = std::max(total.max_abs, one.max_abs);
    total.checked += one.checked;
  }
  return total;
}

inline camrank::ad::Var random_param(std::mt19937_64& rng, camrank::ad::Shape s, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  camrank::Matrix m(s.channels, s.pixels());
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return camrank::ad::parameter(m, s);
}

}  // namespace testing
