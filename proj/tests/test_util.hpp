#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "deqei/rng.hpp"
#include "deqei/tensor.hpp"

namespace deqei::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline double rel_err(double got, double want, double floor = 1e-10) {
  return std::abs(got - want) / std::max({std::abs(got), std::abs(want), floor});
}

// Independent gradient oracle: central finite differences over every scalar of
// every parameter, re-running the forward closure from scratch each time.
// The error denominator is floored at a fraction of the largest gradient so
// that exactly-zero components are judged against finite-difference noise on
// the problem's own scale.
inline double max_rel_err_vs_fd(const std::function<double()>& forward, ParameterSet& params,
                                const GradMap& analytic, double step = 1e-6,
                                double abs_floor = 1e-6) {
  NoGradGuard ng;  // finite differences need values only
  std::vector<std::pair<double, double>> pairs;  // (analytic, numeric)
  for (auto& [name, p] : params.params()) {
    auto it = analytic.find(name);
    for (size_t i = 0; i < p.mutable_values().size(); ++i) {
      double saved = p.mutable_values()[i];
      p.mutable_values()[i] = saved + step;
      double fp = forward();
      p.mutable_values()[i] = saved - step;
      double fm = forward();
      p.mutable_values()[i] = saved;
      double fd = (fp - fm) / (2 * step);
      double an = it == analytic.end() ? 0.0 : it->second.at(static_cast<int64_t>(i));
      pairs.emplace_back(an, fd);
    }
  }
  double scale = 0;
  for (auto& [an, fd] : pairs) scale = std::max({scale, std::abs(an), std::abs(fd)});
  double floor = std::max(abs_floor, 1e-3 * scale);
  double worst = 0;
  for (auto& [an, fd] : pairs)
    worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), floor}));
  return worst;
}

}  // namespace deqei::test
