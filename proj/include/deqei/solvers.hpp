#pragma once

#include <functional>
#include <vector>

#include "deqei/tensor.hpp"

namespace deqei {

struct SolverConfig {
  enum class Method { Picard, Anderson };
  Method method = Method::Anderson;
  double tol = 1e-5;          // on |F(x)-x| / (|x| + 1e-12)
  int max_iter = 100;
  double damping = 1.0;       // relaxation in (0,1]
  int anderson_memory = 5;
  double anderson_reg = 1e-10;  // Tikhonov on the residual Gram matrix

  void validate() const;
};

struct FixedPointResult {
  Tensor point;
  double residual = 0.0;  // final relative residual
  int iterations = 0;
  bool converged = false;
  int anderson_fallbacks = 0;            // Picard steps taken on singular subproblems
  std::vector<double> residual_history;  // absolute residual norms per iteration
};

using FixedPointMap = std::function<Tensor(const Tensor&)>;

// x <- (1-damping) x + damping F(x). Runs outside the differentiation tape.
FixedPointResult picard_solve(const FixedPointMap& F, const Tensor& x0, const SolverConfig& cfg);

// Type-II Anderson acceleration: combine the last m iterates by the
// sum-to-one residual mix minimizing |sum a_i g_i|, Tikhonov-regularized.
FixedPointResult anderson_solve(const FixedPointMap& F, const Tensor& x0, const SolverConfig& cfg);

// dispatch on cfg.method
FixedPointResult solve(const FixedPointMap& F, const Tensor& x0, const SolverConfig& cfg);

}  // namespace deqei
