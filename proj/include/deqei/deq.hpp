#pragma once

#include <functional>
#include <memory>

#include "deqei/linops.hpp"
#include "deqei/models.hpp"
#include "deqei/solvers.hpp"
#include "deqei/tensor.hpp"

namespace deqei {

// How gradients flow through the equilibrium.
//  - Implicit: the hook solves beta = beta J + g before it reaches dF/dtheta
//  - JacobianFree: the hook passes g through unchanged
//  - Unrolled: no equilibrium solve; K on-tape applications (gradient oracle)
struct BackpropMode {
  enum class Tag { Implicit, JacobianFree, Unrolled };
  Tag tag = Tag::Implicit;
  int unrolled_steps = 1;

  static BackpropMode implicit() { return {Tag::Implicit, 1}; }
  static BackpropMode jacobian_free() { return {Tag::JacobianFree, 1}; }
  static BackpropMode unrolled(int k) { return {Tag::Unrolled, k}; }
};

enum class DeqTemplate { DeProx, DeGrad };

struct DeqModel {
  DeqTemplate tmpl = DeqTemplate::DeProx;
  DenoiserArch arch;
  ParameterSet params;  // shallow view; tensors are shared
  double eta = 0.1;
  LinearOperator op;
};

// Solver work accounting for one DEQ pass. The backward record is filled in
// when the loss's backward() reaches this pass's hook.
struct BackwardSolveStats {
  int iterations = 0;
  double residual = 0.0;
  bool converged = true;
  bool ran = false;
};

struct DeqPassStats {
  int forward_iterations = 0;
  double forward_residual = 0.0;
  bool forward_converged = true;
  std::shared_ptr<BackwardSolveStats> backward = std::make_shared<BackwardSolveStats>();
};

// 2 A^T (A x - y), the measurement-consistency gradient shared by both
// operator templates
Tensor grad_mc(const LinearOperator& A, const Tensor& x, const Tensor& y);

// One application of the operator template, differentiable in x, y and theta.
//   DeProx: D(x - eta * grad_mc)
//   DeGrad: x - eta * grad_mc - eta * (x - D(x))
Tensor apply_operator(const DeqModel& model, const Tensor& x, const Tensor& y);

// Core equilibrium layer over an arbitrary taped map. Solves the fixed point
// off-tape, re-applies F once on-tape, and registers the gradient hook per
// the backprop mode. In unrolled mode, runs K on-tape applications from x0.
Tensor deq_fixed_point(const std::function<Tensor(const Tensor&)>& F, const Tensor& x0,
                       const SolverConfig& forward_cfg, const SolverConfig& backward_cfg,
                       const BackpropMode& mode, DeqPassStats* stats = nullptr);

// Full reconstruction: x0 = A† y, then the equilibrium of the model template.
Tensor deq_forward(const DeqModel& model, const Tensor& y, const SolverConfig& forward_cfg,
                   const SolverConfig& backward_cfg, const BackpropMode& mode,
                   DeqPassStats* stats = nullptr);

// beta* = Fix{ beta -> beta dF/dx|_xhat + g }, the linear backward fixed point.
// F_at_xhat is a taped application of F at a detached re-marked copy x2 of the
// equilibrium; the product beta J is computed by vjp without materializing J.
Tensor backward_fixed_point(const Tensor& g, const Tensor& F_at_xhat, const Tensor& x2,
                            const SolverConfig& cfg, BackwardSolveStats* stats = nullptr);

// empirical contraction factor of x -> F(x; y) at random pairs
double deq_lipschitz_estimate(const DeqModel& model, const Tensor& y, int n_pairs, uint64_t seed);

}  // namespace deqei
