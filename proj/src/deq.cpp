#include "deqei/deq.hpp"

#include <stdexcept>

namespace deqei {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

}  // namespace

Tensor grad_mc(const LinearOperator& A, const Tensor& x, const Tensor& y) {
  return scalar_mul(A.adjoint(sub(A.apply(x), y)), 2.0);
}

Tensor apply_operator(const DeqModel& model, const Tensor& x, const Tensor& y) {
  Tensor step = sub(x, scalar_mul(grad_mc(model.op, x, y), model.eta));
  switch (model.tmpl) {
    case DeqTemplate::DeProx:
      return denoise(model.arch, model.params, step);
    case DeqTemplate::DeGrad: {
      Tensor prior = sub(x, denoise(model.arch, model.params, x));
      return sub(step, scalar_mul(prior, model.eta));
    }
  }
  fail("apply_operator: unknown template");
}

Tensor backward_fixed_point(const Tensor& g, const Tensor& F_at_xhat, const Tensor& x2,
                            const SolverConfig& cfg, BackwardSolveStats* stats) {
  if (stats) stats->ran = true;
  if (!F_at_xhat.on_tape() || !depends_on(F_at_xhat, x2)) {
    // constant operator: zero Jacobian, beta* = g
    if (stats) {
      stats->iterations = 0;
      stats->residual = 0.0;
      stats->converged = true;
    }
    return g.detach();
  }
  auto map = [&](const Tensor& beta) { return add(vjp(F_at_xhat, x2, beta), g); };
  FixedPointResult res = solve(map, g, cfg);
  if (stats) {
    stats->iterations = res.iterations;
    stats->residual = res.residual;
    stats->converged = res.converged;
  }
  return res.point;
}

Tensor deq_fixed_point(const std::function<Tensor(const Tensor&)>& F, const Tensor& x0,
                       const SolverConfig& forward_cfg, const SolverConfig& backward_cfg,
                       const BackpropMode& mode, DeqPassStats* stats) {
  if (mode.tag == BackpropMode::Tag::Unrolled) {
    if (mode.unrolled_steps < 1) fail("deq: unrolled_steps must be at least 1");
    Tensor x = x0.detach();
    for (int k = 0; k < mode.unrolled_steps; ++k) x = F(x);
    if (stats) stats->forward_iterations = mode.unrolled_steps;
    return x;
  }

  FixedPointResult res = solve(F, x0, forward_cfg);  // off-tape
  if (stats) {
    stats->forward_iterations = res.iterations;
    stats->forward_residual = res.residual;
    stats->forward_converged = res.converged;
  }

  // one on-tape application captures dF/dtheta (and dF/dy for chained passes)
  Tensor xhat = F(res.point);
  if (!xhat.requires_grad()) return xhat;

  Tensor x2 = xhat.detach(/*requires_grad=*/true);
  Tensor Fx = F(x2);
  auto bw_stats = stats ? stats->backward : nullptr;
  if (mode.tag == BackpropMode::Tag::JacobianFree) {
    register_hook(xhat, [bw_stats](const Tensor& g) {
      if (bw_stats) bw_stats->ran = true;
      return g;  // the inverse-Jacobian factor is dropped entirely
    });
  } else {
    SolverConfig cfg = backward_cfg;
    register_hook(xhat, [Fx, x2, cfg, bw_stats](const Tensor& g) {
      return backward_fixed_point(g, Fx, x2, cfg, bw_stats.get());
    });
  }
  return xhat;
}

Tensor deq_forward(const DeqModel& model, const Tensor& y, const SolverConfig& forward_cfg,
                   const SolverConfig& backward_cfg, const BackpropMode& mode,
                   DeqPassStats* stats) {
  Tensor x0;
  {
    NoGradGuard ng;  // the warm start does not carry gradients
    x0 = model.op.pseudoinverse(y.detach());
  }
  auto F = [&](const Tensor& x) { return apply_operator(model, x, y); };
  return deq_fixed_point(F, x0, forward_cfg, backward_cfg, mode, stats);
}

double deq_lipschitz_estimate(const DeqModel& model, const Tensor& y, int n_pairs, uint64_t seed) {
  Tensor yd = y.detach();
  return lipschitz_estimate(
      [&](const Tensor& x) { return apply_operator(model, x, yd); }, model.op.input_shape(),
      n_pairs, seed);
}

}  // namespace deqei
