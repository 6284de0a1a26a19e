#include "deqei/solvers.hpp"

#include <cmath>
#include <deque>
#include <stdexcept>

namespace deqei {

namespace {

using Vec = std::vector<double>;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

double nrm(const Vec& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

bool finite(const Vec& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

Vec values(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

// symmetric positive solve by Gaussian elimination with partial pivoting;
// returns false when the pivot collapses
bool solve_small(std::vector<Vec>& A, Vec& b) {
  const size_t n = b.size();
  for (size_t k = 0; k < n; ++k) {
    size_t piv = k;
    for (size_t i = k + 1; i < n; ++i)
      if (std::abs(A[i][k]) > std::abs(A[piv][k])) piv = i;
    if (std::abs(A[piv][k]) < 1e-300) return false;
    std::swap(A[k], A[piv]);
    std::swap(b[k], b[piv]);
    for (size_t i = k + 1; i < n; ++i) {
      double f = A[i][k] / A[k][k];
      if (f == 0) continue;
      for (size_t j = k; j < n; ++j) A[i][j] -= f * A[k][j];
      b[i] -= f * b[k];
    }
  }
  for (size_t k = n; k-- > 0;) {
    double s = b[k];
    for (size_t j = k + 1; j < n; ++j) s -= A[k][j] * b[j];
    b[k] = s / A[k][k];
  }
  return true;
}

}  // namespace

void SolverConfig::validate() const {
  if (!(tol > 0)) fail("solver: tol must be positive");
  if (max_iter < 1) fail("solver: max_iter must be at least 1");
  if (!(damping > 0) || damping > 1) fail("solver: damping must lie in (0,1]");
  if (anderson_memory < 1) fail("solver: anderson_memory must be at least 1");
}

FixedPointResult picard_solve(const FixedPointMap& F, const Tensor& x0, const SolverConfig& cfg) {
  cfg.validate();
  NoGradGuard ng;
  FixedPointResult res;
  Vec x = values(x0);
  Shape shape = x0.shape();
  for (int it = 0; it <= cfg.max_iter; ++it) {
    Vec fx = values(F(Tensor::from(shape, x)));
    if (fx.size() != x.size()) fail("picard: map changed the iterate shape");
    if (!finite(fx)) fail("picard: non-finite iterate at iteration " + std::to_string(it));
    Vec g(x.size());
    for (size_t i = 0; i < x.size(); ++i) g[i] = fx[i] - x[i];
    double gn = nrm(g);
    res.residual_history.push_back(gn);
    res.residual = gn / (nrm(x) + 1e-12);
    res.iterations = it;
    if (res.residual <= cfg.tol) {
      res.converged = true;
      break;
    }
    if (it == cfg.max_iter) break;
    for (size_t i = 0; i < x.size(); ++i) x[i] += cfg.damping * g[i];
  }
  res.point = Tensor::from(std::move(shape), std::move(x));
  return res;
}

FixedPointResult anderson_solve(const FixedPointMap& F, const Tensor& x0,
                                const SolverConfig& cfg) {
  cfg.validate();
  NoGradGuard ng;
  FixedPointResult res;
  Shape shape = x0.shape();
  Vec x = values(x0);
  std::deque<Vec> xs, fxs, gs;  // iterate, map value, residual histories
  for (int it = 0; it <= cfg.max_iter; ++it) {
    Vec fx = values(F(Tensor::from(shape, x)));
    if (fx.size() != x.size()) fail("anderson: map changed the iterate shape");
    if (!finite(fx)) fail("anderson: non-finite iterate at iteration " + std::to_string(it));
    Vec g(x.size());
    for (size_t i = 0; i < x.size(); ++i) g[i] = fx[i] - x[i];
    double gn = nrm(g);
    res.residual_history.push_back(gn);
    res.residual = gn / (nrm(x) + 1e-12);
    res.iterations = it;
    if (res.residual <= cfg.tol) {
      res.converged = true;
      break;
    }
    if (it == cfg.max_iter) break;

    xs.push_back(x);
    fxs.push_back(fx);
    gs.push_back(std::move(g));
    while (static_cast<int>(xs.size()) > cfg.anderson_memory) {
      xs.pop_front();
      fxs.pop_front();
      gs.pop_front();
    }
    const size_t w = xs.size();

    // minimize |sum a_i g_i| subject to sum a_i = 1 via the regularized Gram
    // system (G + lam I) c = 1, a = c / sum(c)
    std::vector<Vec> G(w, Vec(w, 0.0));
    double tr = 0;
    for (size_t i = 0; i < w; ++i)
      for (size_t j = i; j < w; ++j) {
        double s = 0;
        for (size_t k = 0; k < x.size(); ++k) s += gs[i][k] * gs[j][k];
        G[i][j] = G[j][i] = s;
        if (i == j) tr += s;
      }
    double lam = cfg.anderson_reg * (tr > 0 ? tr : 1.0);
    for (size_t i = 0; i < w; ++i) G[i][i] += lam;
    Vec c(w, 1.0);
    bool ok = solve_small(G, c);
    double csum = 0;
    for (double v : c) csum += v;
    if (!ok || std::abs(csum) < 1e-300 || !finite(c)) {
      ++res.anderson_fallbacks;  // singular subproblem, plain relaxed step
      for (size_t i = 0; i < x.size(); ++i)
        x[i] = (1 - cfg.damping) * x[i] + cfg.damping * fxs.back()[i];
      continue;
    }
    Vec xn(x.size(), 0.0);
    for (size_t i = 0; i < w; ++i) {
      double a = c[i] / csum;
      for (size_t k = 0; k < x.size(); ++k)
        xn[k] += a * ((1 - cfg.damping) * xs[i][k] + cfg.damping * fxs[i][k]);
    }
    x = std::move(xn);
  }
  res.point = Tensor::from(std::move(shape), std::move(x));
  return res;
}

FixedPointResult solve(const FixedPointMap& F, const Tensor& x0, const SolverConfig& cfg) {
  switch (cfg.method) {
    case SolverConfig::Method::Picard: return picard_solve(F, x0, cfg);
    case SolverConfig::Method::Anderson: return anderson_solve(F, x0, cfg);
  }
  fail("solve: unknown method");
}

}  // namespace deqei
