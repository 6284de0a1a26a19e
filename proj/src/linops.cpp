#include "deqei/linops.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace deqei {

namespace {

using Vec = std::vector<double>;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

// ---- rotation ---------------------------------------------------------------

std::vector<GroupElement> rotation_group(int order) {
  if (order < 1 || 360 % order != 0) fail("rotation group order must divide 360");
  std::vector<GroupElement> g(order);
  for (int i = 0; i < order; ++i) g[i].angle_degrees = i * (360.0 / order);
  return g;
}

namespace {

Tensor rotate_quarter_turns(const Tensor& x, int k) {
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const int Ho = (k % 2 == 0) ? H : W;
  const int Wo = (k % 2 == 0) ? W : H;
  const size_t n = x.data().size();
  std::vector<int64_t> perm(n);  // out[idx] = in[perm[idx]]
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        int si, sj;
        switch (k) {
          case 1: si = j, sj = W - 1 - i; break;           // quarter turn
          case 2: si = H - 1 - i, sj = W - 1 - j; break;   // half turn
          default: si = H - 1 - j, sj = i; break;          // three quarters
        }
        perm[(static_cast<size_t>(c) * Ho + i) * Wo + j] =
            (static_cast<size_t>(c) * H + si) * W + sj;
      }
  Vec out(n);
  for (size_t i = 0; i < n; ++i) out[i] = x.data()[static_cast<size_t>(perm[i])];
  // the adjoint of a permutation is its inverse
  auto inv = std::make_shared<std::vector<int64_t>>(n);
  for (size_t i = 0; i < n; ++i) (*inv)[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
  return custom_linear_op(
      x, {C, Ho, Wo}, std::move(out),
      [inv, n](const Vec& g) {
        Vec gx(n);
        for (size_t i = 0; i < n; ++i) gx[i] = g[static_cast<size_t>((*inv)[i])];
        return gx;
      },
      "rotate90");
}

struct BilinearTap {
  int64_t src;
  double w;
};

// gather taps for rotating by `deg` about the image center, zeros outside
std::vector<std::vector<BilinearTap>> rotation_taps(int N, double deg) {
  const double th = deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double ctr = (N - 1) / 2.0;
  std::vector<std::vector<BilinearTap>> taps(static_cast<size_t>(N) * N);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j) {
      // source point = R(-th) (p - ctr) + ctr
      double di = i - ctr, dj = j - ctr;
      double si = c * di + s * dj + ctr;
      double sj = -s * di + c * dj + ctr;
      int r0 = static_cast<int>(std::floor(si));
      int c0 = static_cast<int>(std::floor(sj));
      double fr = si - r0, fc = sj - c0;
      auto& t = taps[static_cast<size_t>(i) * N + j];
      for (int dr = 0; dr <= 1; ++dr)
        for (int dc = 0; dc <= 1; ++dc) {
          int rr = r0 + dr, cc = c0 + dc;
          if (rr < 0 || rr >= N || cc < 0 || cc >= N) continue;
          double w = (dr ? fr : 1 - fr) * (dc ? fc : 1 - fc);
          if (w != 0) t.push_back({static_cast<int64_t>(rr) * N + cc, w});
        }
    }
  return taps;
}

Tensor rotate_bilinear(const Tensor& x, double deg) {
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  if (H != W) fail("rotate: non-90-degree rotation requires a square image");
  const int N = H;
  auto taps = std::make_shared<std::vector<std::vector<BilinearTap>>>(rotation_taps(N, deg));
  const size_t plane = static_cast<size_t>(N) * N;
  Vec out(x.data().size(), 0.0);
  for (int c = 0; c < C; ++c) {
    const double* src = x.data().data() + c * plane;
    double* dst = out.data() + c * plane;
    for (size_t p = 0; p < plane; ++p)
      for (const auto& t : (*taps)[p]) dst[p] += t.w * src[t.src];
  }
  return custom_linear_op(
      x, x.shape(), std::move(out),
      [taps, C, plane](const Vec& g) {
        Vec gx(g.size(), 0.0);
        for (int c = 0; c < C; ++c) {
          const double* gs = g.data() + c * plane;
          double* gd = gx.data() + c * plane;
          for (size_t p = 0; p < plane; ++p)
            for (const auto& t : (*taps)[p]) gd[t.src] += t.w * gs[p];
        }
        return gx;
      },
      "rotate-bilinear");
}

}  // namespace

Tensor rotate(const Tensor& x, const GroupElement& g) {
  if (x.shape().size() != 3) fail("rotate: expected a [C,H,W] image, got " + shape_str(x.shape()));
  if (g.exact()) {
    long long q = std::llround(g.angle_degrees / 90.0) % 4;
    int k = static_cast<int>((q + 4) % 4);
    if (k == 0) return x;
    return rotate_quarter_turns(x, k);
  }
  return rotate_bilinear(x, g.angle_degrees);
}

Tensor add_noise(const Tensor& y, const NoiseModel& nm) {
  if (nm.kind == NoiseModel::Kind::None) return y;
  if (nm.sigma < 0) fail("add_noise: negative sigma");
  Rng rng(nm.seed);
  Vec z(y.data().size());
  for (double& v : z) v = nm.sigma * rng.normal();
  return add(y, Tensor::from(y.shape(), std::move(z)));
}

// ---- operator implementations -------------------------------------------------

struct LinearOperator::Impl {
  Kind kind;
  Shape input_shape;
  int m = 0;

  virtual ~Impl() = default;
  virtual Vec apply_raw(const Vec& x) const = 0;
  virtual Vec adjoint_raw(const Vec& y) const = 0;
  // orthonormal-row operators: A† = Aᵀ and (A†)ᵀ = A
  virtual Vec pinv_raw(const Vec& y, bool* conv) const {
    if (conv) *conv = true;
    return adjoint_raw(y);
  }
  virtual Vec pinv_t_raw(const Vec& g, bool* conv) const {
    if (conv) *conv = true;
    return apply_raw(g);
  }
  virtual std::vector<uint8_t> mask_image() const { return {}; }
};

namespace {

// conjugate gradient on an SPD map
Vec cg_spd(const std::function<Vec(const Vec&)>& M, const Vec& b, double tol, int max_iter,
           bool* conv) {
  Vec z(b.size(), 0.0);
  double bnorm = std::sqrt(dot(b, b));
  if (conv) *conv = true;
  if (bnorm == 0) return z;
  Vec r = b, p = b;
  double rs = dot(r, r);
  for (int it = 0; it < max_iter; ++it) {
    Vec Mp = M(p);
    double pMp = dot(p, Mp);
    if (pMp <= 0) break;  // numerically singular
    double alpha = rs / pMp;
    for (size_t i = 0; i < z.size(); ++i) z[i] += alpha * p[i];
    for (size_t i = 0; i < r.size(); ++i) r[i] -= alpha * Mp[i];
    double rs_new = dot(r, r);
    if (std::sqrt(rs_new) / bnorm <= tol) return z;
    double beta = rs_new / rs;
    rs = rs_new;
    for (size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
  }
  if (conv) *conv = false;
  return z;
}

// normal equations (A Aᵀ) z = y, the row-space side
Vec cg_normal(const LinearOperator::Impl& A, const Vec& y, double tol, int max_iter, bool* conv) {
  return cg_spd([&](const Vec& p) { return A.apply_raw(A.adjoint_raw(p)); }, y, tol, max_iter,
                conv);
}

constexpr double kCgTol = 1e-8;
constexpr int kCgMaxIter = 500;

struct DenseImpl final : LinearOperator::Impl {
  std::vector<double> mat;  // m x n row-major
  int n = 0;

  Vec apply_raw(const Vec& x) const override {
    Vec y(static_cast<size_t>(m), 0.0);
    for (int i = 0; i < m; ++i) {
      const double* row = mat.data() + static_cast<size_t>(i) * n;
      double s = 0;
      for (int j = 0; j < n; ++j) s += row[j] * x[j];
      y[static_cast<size_t>(i)] = s;
    }
    return y;
  }
  Vec adjoint_raw(const Vec& y) const override {
    Vec x(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < m; ++i) {
      const double* row = mat.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) x[j] += row[j] * y[static_cast<size_t>(i)];
    }
    return x;
  }
  // pick the non-singular side of the normal equations by shape:
  // wide: A† = Aᵀ(AAᵀ)⁻¹, tall: A† = (AᵀA)⁻¹Aᵀ
  Vec pinv_raw(const Vec& y, bool* conv) const override {
    if (m <= n) return adjoint_raw(cg_normal(*this, y, kCgTol, kCgMaxIter, conv));
    auto gram = [&](const Vec& p) { return adjoint_raw(apply_raw(p)); };
    return cg_spd(gram, adjoint_raw(y), kCgTol, kCgMaxIter, conv);
  }
  Vec pinv_t_raw(const Vec& g, bool* conv) const override {
    if (m <= n) return cg_normal(*this, apply_raw(g), kCgTol, kCgMaxIter, conv);
    auto gram = [&](const Vec& p) { return adjoint_raw(apply_raw(p)); };
    return apply_raw(cg_spd(gram, g, kCgTol, kCgMaxIter, conv));
  }
};

struct InpaintingImpl final : LinearOperator::Impl {
  std::vector<int64_t> kept;  // pixel indices within one (H,W) plane
  int C = 0;
  int64_t plane = 0;

  Vec apply_raw(const Vec& x) const override {
    Vec y(static_cast<size_t>(m));
    size_t k = 0;
    for (int c = 0; c < C; ++c)
      for (int64_t idx : kept) y[k++] = x[static_cast<size_t>(c * plane + idx)];
    return y;
  }
  Vec adjoint_raw(const Vec& y) const override {
    Vec x(static_cast<size_t>(C * plane), 0.0);
    size_t k = 0;
    for (int c = 0; c < C; ++c)
      for (int64_t idx : kept) x[static_cast<size_t>(c * plane + idx)] = y[k++];
    return x;
  }
  std::vector<uint8_t> mask_image() const override {
    std::vector<uint8_t> img(static_cast<size_t>(plane), 0);
    for (int64_t idx : kept) img[static_cast<size_t>(idx)] = 1;
    return img;
  }
};

struct FourierImpl final : LinearOperator::Impl {
  int H = 0, W = 0;
  std::vector<int> kept;  // frequency indices u*W+v
  // unitary DFT twiddles e^{-2pi i u k / N} / sqrt(N), per axis
  std::vector<double> rowc, rows, colc, cols;

  void build_tables() {
    auto fill = [](std::vector<double>& c, std::vector<double>& s, int N) {
      c.resize(static_cast<size_t>(N) * N);
      s.resize(static_cast<size_t>(N) * N);
      double norm = 1.0 / std::sqrt(static_cast<double>(N));
      for (int u = 0; u < N; ++u)
        for (int i = 0; i < N; ++i) {
          double th = -2.0 * std::numbers::pi * static_cast<double>(u) * i / N;
          c[static_cast<size_t>(u) * N + i] = std::cos(th) * norm;
          s[static_cast<size_t>(u) * N + i] = std::sin(th) * norm;
        }
    };
    fill(rowc, rows, H);
    fill(colc, cols, W);
  }

  // forward unitary DFT of the 2-channel (re,im) image, gather kept frequencies
  Vec apply_raw(const Vec& x) const override {
    const size_t plane = static_cast<size_t>(H) * W;
    Vec tre(plane, 0.0), tim(plane, 0.0);  // after column transform
    for (int i = 0; i < H; ++i)
      for (int v = 0; v < W; ++v) {
        double sre = 0, sim = 0;
        const double* wc = colc.data() + static_cast<size_t>(v) * W;
        const double* ws = cols.data() + static_cast<size_t>(v) * W;
        for (int j = 0; j < W; ++j) {
          double zr = x[static_cast<size_t>(i) * W + j];
          double zi = x[plane + static_cast<size_t>(i) * W + j];
          sre += zr * wc[j] - zi * ws[j];
          sim += zr * ws[j] + zi * wc[j];
        }
        tre[static_cast<size_t>(i) * W + v] = sre;
        tim[static_cast<size_t>(i) * W + v] = sim;
      }
    const size_t K = kept.size();
    Vec y(2 * K, 0.0);
    for (size_t k = 0; k < K; ++k) {
      int u = kept[k] / W, v = kept[k] % W;
      const double* wc = rowc.data() + static_cast<size_t>(u) * H;
      const double* ws = rows.data() + static_cast<size_t>(u) * H;
      double sre = 0, sim = 0;
      for (int i = 0; i < H; ++i) {
        double tr = tre[static_cast<size_t>(i) * W + v];
        double ti = tim[static_cast<size_t>(i) * W + v];
        sre += tr * wc[i] - ti * ws[i];
        sim += tr * ws[i] + ti * wc[i];
      }
      y[k] = sre;
      y[K + k] = sim;
    }
    return y;
  }

  // zero-fill kept frequencies, inverse unitary DFT, split channels
  Vec adjoint_raw(const Vec& y) const override {
    const size_t plane = static_cast<size_t>(H) * W;
    const size_t K = kept.size();
    Vec zre(plane, 0.0), zim(plane, 0.0);
    for (size_t k = 0; k < K; ++k) {
      zre[static_cast<size_t>(kept[k])] = y[k];
      zim[static_cast<size_t>(kept[k])] = y[K + k];
    }
    // inverse uses conjugate twiddles; row axis first
    Vec tre(plane, 0.0), tim(plane, 0.0);
    for (int v = 0; v < W; ++v)
      for (int i = 0; i < H; ++i) {
        double sre = 0, sim = 0;
        for (int u = 0; u < H; ++u) {
          double zr = zre[static_cast<size_t>(u) * W + v];
          double zi = zim[static_cast<size_t>(u) * W + v];
          if (zr == 0 && zi == 0) continue;
          double c = rowc[static_cast<size_t>(u) * H + i];
          double s = -rows[static_cast<size_t>(u) * H + i];
          sre += zr * c - zi * s;
          sim += zr * s + zi * c;
        }
        tre[static_cast<size_t>(i) * W + v] = sre;
        tim[static_cast<size_t>(i) * W + v] = sim;
      }
    Vec x(2 * plane, 0.0);
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double sre = 0, sim = 0;
        for (int v = 0; v < W; ++v) {
          double tr = tre[static_cast<size_t>(i) * W + v];
          double ti = tim[static_cast<size_t>(i) * W + v];
          double c = colc[static_cast<size_t>(v) * W + j];
          double s = -cols[static_cast<size_t>(v) * W + j];
          sre += tr * c - ti * s;
          sim += tr * s + ti * c;
        }
        x[static_cast<size_t>(i) * W + j] = sre;
        x[plane + static_cast<size_t>(i) * W + j] = sim;
      }
    return x;
  }

  std::vector<uint8_t> mask_image() const override {
    std::vector<uint8_t> img(static_cast<size_t>(H) * W, 0);
    for (int idx : kept) img[static_cast<size_t>(idx)] = 1;
    return img;
  }
};

struct TomoImpl final : LinearOperator::Impl {
  int H = 0, W = 0, D = 0;
  std::vector<double> angles;
  int n_steps = 0;

  // bilinear line integrals at unit steps; the adjoint scatters with the same
  // weights, so it is the exact transpose
  void trace(const Vec& in, Vec& out, bool forward) const {
    const double cr = (H - 1) / 2.0, cc = (W - 1) / 2.0;
    const double off = (n_steps - 1) / 2.0;
    for (size_t a = 0; a < angles.size(); ++a) {
      double th = angles[a] * std::numbers::pi / 180.0;
      double cth = std::cos(th), sth = std::sin(th);
      for (int t = 0; t < D; ++t) {
        double s = t - (D - 1) / 2.0;
        size_t ray = a * static_cast<size_t>(D) + t;
        for (int q = 0; q < n_steps; ++q) {
          double tau = q - off;
          double col = cc + s * cth - tau * sth;
          double row = cr + s * sth + tau * cth;
          int r0 = static_cast<int>(std::floor(row));
          int c0 = static_cast<int>(std::floor(col));
          double fr = row - r0, fc = col - c0;
          for (int dr = 0; dr <= 1; ++dr)
            for (int dc = 0; dc <= 1; ++dc) {
              int rr = r0 + dr, ccol = c0 + dc;
              if (rr < 0 || rr >= H || ccol < 0 || ccol >= W) continue;
              double w = (dr ? fr : 1 - fr) * (dc ? fc : 1 - fc);
              if (w == 0) continue;
              size_t pix = static_cast<size_t>(rr) * W + ccol;
              if (forward)
                out[ray] += w * in[pix];
              else
                out[pix] += w * in[ray];
            }
        }
      }
    }
  }

  Vec apply_raw(const Vec& x) const override {
    Vec y(static_cast<size_t>(m), 0.0);
    trace(x, y, true);
    return y;
  }
  Vec adjoint_raw(const Vec& y) const override {
    Vec x(static_cast<size_t>(H) * W, 0.0);
    trace(y, x, false);
    return x;
  }
  Vec pinv_raw(const Vec& y, bool* conv) const override {
    return adjoint_raw(cg_normal(*this, y, kCgTol, kCgMaxIter, conv));
  }
  Vec pinv_t_raw(const Vec& g, bool* conv) const override {
    return cg_normal(*this, apply_raw(g), kCgTol, kCgMaxIter, conv);
  }
};

}  // namespace

// ---- LinearOperator facade ---------------------------------------------------

LinearOperator::Kind LinearOperator::kind() const { return impl_->kind; }

const char* LinearOperator::kind_name() const {
  switch (impl_->kind) {
    case Kind::Dense: return "dense";
    case Kind::Inpainting: return "inpainting";
    case Kind::MaskedFourier: return "masked-fourier";
    case Kind::Tomography: return "tomography";
  }
  return "?";
}

const Shape& LinearOperator::input_shape() const { return impl_->input_shape; }

int LinearOperator::output_dim() const { return impl_->m; }

Tensor LinearOperator::apply(const Tensor& x) const {
  if (x.shape() != impl_->input_shape)
    fail(std::string(kind_name()) + " apply: expected input " + shape_str(impl_->input_shape) +
         ", got " + shape_str(x.shape()));
  Vec xv(x.data().begin(), x.data().end());
  Vec y = impl_->apply_raw(xv);
  auto impl = impl_;
  return custom_linear_op(
      x, {impl_->m}, std::move(y), [impl](const Vec& g) { return impl->adjoint_raw(g); },
      "linop-apply");
}

Tensor LinearOperator::adjoint(const Tensor& y) const {
  if (y.size() != impl_->m)
    fail(std::string(kind_name()) + " adjoint: expected " + std::to_string(impl_->m) +
         " measurements, got " + std::to_string(y.size()));
  Vec yv(y.data().begin(), y.data().end());
  Vec x = impl_->adjoint_raw(yv);
  auto impl = impl_;
  return custom_linear_op(
      y, impl_->input_shape, std::move(x), [impl](const Vec& g) { return impl->apply_raw(g); },
      "linop-adjoint");
}

Tensor LinearOperator::pseudoinverse(const Tensor& y, bool* converged) const {
  if (y.size() != impl_->m)
    fail(std::string(kind_name()) + " pseudoinverse: expected " + std::to_string(impl_->m) +
         " measurements, got " + std::to_string(y.size()));
  Vec yv(y.data().begin(), y.data().end());
  Vec x = impl_->pinv_raw(yv, converged);
  auto impl = impl_;
  return custom_linear_op(
      y, impl_->input_shape, std::move(x),
      [impl](const Vec& g) { return impl->pinv_t_raw(g, nullptr); }, "linop-pseudoinverse");
}

double LinearOperator::norm_estimate(int iters, uint64_t seed) const {
  Rng rng(seed, "opnorm");
  Vec x(static_cast<size_t>(shape_numel(impl_->input_shape)));
  for (double& v : x) v = rng.normal();
  double lambda = 0;
  for (int it = 0; it < iters; ++it) {
    Vec ax = impl_->adjoint_raw(impl_->apply_raw(x));
    double nrm = std::sqrt(dot(ax, ax));
    if (nrm == 0) return 0;
    lambda = std::sqrt(dot(x, ax) / dot(x, x));
    for (size_t i = 0; i < x.size(); ++i) x[i] = ax[i] / nrm;
  }
  return lambda;
}

LinearOperator LinearOperator::dense(Shape input_shape, int output_dim,
                                     std::vector<double> matrix) {
  auto impl = std::make_shared<DenseImpl>();
  impl->kind = Kind::Dense;
  impl->n = static_cast<int>(shape_numel(input_shape));
  impl->input_shape = std::move(input_shape);
  impl->m = output_dim;
  if (static_cast<int64_t>(matrix.size()) != static_cast<int64_t>(output_dim) * impl->n)
    fail("dense operator: matrix size does not match dimensions");
  impl->mat = std::move(matrix);
  return LinearOperator(impl);
}

LinearOperator LinearOperator::inpainting(Shape input_shape, std::vector<uint8_t> keep) {
  if (input_shape.size() != 3) fail("inpainting: input shape must be [C,H,W]");
  auto impl = std::make_shared<InpaintingImpl>();
  impl->kind = Kind::Inpainting;
  impl->C = input_shape[0];
  impl->plane = static_cast<int64_t>(input_shape[1]) * input_shape[2];
  if (static_cast<int64_t>(keep.size()) != impl->plane)
    fail("inpainting: mask size does not match image plane");
  for (int64_t i = 0; i < impl->plane; ++i)
    if (keep[static_cast<size_t>(i)]) impl->kept.push_back(i);
  impl->input_shape = std::move(input_shape);
  impl->m = static_cast<int>(impl->C * static_cast<int64_t>(impl->kept.size()));
  return LinearOperator(impl);
}

namespace {

std::shared_ptr<FourierImpl> make_fourier(int H, int W, std::vector<int> kept) {
  auto impl = std::make_shared<FourierImpl>();
  impl->kind = LinearOperator::Kind::MaskedFourier;
  impl->input_shape = {2, H, W};
  impl->H = H;
  impl->W = W;
  impl->kept = std::move(kept);
  impl->m = static_cast<int>(2 * impl->kept.size());
  impl->build_tables();
  return impl;
}

}  // namespace

LinearOperator LinearOperator::masked_fourier(int H, int W, double acceleration, int center_radius,
                                              uint64_t mask_seed) {
  if (acceleration < 1.0) fail("masked-fourier: acceleration must be >= 1");
  // wraparound distance to DC per frequency
  std::vector<double> dist(static_cast<size_t>(H) * W);
  std::vector<char> center(static_cast<size_t>(H) * W, 0);
  int n_center = 0;
  for (int u = 0; u < H; ++u)
    for (int v = 0; v < W; ++v) {
      double du = std::min(u, H - u), dv = std::min(v, W - v);
      double d = std::hypot(du, dv);
      dist[static_cast<size_t>(u) * W + v] = d;
      if (d <= center_radius) {
        center[static_cast<size_t>(u) * W + v] = 1;
        ++n_center;
      }
    }
  double target = static_cast<double>(H) * W / acceleration;
  auto expected = [&](double s) {
    double e = n_center;
    for (size_t i = 0; i < dist.size(); ++i)
      if (!center[i]) e += std::exp(-dist[i] * dist[i] / (2 * s * s));
    return e;
  };
  // calibrate the Gaussian width so the expected kept count hits the target
  double s_width = 1e-3;
  if (target > n_center) {
    double lo = 1e-3, hi = 2.0 * std::max(H, W);
    if (expected(hi) < target) {
      s_width = hi;
    } else {
      for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        (expected(mid) < target ? lo : hi) = mid;
      }
      s_width = 0.5 * (lo + hi);
    }
  }
  Rng rng(mask_seed, "fourier-mask");
  std::vector<int> kept;
  for (int u = 0; u < H; ++u)
    for (int v = 0; v < W; ++v) {
      size_t i = static_cast<size_t>(u) * W + v;
      if (center[i]) {
        kept.push_back(static_cast<int>(i));
        continue;
      }
      double p = target > n_center ? std::exp(-dist[i] * dist[i] / (2 * s_width * s_width)) : 0.0;
      if (rng.uniform() < p) kept.push_back(static_cast<int>(i));
    }
  return LinearOperator(make_fourier(H, W, std::move(kept)));
}

LinearOperator LinearOperator::masked_fourier_full(int H, int W) {
  std::vector<int> kept(static_cast<size_t>(H) * W);
  for (size_t i = 0; i < kept.size(); ++i) kept[i] = static_cast<int>(i);
  return LinearOperator(make_fourier(H, W, std::move(kept)));
}

LinearOperator LinearOperator::tomography(Shape input_shape, std::vector<double> angles_degrees,
                                          int detector_count) {
  if (input_shape.size() != 3 || input_shape[0] != 1)
    fail("tomography: input shape must be [1,H,W]");
  if (angles_degrees.empty()) fail("tomography: need at least one projection angle");
  if (detector_count < 1) fail("tomography: detector count must be positive");
  auto impl = std::make_shared<TomoImpl>();
  impl->kind = Kind::Tomography;
  impl->H = input_shape[1];
  impl->W = input_shape[2];
  impl->D = detector_count;
  impl->angles = std::move(angles_degrees);
  impl->n_steps = 2 * static_cast<int>(std::ceil(std::hypot(impl->H, impl->W) / 2.0)) + 1;
  impl->input_shape = std::move(input_shape);
  impl->m = static_cast<int>(impl->angles.size()) * detector_count;
  return LinearOperator(impl);
}

std::vector<uint8_t> LinearOperator::mask_image() const { return impl_->mask_image(); }

void write_pgm(const std::string& path, const std::vector<double>& pixels, int height, int width) {
  if (static_cast<int64_t>(pixels.size()) != static_cast<int64_t>(height) * width)
    fail("write_pgm: pixel count does not match dimensions");
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("write_pgm: cannot open " + path);
  f << "P5\n" << width << " " << height << "\n255\n";
  for (double v : pixels) {
    int q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    f.put(static_cast<char>(q));
  }
  if (!f) fail("write_pgm: write failed for " + path);
}

}  // namespace deqei
