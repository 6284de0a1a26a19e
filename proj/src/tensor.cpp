#include "deqei/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace deqei {

namespace {

thread_local bool g_grad_enabled = true;

// Implicit graph for ops whose inputs carry no tape yet (parameter leaves).
// backward() releases it, giving the tape a per-forward-pass lifetime.
thread_local std::shared_ptr<Tape> g_current_tape;

using Vec = std::vector<double>;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) {
    if (e < 0) fail("negative extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto d = std::make_shared<TensorData>();
  int64_t n = shape_numel(shape);
  d->shape = std::move(shape);
  d->values = std::make_shared<Vec>(static_cast<size_t>(n), value);
  return Tensor(std::move(d));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    fail("tensor shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
         " values");
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values = std::make_shared<Vec>(std::move(values));
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!d_) fail("use of undefined tensor");
  return d_->shape;
}

int64_t Tensor::size() const { return d_ ? static_cast<int64_t>(d_->values->size()) : 0; }

double Tensor::item() const {
  if (size() != 1) fail("item() on tensor of size " + std::to_string(size()));
  return (*d_->values)[0];
}

double Tensor::at(int64_t i) const { return (*d_->values)[static_cast<size_t>(i)]; }

std::span<const double> Tensor::data() const {
  if (!d_) return {};
  return {d_->values->data(), d_->values->size()};
}

std::vector<double>& Tensor::mutable_values() {
  if (!d_) fail("mutable_values() on undefined tensor");
  if (d_->tape) fail("cannot mutate a tensor produced by a primitive");
  return *d_->values;
}

bool Tensor::requires_grad() const { return d_ && d_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool rg) {
  if (!d_) fail("set_requires_grad on undefined tensor");
  if (d_->tape) fail("set_requires_grad on a tensor with tape history; detach first");
  d_->requires_grad = rg;
  return *this;
}

Tensor& Tensor::set_name(std::string name) {
  if (!d_) fail("set_name on undefined tensor");
  d_->name = std::move(name);
  return *this;
}

const std::string& Tensor::name() const {
  static const std::string empty;
  return d_ ? d_->name : empty;
}

Tensor Tensor::detach(bool requires_grad) const {
  if (!d_) fail("detach of undefined tensor");
  auto d = std::make_shared<TensorData>();
  d->shape = d_->shape;
  d->values = std::make_shared<Vec>(*d_->values);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

bool Tensor::on_tape() const { return d_ && d_->tape != nullptr; }

std::shared_ptr<Tape> Tensor::tape() const { return d_ ? d_->tape : nullptr; }

int Tensor::node() const { return d_ ? d_->node : -1; }

// ---- grad mode ----------------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tape ----------------------------------------------------------------------

int Tape::add_node(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf_id(const std::shared_ptr<TensorData>& leaf) {
  auto it = leaf_ids_.find(leaf.get());
  if (it != leaf_ids_.end()) return it->second;
  Node n;
  n.op = "leaf";
  n.shape = leaf->shape;
  n.is_leaf = true;
  n.leaf_name = leaf->name;
  n.leaf_requires_grad = leaf->requires_grad;
  n.leaf_data = leaf;
  int id = add_node(std::move(n));
  leaf_ids_.emplace(leaf.get(), id);
  return id;
}

int Tape::find_leaf(const TensorData* leaf) const {
  auto it = leaf_ids_.find(leaf);
  return it == leaf_ids_.end() ? -1 : it->second;
}

void Tape::set_hook(int node_id, HookFn hook) {
  if (hooks_.count(node_id)) fail("a hook is already registered on this tensor");
  hooks_.emplace(node_id, std::move(hook));
}

const Tape::HookFn* Tape::hook(int node_id) const {
  auto it = hooks_.find(node_id);
  return it == hooks_.end() ? nullptr : &it->second;
}

// ---- op recording ---------------------------------------------------------------

class OpRecorder {
 public:
  OpRecorder(const char* op, std::initializer_list<const Tensor*> inputs) : op_(op) {
    if (!g_grad_enabled) return;
    for (const Tensor* t : inputs)
      if (t->defined() && t->requires_grad()) {
        record_ = true;
        break;
      }
    if (!record_) return;
    for (const Tensor* t : inputs) {
      if (t->defined() && t->on_tape()) {
        if (tape_ && tape_ != t->tape())
          fail(std::string(op_) + ": inputs belong to different tapes");
        tape_ = t->tape();
      }
    }
    if (!tape_) {
      if (!g_current_tape) g_current_tape = std::make_shared<Tape>();
      tape_ = g_current_tape;
    }
    for (const Tensor* t : inputs) {
      if (!t->defined() || !t->requires_grad()) {
        parents_.push_back(-1);
      } else if (t->on_tape()) {
        parents_.push_back(t->d_->node);
      } else {
        parents_.push_back(tape_->leaf_id(t->d_));
      }
    }
  }

  bool recording() const { return record_; }
  bool needs(size_t i) const { return record_ && parents_[i] >= 0; }

  // shared view of a tensor's storage for capture in VJP closures
  static std::shared_ptr<const std::vector<double>> values_of(const Tensor& t) {
    return t.d_->values;
  }

  Tensor finish(Shape out_shape, Vec out_values, Tape::VjpFn vjp) {
    auto d = std::make_shared<TensorData>();
    if (shape_numel(out_shape) != static_cast<int64_t>(out_values.size()))
      fail(std::string(op_) + ": internal shape/value mismatch");
    d->shape = std::move(out_shape);
    d->values = std::make_shared<Vec>(std::move(out_values));
    if (record_) {
      Tape::Node n;
      n.op = op_;
      n.shape = d->shape;
      n.parents = parents_;
      n.vjp = std::move(vjp);
      d->requires_grad = true;
      d->tape = tape_;
      d->node = tape_->add_node(std::move(n));
    }
    return Tensor(std::move(d));
  }

 private:
  const char* op_;
  std::shared_ptr<Tape> tape_;
  std::vector<int> parents_;
  bool record_ = false;
};

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
}

std::shared_ptr<const Vec> values_of(const Tensor& t) { return OpRecorder::values_of(t); }

}  // namespace

// ---- primitives ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  OpRecorder rec("add", {&a, &b});
  Vec out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return rec.finish(a.shape(), std::move(out), [](const Vec& g) {
    return std::vector<Vec>{g, g};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("subtract", a, b);
  OpRecorder rec("subtract", {&a, &b});
  Vec out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return rec.finish(a.shape(), std::move(out), [](const Vec& g) {
    Vec gb(g.size());
    for (size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
    return std::vector<Vec>{g, std::move(gb)};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("elementwise-multiply", a, b);
  OpRecorder rec("elementwise-multiply", {&a, &b});
  auto ad = a.data(), bd = b.data();
  Vec out(ad.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  auto av = values_of(a);
  auto bv = values_of(b);
  bool na = rec.needs(0), nb = rec.needs(1);
  return rec.finish(a.shape(), std::move(out), [av, bv, na, nb](const Vec& g) {
    std::vector<Vec> out(2);
    if (na) {
      out[0].resize(g.size());
      for (size_t i = 0; i < g.size(); ++i) out[0][i] = g[i] * (*bv)[i];
    }
    if (nb) {
      out[1].resize(g.size());
      for (size_t i = 0; i < g.size(); ++i) out[1][i] = g[i] * (*av)[i];
    }
    return out;
  });
}

Tensor scalar_mul(const Tensor& x, double c) {
  OpRecorder rec("scalar-multiply", {&x});
  auto xd = x.data();
  Vec out(xd.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * c;
  return rec.finish(x.shape(), std::move(out), [c](const Vec& g) {
    Vec gx(g.size());
    for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * c;
    return std::vector<Vec>{std::move(gx)};
  });
}

Tensor scalar_mul(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) fail("scalar-multiply: scalar operand has size " + std::to_string(s.size()));
  OpRecorder rec("scalar-multiply", {&x, &s});
  double c = s.item();
  auto xd = x.data();
  Vec out(xd.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * c;
  auto xv = values_of(x);
  bool nx = rec.needs(0), ns = rec.needs(1);
  return rec.finish(x.shape(), std::move(out), [xv, c, nx, ns](const Vec& g) {
    std::vector<Vec> out(2);
    if (nx) {
      out[0].resize(g.size());
      for (size_t i = 0; i < g.size(); ++i) out[0][i] = g[i] * c;
    }
    if (ns) {
      double acc = 0;
      for (size_t i = 0; i < g.size(); ++i) acc += g[i] * (*xv)[i];
      out[1] = {acc};
    }
    return out;
  });
}

Tensor add_scalar(const Tensor& x, double c) {
  OpRecorder rec("add-scalar", {&x});
  Vec out(x.data().begin(), x.data().end());
  for (double& v : out) v += c;
  return rec.finish(x.shape(), std::move(out), [](const Vec& g) {
    return std::vector<Vec>{g};
  });
}

namespace {

// rank-2 operand in stored layout, optionally read transposed
struct Mat2 {
  int scols;   // stored column count
  bool trans;  // logical element (i,j) reads stored (j,i)
  const double* p;
  double operator()(int i, int j) const {
    return trans ? p[static_cast<size_t>(j) * scols + i] : p[static_cast<size_t>(i) * scols + j];
  }
};

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  if (a.shape().size() != 2) fail("matrix-multiply: left operand must be rank 2, got " + shape_str(a.shape()));
  const bool b_vec = b.shape().size() == 1;
  if (!b_vec && b.shape().size() != 2)
    fail("matrix-multiply: right operand must be rank 1 or 2, got " + shape_str(b.shape()));
  if (b_vec && transpose_b) fail("matrix-multiply: cannot transpose a vector operand");

  int m = transpose_a ? a.shape()[1] : a.shape()[0];
  int k = transpose_a ? a.shape()[0] : a.shape()[1];
  int kb = b_vec ? b.shape()[0] : (transpose_b ? b.shape()[1] : b.shape()[0]);
  int n = b_vec ? 1 : (transpose_b ? b.shape()[0] : b.shape()[1]);
  if (k != kb)
    fail("matrix-multiply: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
         shape_str(b.shape()));

  OpRecorder rec("matrix-multiply", {&a, &b});
  Mat2 A{a.shape()[1], transpose_a, a.data().data()};
  Mat2 B{b_vec ? 1 : b.shape()[1], transpose_b, b.data().data()};

  Vec out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk) {
      double av = A(i, kk);
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += av * B(kk, j);
    }

  Shape oshape = b_vec ? Shape{m} : Shape{m, n};
  auto avals = values_of(a);
  auto bvals = values_of(b);
  Shape ashape = a.shape(), bshape = b.shape();
  bool na = rec.needs(0), nb = rec.needs(1);
  return rec.finish(
      std::move(oshape), std::move(out),
      [=](const Vec& g) {
        std::vector<Vec> outg(2);
        // logical grads: dA[i][kk] = sum_j g[i][j] * B[kk][j]
        //                dB[kk][j] = sum_i A[i][kk] * g[i][j]
        Mat2 A{ashape[1], transpose_a, avals->data()};
        Mat2 B{b_vec ? 1 : bshape[1], transpose_b, bvals->data()};
        if (na) {
          Vec da(static_cast<size_t>(ashape[0]) * ashape[1], 0.0);
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              double s = 0;
              for (int j = 0; j < n; ++j) s += g[static_cast<size_t>(i) * n + j] * B(kk, j);
              // scatter into stored layout
              if (transpose_a)
                da[static_cast<size_t>(kk) * m + i] = s;
              else
                da[static_cast<size_t>(i) * k + kk] = s;
            }
          outg[0] = std::move(da);
        }
        if (nb) {
          Vec db(static_cast<size_t>(shape_numel(bshape)), 0.0);
          for (int kk = 0; kk < k; ++kk)
            for (int j = 0; j < n; ++j) {
              double s = 0;
              for (int i = 0; i < m; ++i) s += A(i, kk) * g[static_cast<size_t>(i) * n + j];
              if (b_vec)
                db[kk] = s;
              else if (transpose_b)
                db[static_cast<size_t>(j) * k + kk] = s;
              else
                db[static_cast<size_t>(kk) * n + j] = s;
            }
          outg[1] = std::move(db);
        }
        return outg;
      });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.shape().size() != 3)
    fail("2D-convolution: input must be [C,H,W], got " + shape_str(x.shape()));
  if (w.shape().size() != 4)
    fail("2D-convolution: weight must be [Co,Ci,kh,kw], got " + shape_str(w.shape()));
  const int Ci = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const int Co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (w.shape()[1] != Ci)
    fail("2D-convolution: weight expects " + std::to_string(w.shape()[1]) + " input channels, image has " +
         std::to_string(Ci));
  if (kh % 2 == 0 || kw % 2 == 0) fail("2D-convolution: kernel extents must be odd");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.shape() != Shape{Co}))
    fail("2D-convolution: bias must be [Co], got " + shape_str(bias.shape()));
  const int ph = kh / 2, pw = kw / 2;

  OpRecorder rec("2D-convolution", has_bias
                     ? std::initializer_list<const Tensor*>{&x, &w, &bias}
                     : std::initializer_list<const Tensor*>{&x, &w});
  const double* xp = x.data().data();
  const double* wp = w.data().data();
  Vec out(static_cast<size_t>(Co) * H * W, 0.0);
  for (int o = 0; o < Co; ++o) {
    double b = has_bias ? bias.at(o) : 0.0;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double s = b;
        for (int c = 0; c < Ci; ++c)
          for (int u = 0; u < kh; ++u) {
            int ii = i + u - ph;
            if (ii < 0 || ii >= H) continue;
            const double* xrow = xp + (static_cast<size_t>(c) * H + ii) * W;
            const double* wrow = wp + ((static_cast<size_t>(o) * Ci + c) * kh + u) * kw;
            for (int v = 0; v < kw; ++v) {
              int jj = j + v - pw;
              if (jj < 0 || jj >= W) continue;
              s += xrow[jj] * wrow[v];
            }
          }
        out[(static_cast<size_t>(o) * H + i) * W + j] = s;
      }
  }

  auto xv = values_of(x);
  auto wv = values_of(w);
  bool nx = rec.needs(0), nw = rec.needs(1), nb = has_bias && rec.needs(2);
  return rec.finish(
      {Co, H, W}, std::move(out),
      [=](const Vec& g) {
        std::vector<Vec> outg(has_bias ? 3 : 2);
        if (nx) outg[0].assign(static_cast<size_t>(Ci) * H * W, 0.0);
        if (nw) outg[1].assign(static_cast<size_t>(Co) * Ci * kh * kw, 0.0);
        if (nb) outg[2].assign(static_cast<size_t>(Co), 0.0);
        const double* xp = xv->data();
        const double* wp = wv->data();
        for (int o = 0; o < Co; ++o)
          for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
              double gv = g[(static_cast<size_t>(o) * H + i) * W + j];
              if (nb) outg[2][o] += gv;
              if (gv == 0.0 || (!nx && !nw)) continue;
              for (int c = 0; c < Ci; ++c)
                for (int u = 0; u < kh; ++u) {
                  int ii = i + u - ph;
                  if (ii < 0 || ii >= H) continue;
                  for (int v = 0; v < kw; ++v) {
                    int jj = j + v - pw;
                    if (jj < 0 || jj >= W) continue;
                    size_t xi = (static_cast<size_t>(c) * H + ii) * W + jj;
                    size_t wi = ((static_cast<size_t>(o) * Ci + c) * kh + u) * kw + v;
                    if (nx) outg[0][xi] += gv * wp[wi];
                    if (nw) outg[1][wi] += gv * xp[xi];
                  }
                }
            }
        return outg;
      });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  OpRecorder rec("leaky-rectifier", {&x});
  auto xd = x.data();
  Vec out(xd.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0 ? xd[i] : slope * xd[i];
  auto xv = values_of(x);
  return rec.finish(x.shape(), std::move(out), [xv, slope](const Vec& g) {
    Vec gx(g.size());
    for (size_t i = 0; i < g.size(); ++i) gx[i] = (*xv)[i] > 0 ? g[i] : slope * g[i];
    return std::vector<Vec>{std::move(gx)};
  });
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups) {
  if (x.shape().size() != 3)
    fail("group-normalization: input must be [C,H,W], got " + shape_str(x.shape()));
  const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  if (groups < 1 || C % groups != 0)
    fail("group-normalization: " + std::to_string(C) + " channels not divisible into " +
         std::to_string(groups) + " groups");
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    fail("group-normalization: affine parameters must be [C]");
  constexpr double kEps = 1e-8;
  const int cpg = C / groups;
  const size_t plane = static_cast<size_t>(H) * W;
  const size_t gsize = cpg * plane;

  OpRecorder rec("group-normalization", {&x, &gamma, &beta});
  auto xd = x.data();
  auto xhat = std::make_shared<Vec>(xd.size());
  auto inv_std = std::make_shared<Vec>(groups);
  Vec out(xd.size());
  for (int g = 0; g < groups; ++g) {
    size_t base = static_cast<size_t>(g) * gsize;
    double mu = 0;
    for (size_t i = 0; i < gsize; ++i) mu += xd[base + i];
    mu /= static_cast<double>(gsize);
    double var = 0;
    for (size_t i = 0; i < gsize; ++i) {
      double d = xd[base + i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(gsize);
    double s = 1.0 / std::sqrt(var + kEps);
    (*inv_std)[g] = s;
    for (size_t i = 0; i < gsize; ++i) (*xhat)[base + i] = (xd[base + i] - mu) * s;
  }
  for (int c = 0; c < C; ++c) {
    double gm = gamma.at(c), bt = beta.at(c);
    for (size_t i = 0; i < plane; ++i) {
      size_t idx = c * plane + i;
      out[idx] = gm * (*xhat)[idx] + bt;
    }
  }

  auto gammav = values_of(gamma);
  bool nx = rec.needs(0), ng = rec.needs(1), nb = rec.needs(2);
  return rec.finish(
      x.shape(), std::move(out),
      [=](const Vec& g) {
        std::vector<Vec> outg(3);
        if (ng) outg[1].assign(C, 0.0);
        if (nb) outg[2].assign(C, 0.0);
        if (ng || nb)
          for (int c = 0; c < C; ++c)
            for (size_t i = 0; i < plane; ++i) {
              size_t idx = c * plane + i;
              if (ng) outg[1][c] += g[idx] * (*xhat)[idx];
              if (nb) outg[2][c] += g[idx];
            }
        if (nx) {
          outg[0].assign(g.size(), 0.0);
          Vec dxhat(gsize);
          for (int grp = 0; grp < groups; ++grp) {
            size_t base = static_cast<size_t>(grp) * gsize;
            double m1 = 0, m2 = 0;
            for (size_t i = 0; i < gsize; ++i) {
              int c = static_cast<int>((base + i) / plane);
              dxhat[i] = g[base + i] * (*gammav)[c];
              m1 += dxhat[i];
              m2 += dxhat[i] * (*xhat)[base + i];
            }
            m1 /= static_cast<double>(gsize);
            m2 /= static_cast<double>(gsize);
            double s = (*inv_std)[grp];
            for (size_t i = 0; i < gsize; ++i)
              outg[0][base + i] = s * (dxhat[i] - m1 - (*xhat)[base + i] * m2);
          }
        }
        return outg;
      });
}

namespace {

Tensor reduce_op(const char* name, const Tensor& x, double scale, bool square) {
  OpRecorder rec(name, {&x});
  auto xd = x.data();
  double acc = 0;
  for (double v : xd) acc += square ? v * v : v;
  acc *= scale;
  auto xv = square ? values_of(x) : nullptr;
  size_t n = xd.size();
  return rec.finish({1}, {acc}, [=](const Vec& g) {
    Vec gx(n);
    if (square)
      for (size_t i = 0; i < n; ++i) gx[i] = g[0] * scale * 2.0 * (*xv)[i];
    else
      for (size_t i = 0; i < n; ++i) gx[i] = g[0] * scale;
    return std::vector<Vec>{std::move(gx)};
  });
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_op("sum", x, 1.0, false); }

Tensor mean(const Tensor& x) {
  if (x.size() == 0) fail("mean of empty tensor");
  return reduce_op("mean", x, 1.0 / static_cast<double>(x.size()), false);
}

Tensor squared_norm(const Tensor& x) { return reduce_op("squared-L2-norm", x, 1.0, true); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  OpRecorder rec("reshape", {&x});
  Vec out(x.data().begin(), x.data().end());
  return rec.finish(std::move(shape), std::move(out), [](const Vec& g) {
    return std::vector<Vec>{g};
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 || a.shape()[1] != b.shape()[1] ||
      a.shape()[2] != b.shape()[2])
    fail("concatenate-channels: incompatible shapes " + shape_str(a.shape()) + " and " +
         shape_str(b.shape()));
  OpRecorder rec("concatenate-channels", {&a, &b});
  Vec out;
  out.reserve(a.data().size() + b.data().size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  size_t na = a.data().size();
  Shape oshape{a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]};
  return rec.finish(std::move(oshape), std::move(out), [na](const Vec& g) {
    return std::vector<Vec>{Vec(g.begin(), g.begin() + na), Vec(g.begin() + na, g.end())};
  });
}

Tensor sqrt_elem(const Tensor& x) {
  OpRecorder rec("sqrt", {&x});
  auto xd = x.data();
  Vec out(xd.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (xd[i] < 0) fail("sqrt: negative input");
    out[i] = std::sqrt(xd[i]);
  }
  auto yv = std::make_shared<Vec>(out);
  return rec.finish(x.shape(), std::move(out), [yv](const Vec& g) {
    Vec gx(g.size());
    for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * 0.5 / (*yv)[i];
    return std::vector<Vec>{std::move(gx)};
  });
}

Tensor reciprocal(const Tensor& x) {
  OpRecorder rec("reciprocal", {&x});
  auto xd = x.data();
  Vec out(xd.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (xd[i] == 0) fail("reciprocal: division by zero");
    out[i] = 1.0 / xd[i];
  }
  auto yv = std::make_shared<Vec>(out);
  return rec.finish(x.shape(), std::move(out), [yv](const Vec& g) {
    Vec gx(g.size());
    for (size_t i = 0; i < g.size(); ++i) gx[i] = -g[i] * (*yv)[i] * (*yv)[i];
    return std::vector<Vec>{std::move(gx)};
  });
}

Tensor custom_linear_op(const Tensor& x, Shape out_shape, std::vector<double> out_values,
                        std::function<std::vector<double>(const std::vector<double>&)> vjp_fn,
                        const char* op_name) {
  OpRecorder rec(op_name, {&x});
  return rec.finish(std::move(out_shape), std::move(out_values),
                    [fn = std::move(vjp_fn)](const Vec& g) {
                      return std::vector<Vec>{fn(g)};
                    });
}

// ---- backward ------------------------------------------------------------------

namespace {

// Reverse sweep in tape order. Node ids are topologically sorted by
// construction, so a single descending pass visits each node once with its
// gradient fully accumulated. Hooks replace the gradient before it flows on.
// With a mask, propagation is restricted to masked nodes (paths that reach a
// requested input); branches off those paths are never executed, so their
// hooks do not fire and their work is skipped.
std::vector<Vec> reverse_sweep(const std::shared_ptr<Tape>& tape, int root, Vec seed,
                               const std::vector<char>* mask = nullptr) {
  std::vector<Vec> grads(static_cast<size_t>(root) + 1);
  grads[root] = std::move(seed);
  for (int id = root; id >= 0; --id) {
    if (grads[id].empty()) continue;
    const Tape::Node& n = tape->node(id);
    if (const Tape::HookFn* h = tape->hook(id)) {
      Tensor gin = Tensor::from(n.shape, std::move(grads[id]));
      Tensor gout = (*h)(gin);
      if (!gout.defined() || gout.shape() != n.shape)
        fail(std::string("gradient hook on '") + n.op + "' returned shape " +
             (gout.defined() ? shape_str(gout.shape()) : "<undefined>") + ", expected " +
             shape_str(n.shape));
      grads[id].assign(gout.data().begin(), gout.data().end());
    }
    if (n.is_leaf || !n.vjp) continue;
    std::vector<Vec> pg = n.vjp(grads[id]);
    for (size_t k = 0; k < n.parents.size(); ++k) {
      int pid = n.parents[k];
      if (pid < 0 || k >= pg.size() || pg[k].empty()) continue;
      if (mask && !(*mask)[pid]) continue;
      Vec& acc = grads[pid];
      if (acc.empty()) {
        acc = std::move(pg[k]);
      } else {
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += pg[k][i];
      }
    }
  }
  return grads;
}

// mask[i] = true iff `target` is an ancestor of node i (or i == target)
std::vector<char> reaches_mask(const std::shared_ptr<Tape>& tape, int root, int target) {
  std::vector<char> m(static_cast<size_t>(root) + 1, 0);
  m[target] = 1;
  for (int id = target + 1; id <= root; ++id)
    for (int pid : tape->node(id).parents)
      if (pid >= 0 && m[pid]) {
        m[id] = 1;
        break;
      }
  return m;
}

}  // namespace

GradMap backward(const Tensor& loss) {
  if (!loss.defined()) fail("backward: undefined loss");
  if (loss.size() != 1) fail("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.on_tape()) fail("backward: loss is detached from the tape");
  auto tape = loss.tape();
  if (g_current_tape == tape) g_current_tape.reset();  // next forward starts a fresh tape
  auto grads = reverse_sweep(tape, loss.node(), Vec{1.0});
  GradMap out;
  for (int id = 0; id <= loss.node(); ++id) {
    const Tape::Node& n = tape->node(id);
    if (!n.is_leaf || !n.leaf_requires_grad || n.leaf_name.empty()) continue;
    if (grads[id].empty()) continue;
    out.emplace(n.leaf_name, Tensor::from(n.shape, std::move(grads[id])));
  }
  return out;
}

Tensor vjp(const Tensor& output, const Tensor& input, const Tensor& vector) {
  if (!output.defined() || !output.on_tape()) fail("vjp: output has no tape history");
  if (!vector.defined() || vector.shape() != output.shape())
    fail("vjp: vector shape must match output shape " + shape_str(output.shape()));
  auto tape = output.tape();
  int in_id = -1;
  if (input.on_tape() && input.tape() == tape)
    in_id = input.node();
  else if (input.defined())
    in_id = tape->find_leaf(input.d_.get());
  if (in_id < 0 || in_id > output.node())
    fail("vjp: input is not an ancestor of output");
  auto mask = reaches_mask(tape, output.node(), in_id);
  if (!mask[output.node()]) fail("vjp: input is not an ancestor of output");
  auto grads = reverse_sweep(tape, output.node(),
                             Vec(vector.data().begin(), vector.data().end()), &mask);
  if (grads[in_id].empty()) fail("vjp: input is not an ancestor of output");
  return Tensor::from(tape->node(in_id).shape, std::move(grads[in_id]));
}

bool depends_on(const Tensor& output, const Tensor& input) {
  if (!output.defined() || !output.on_tape() || !input.defined()) return false;
  auto tape = output.tape();
  int in_id = -1;
  if (input.on_tape() && input.tape() == tape)
    in_id = input.node();
  else
    in_id = tape->find_leaf(input.d_.get());
  const int root = output.node();
  if (root < 0 || in_id < 0 || in_id > root) return false;
  std::vector<char> reach(static_cast<size_t>(root) + 1, 0);
  reach[root] = 1;
  for (int id = root; id >= in_id; --id) {
    if (!reach[id]) continue;
    for (int pid : tape->node(id).parents)
      if (pid >= 0) reach[pid] = 1;
  }
  return reach[in_id] != 0;
}

void register_hook(const Tensor& x, Tape::HookFn hook) {
  if (!x.requires_grad()) fail("register_hook: tensor does not require grad");
  if (!x.on_tape()) fail("register_hook: tensor must be produced by a primitive");
  x.tape()->set_hook(x.node(), std::move(hook));
}

// ---- ParameterSet -----------------------------------------------------------

Tensor& ParameterSet::create(const std::string& name, Shape shape) {
  if (params_.count(name)) fail("duplicate parameter name '" + name + "'");
  Tensor t = Tensor::zeros(std::move(shape));
  t.set_requires_grad(true).set_name(name);
  return params_.emplace(name, std::move(t)).first->second;
}

void ParameterSet::add(const std::string& name, Tensor t) {
  if (params_.count(name)) fail("duplicate parameter name '" + name + "'");
  t.set_requires_grad(true).set_name(name);
  params_.emplace(name, std::move(t));
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) fail("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) fail("unknown parameter '" + name + "'");
  return it->second;
}

bool ParameterSet::contains(const std::string& name) const { return params_.count(name) > 0; }

Tensor& ParameterSet::create_buffer(const std::string& name, Shape shape) {
  if (buffers_.count(name)) fail("duplicate buffer name '" + name + "'");
  Tensor t = Tensor::zeros(std::move(shape));
  t.set_name(name);
  return buffers_.emplace(name, std::move(t)).first->second;
}

void ParameterSet::add_buffer(const std::string& name, Tensor t) {
  buffers_.erase(name);
  t.set_name(name);
  buffers_.emplace(name, std::move(t));
}

Tensor& ParameterSet::buffer(const std::string& name) {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) fail("unknown buffer '" + name + "'");
  return it->second;
}

const Tensor& ParameterSet::buffer(const std::string& name) const {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) fail("unknown buffer '" + name + "'");
  return it->second;
}

bool ParameterSet::has_buffer(const std::string& name) const { return buffers_.count(name) > 0; }

int64_t ParameterSet::total_count() const {
  int64_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

std::vector<double> ParameterSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(total_count()));
  for (const auto& [_, t] : params_) flat.insert(flat.end(), t.data().begin(), t.data().end());
  return flat;
}

void ParameterSet::unflatten(std::span<const double> flat) {
  if (static_cast<int64_t>(flat.size()) != total_count())
    fail("unflatten: expected " + std::to_string(total_count()) + " values, got " +
         std::to_string(flat.size()));
  size_t off = 0;
  for (auto& [_, t] : params_) {
    auto& vals = t.mutable_values();
    std::copy(flat.begin() + off, flat.begin() + off + vals.size(), vals.begin());
    off += vals.size();
  }
}

}  // namespace deqei
