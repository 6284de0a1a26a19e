#include "deqei/models.hpp"

#include <cmath>
#include <stdexcept>

namespace deqei {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

int out_channels(const DenoiserArch& a, int layer) {
  return layer == a.depth - 1 ? a.channels : a.hidden_channels;
}

int in_channels(const DenoiserArch& a, int layer) {
  return layer == 0 ? a.channels : a.hidden_channels;
}

bool layer_has_norm(const DenoiserArch& a, int layer) {
  return a.norm == DenoiserArch::Norm::Group && layer != a.depth - 1;
}

Tensor l2_normalize(const Tensor& z) {
  return scalar_mul(z, reciprocal(sqrt_elem(squared_norm(z))));
}

}  // namespace

int64_t DenoiserArch::parameter_count() const {
  int64_t n = 0;
  for (int l = 0; l < depth; ++l) {
    n += static_cast<int64_t>(out_channels(*this, l)) * in_channels(*this, l) * kernel * kernel;
    n += out_channels(*this, l);  // bias
    if (layer_has_norm(*this, l)) n += 2 * out_channels(*this, l);
  }
  return n;
}

ParameterSet init_denoiser(const DenoiserArch& arch, uint64_t seed) {
  if (arch.depth < 1) fail("denoiser: depth must be at least 1");
  if (arch.kernel % 2 == 0) fail("denoiser: kernel must be odd");
  ParameterSet ps;
  Rng rng(seed, "denoiser-init");
  for (int l = 0; l < arch.depth; ++l) {
    const int ci = in_channels(arch, l), co = out_channels(arch, l);
    const std::string tag = "conv" + std::to_string(l);
    Tensor& w = ps.create(tag + ".weight", {co, ci, arch.kernel, arch.kernel});
    Tensor& b = ps.create(tag + ".bias", {co});
    // Final layer starts at zero so the residual network is the identity.
    // Under spectral norm w/sigma(w) is discontinuous at w = 0, so those
    // architectures start from a small random final layer instead.
    bool zero_init = l == arch.depth - 1 && !arch.spectral_norm;
    if (!zero_init) {
      double fan_in = static_cast<double>(ci) * arch.kernel * arch.kernel;
      double gain = std::sqrt(2.0 / (1.0 + arch.leaky_slope * arch.leaky_slope));
      double bound = gain * std::sqrt(3.0 / fan_in);
      if (l == arch.depth - 1) bound *= 0.05;
      for (double& v : w.mutable_values()) v = rng.uniform(-bound, bound);
      double bb = 1.0 / std::sqrt(fan_in);
      if (l == arch.depth - 1) bb *= 0.05;
      for (double& v : b.mutable_values()) v = rng.uniform(-bb, bb);
    }
    if (layer_has_norm(arch, l)) {
      Tensor& gamma = ps.create(tag + ".gn_gamma", {co});
      for (double& v : gamma.mutable_values()) v = 1.0;
      ps.create(tag + ".gn_beta", {co});
    }
    if (arch.spectral_norm) {
      Tensor& u0 = ps.create_buffer(tag + ".sn_u0", {co});
      for (double& v : u0.mutable_values()) v = rng.normal();
    }
  }
  return ps;
}

Tensor spectral_normalize(const Tensor& weight2d, int iters, const Tensor& u0) {
  if (weight2d.shape().size() != 2) fail("spectral_normalize: weight must be rank 2");
  if (u0.shape() != Shape{weight2d.shape()[0]})
    fail("spectral_normalize: start vector must match the output dimension");
  double wmax = 0;
  for (double v : weight2d.data()) wmax = std::max(wmax, std::abs(v));
  if (wmax == 0.0) return weight2d;  // sigma floor: zero weight unchanged
  Tensor u = u0.detach();
  Tensor v;
  for (int it = 0; it < iters; ++it) {
    v = l2_normalize(matmul(weight2d, u, /*transpose_a=*/true));
    u = l2_normalize(matmul(weight2d, v));
  }
  Tensor sigma = sum(mul(u, matmul(weight2d, v)));
  if (sigma.item() < 1e-12) return weight2d;
  return scalar_mul(weight2d, reciprocal(sigma));
}

Tensor spectral_normalize(const Tensor& weight2d, int iters) {
  if (weight2d.shape().size() != 2) fail("spectral_normalize: weight must be rank 2");
  Rng rng(0x5eedu + static_cast<uint64_t>(weight2d.shape()[0]) * 131 +
              static_cast<uint64_t>(weight2d.shape()[1]),
          "sn-start");
  std::vector<double> u(static_cast<size_t>(weight2d.shape()[0]));
  for (double& x : u) x = rng.normal();
  return spectral_normalize(weight2d, iters, Tensor::from({weight2d.shape()[0]}, std::move(u)));
}

Tensor denoise(const DenoiserArch& arch, const ParameterSet& params, const Tensor& x) {
  if (x.shape().size() != 3 || x.shape()[0] != arch.channels)
    fail("denoise: expected a [" + std::to_string(arch.channels) + ",H,W] image, got " +
         shape_str(x.shape()));
  Tensor h = x;
  for (int l = 0; l < arch.depth; ++l) {
    const std::string tag = "conv" + std::to_string(l);
    Tensor w = params.at(tag + ".weight");
    if (arch.spectral_norm) {
      const int co = w.shape()[0];
      const int rest = static_cast<int>(w.size()) / co;
      Tensor flat = reshape(w, {co, rest});
      Tensor normed = spectral_normalize(flat, arch.sn_power_iters, params.buffer(tag + ".sn_u0"));
      w = reshape(normed, w.shape());
    }
    h = conv2d(h, w, params.at(tag + ".bias"));
    if (l != arch.depth - 1) {
      if (layer_has_norm(arch, l))
        h = group_norm(h, params.at(tag + ".gn_gamma"), params.at(tag + ".gn_beta"), arch.groups);
      h = leaky_relu(h, arch.leaky_slope);
    }
  }
  return arch.residual ? add(x, h) : h;
}

double lipschitz_estimate(const std::function<Tensor(const Tensor&)>& map, const Shape& shape,
                          int n_pairs, uint64_t seed) {
  NoGradGuard ng;
  Rng rng(seed, "lipschitz");
  double worst = 0;
  for (int p = 0; p < n_pairs; ++p) {
    std::vector<double> u(static_cast<size_t>(shape_numel(shape))), v(u.size());
    for (double& e : u) e = rng.normal();
    for (double& e : v) e = rng.normal();
    Tensor tu = Tensor::from(shape, std::move(u));
    Tensor tv = Tensor::from(shape, std::move(v));
    double dn = std::sqrt(squared_norm(sub(tu, tv)).item());
    if (dn == 0) continue;
    double fn = std::sqrt(squared_norm(sub(map(tu), map(tv))).item());
    worst = std::max(worst, fn / dn);
  }
  return worst;
}

}  // namespace deqei
