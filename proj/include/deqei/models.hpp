#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "deqei/rng.hpp"
#include "deqei/tensor.hpp"

namespace deqei {

// Small residual convolutional denoiser. depth counts conv layers; hidden
// layers are followed by optional group norm and a leaky rectifier, the final
// layer is linear. With residual=true and the zero-initialized final layer the
// network starts as the identity map.
struct DenoiserArch {
  int channels = 1;
  int hidden_channels = 16;
  int depth = 3;
  int kernel = 3;
  double leaky_slope = 0.1;
  bool residual = true;
  enum class Norm { None, Group };
  Norm norm = Norm::None;
  int groups = 4;
  bool spectral_norm = false;
  int sn_power_iters = 5;

  int64_t parameter_count() const;
};

// Kaiming-uniform hidden layers, zero final layer, seeded power-iteration
// start vectors as non-trainable buffers.
ParameterSet init_denoiser(const DenoiserArch& arch, uint64_t seed);

Tensor denoise(const DenoiserArch& arch, const ParameterSet& params, const Tensor& x);

// weight / sigma where sigma is the power-iteration estimate of the largest
// singular value of the 2-D weight. Differentiable; the start vector u0 is
// held fixed. A weight with sigma below 1e-12 is returned unchanged.
Tensor spectral_normalize(const Tensor& weight2d, int iters, const Tensor& u0);
// convenience overload with a seeded deterministic start vector
Tensor spectral_normalize(const Tensor& weight2d, int iters);

// max over n random pairs of |f(u)-f(v)| / |u-v|
double lipschitz_estimate(const std::function<Tensor(const Tensor&)>& map, const Shape& shape,
                          int n_pairs, uint64_t seed);

}  // namespace deqei
