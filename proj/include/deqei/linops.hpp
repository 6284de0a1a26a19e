#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "deqei/rng.hpp"
#include "deqei/tensor.hpp"

namespace deqei {

// Rotation group element. Multiples of 90 degrees act by exact index
// permutation; other angles by bilinear interpolation about the image center.
struct GroupElement {
  double angle_degrees = 0.0;
  bool exact() const {
    double a = angle_degrees / 90.0;
    return a == static_cast<double>(static_cast<long long>(a));
  }
};

// 0, 90, 180, 270 (order 4) or 1-degree increments (order 360)
std::vector<GroupElement> rotation_group(int order);

Tensor rotate(const Tensor& x, const GroupElement& g);

struct NoiseModel {
  enum class Kind { None, AdditiveGaussian };
  Kind kind = Kind::None;
  double sigma = 0.0;
  uint64_t seed = 0;
};

Tensor add_noise(const Tensor& y, const NoiseModel& nm);

// Measurement map A with exact adjoint and pseudoinverse application.
// apply/adjoint participate in the differentiation tape; each is the other's
// VJP, so adjoint exactness carries over to gradients.
class LinearOperator {
 public:
  enum class Kind { Dense, Inpainting, MaskedFourier, Tomography };

  LinearOperator() = default;

  Kind kind() const;
  const char* kind_name() const;
  const Shape& input_shape() const;  // (C,H,W)
  int output_dim() const;

  Tensor apply(const Tensor& x) const;
  Tensor adjoint(const Tensor& y) const;
  Tensor pseudoinverse(const Tensor& y, bool* converged = nullptr) const;

  // largest singular value, estimated by power iteration on A^T A
  double norm_estimate(int iters = 50, uint64_t seed = 0) const;

  // row-major m x n matrix over flattened input
  static LinearOperator dense(Shape input_shape, int output_dim, std::vector<double> matrix);
  // keep[i] != 0 marks observed pixels of the (H,W) grid, applied per channel
  static LinearOperator inpainting(Shape input_shape, std::vector<uint8_t> keep);
  // subsampled unitary 2D DFT on a 2-channel (re,im) image; the mask keeps
  // everything within center_radius of DC and samples the rest with a radial
  // Gaussian profile calibrated so the expected kept fraction is
  // 1/acceleration
  static LinearOperator masked_fourier(int height, int width, double acceleration,
                                       int center_radius, uint64_t mask_seed);
  static LinearOperator masked_fourier_full(int height, int width);  // identity transform
  // parallel-beam discrete Radon transform, bilinear sampling at unit steps
  static LinearOperator tomography(Shape input_shape, std::vector<double> angles_degrees,
                                   int detector_count);

  // kept-frequency / kept-pixel mask as an H x W image, when applicable
  std::vector<uint8_t> mask_image() const;

  struct Impl;

 private:
  explicit LinearOperator(std::shared_ptr<const Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<const Impl> impl_;
};

// Dump a grayscale image (values clamped to [0,1]) as an 8-bit binary PGM.
void write_pgm(const std::string& path, const std::vector<double>& pixels, int height, int width);

}  // namespace deqei
