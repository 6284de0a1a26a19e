#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "deqei/models.hpp"
#include "test_util.hpp"

using namespace deqei;
using test::max_rel_err_vs_fd;
using test::random_tensor;

TEST_CASE("residual denoiser with zero final layer starts as the identity") {
  DenoiserArch arch;
  arch.channels = 1;
  arch.hidden_channels = 8;
  arch.depth = 3;
  ParameterSet ps = init_denoiser(arch, 1);
  Rng rng(2);
  Tensor x = random_tensor({1, 9, 9}, rng);
  Tensor y = denoise(arch, ps, x);
  CHECK(test::max_abs_diff(x, y) == 0.0);
}

TEST_CASE("single 1x1 conv layer acts as a scalar gain") {
  DenoiserArch arch;
  arch.depth = 1;
  arch.kernel = 1;
  arch.residual = false;
  ParameterSet ps = init_denoiser(arch, 3);
  ps.at("conv0.weight").mutable_values()[0] = 1.75;
  Rng rng(4);
  Tensor x = random_tensor({1, 5, 5}, rng);
  Tensor y = denoise(arch, ps, x);
  CHECK(test::max_abs_diff(y, scalar_mul(x, 1.75)) <= 1e-15);

  arch.residual = true;
  Tensor yr = denoise(arch, ps, x);
  CHECK(test::max_abs_diff(yr, scalar_mul(x, 2.75)) <= 1e-15);
}

TEST_CASE("denoiser gradients match finite differences") {
  DenoiserArch arch;
  arch.channels = 1;
  arch.hidden_channels = 4;
  arch.depth = 2;
  arch.norm = DenoiserArch::Norm::Group;
  arch.groups = 2;
  ParameterSet ps = init_denoiser(arch, 5);
  // give the final layer nonzero weights so its gradient path is generic
  Rng rng(6);
  for (double& v : ps.at("conv1.weight").mutable_values()) v = 0.3 * rng.normal();
  Tensor x = random_tensor({1, 6, 6}, rng);
  auto forward = [&] { return squared_norm(denoise(arch, ps, x)); };
  GradMap g = backward(forward());
  CHECK(max_rel_err_vs_fd([&] { return forward().item(); }, ps, g) <= 1e-5);
}

TEST_CASE("denoiser gradients with spectral norm match finite differences") {
  DenoiserArch arch;
  arch.channels = 1;
  arch.hidden_channels = 3;
  arch.depth = 2;
  arch.spectral_norm = true;
  ParameterSet ps = init_denoiser(arch, 7);
  Rng rng(8);
  for (double& v : ps.at("conv1.weight").mutable_values()) v = 0.5 * rng.normal();
  for (double& v : ps.at("conv1.bias").mutable_values()) v = 0.1 * rng.normal();
  Tensor x = random_tensor({1, 5, 5}, rng);
  auto forward = [&] { return squared_norm(denoise(arch, ps, x)); };
  GradMap g = backward(forward());
  CHECK(max_rel_err_vs_fd([&] { return forward().item(); }, ps, g) <= 1e-5);
}

namespace {

// random matrix with a controlled spectral gap sigma_2/sigma_1 <= ratio;
// five power iterations resolve sigma to 1% only when such a gap exists
Tensor gapped_random(int rows, int cols, double ratio, uint64_t seed, double* sigma_out) {
  Rng rng(seed);
  Eigen::MatrixXd M(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) M(i, j) = rng.normal();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::VectorXd s = svd.singularValues();
  double scale = ratio * s(0) / s(1);
  for (int i = 1; i < s.size(); ++i) s(i) *= scale;
  Eigen::MatrixXd W = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  if (sigma_out) *sigma_out = s(0);
  std::vector<double> v(W.data(), W.data() + W.size());
  // Eigen stores column-major
  std::vector<double> rm(static_cast<size_t>(rows) * cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) rm[static_cast<size_t>(i) * cols + j] = W(i, j);
  return Tensor::from({rows, cols}, std::move(rm));
}

}  // namespace

TEST_CASE("spectral normalization against the SVD oracle") {
  // diagonal case from first principles
  Tensor d = Tensor::from({2, 2}, {3, 0, 0, 1});
  Tensor nd = spectral_normalize(d, 20);
  CHECK(nd.at(0) == doctest::Approx(1.0).epsilon(1e-6));

  // sigma estimate within 1% after 5 iterations, given a spectral gap
  for (uint64_t seed = 0; seed < 10; ++seed) {
    double sigma = 0;
    Tensor w = gapped_random(6, 10, 0.5, 400 + seed, &sigma);
    Rng urng(900 + seed);
    Tensor u0 = random_tensor({6}, urng);
    Tensor nw = spectral_normalize(w, 5, u0);
    // normalized weight = w / sigma_hat, so sigma_hat = w00 / nw00
    double sigma_hat = w.at(0) / nw.at(0);
    CHECK(std::abs(sigma_hat - sigma) <= 0.01 * sigma);
  }
}

TEST_CASE("spectral normalization edge cases") {
  // orthonormal matrix: unchanged up to 1%
  Tensor q = Tensor::from({2, 2}, {std::sqrt(0.5), -std::sqrt(0.5), std::sqrt(0.5), std::sqrt(0.5)});
  Tensor nq = spectral_normalize(q, 5);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(nq.at(i) - q.at(i)) <= 0.01);

  // zero matrix: returned unchanged
  Tensor z = Tensor::zeros({3, 4});
  Tensor nz = spectral_normalize(z, 5);
  CHECK(test::max_abs_diff(nz, z) == 0.0);
}

TEST_CASE("spectral normalization never leaves a singular value above 1 + 1%") {
  for (uint64_t seed = 0; seed < 8; ++seed) {
    Tensor w = gapped_random(5, 8, 0.5, 500 + seed, nullptr);
    Tensor nw = spectral_normalize(w, 5);
    Eigen::MatrixXd M(5, 8);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 8; ++j) M(i, j) = nw.at(i * 8 + j);
    CHECK(M.jacobiSvd().singularValues()(0) <= 1.01);
  }
}

TEST_CASE("lipschitz estimates of reference maps") {
  Shape s{1, 6, 6};
  CHECK(lipschitz_estimate([](const Tensor& x) { return x; }, s, 10, 1) ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(lipschitz_estimate([](const Tensor& x) { return scalar_mul(x, 0.5); }, s, 10, 2) ==
        doctest::Approx(0.5).epsilon(1e-12));

  // spectral-normalized 1x1 conv is 1-Lipschitz
  DenoiserArch arch;
  arch.channels = 2;
  arch.depth = 1;
  arch.kernel = 1;
  arch.residual = false;
  arch.spectral_norm = true;
  ParameterSet ps = init_denoiser(arch, 9);
  Rng rng(10);
  for (double& v : ps.at("conv0.weight").mutable_values()) v = rng.normal();
  for (double& v : ps.at("conv0.bias").mutable_values()) v = rng.normal();
  double lip = lipschitz_estimate(
      [&](const Tensor& x) { return denoise(arch, ps, x); }, {2, 6, 6}, 20, 11);
  CHECK(lip <= 1.0 + 1e-6);
}

TEST_CASE("default architecture stays under the parameter budget") {
  DenoiserArch arch;
  arch.norm = DenoiserArch::Norm::Group;
  // conv0: 16*1*9+16, conv1: 16*16*9+16, conv2: 1*16*9+1, group-norm affine on
  // the two hidden layers
  CHECK(arch.parameter_count() == 160 + 2320 + 145 + 64);
  CHECK(arch.parameter_count() < 20000);
  ParameterSet ps = init_denoiser(arch, 12);
  CHECK(ps.total_count() == arch.parameter_count());
}

TEST_CASE("denoiser preserves shape for any image size at least the kernel") {
  DenoiserArch arch;
  arch.hidden_channels = 4;
  ParameterSet ps = init_denoiser(arch, 13);
  Rng rng(14);
  for (int n : {3, 5, 12}) {
    Tensor x = random_tensor({1, n, n}, rng);
    CHECK(denoise(arch, ps, x).shape() == x.shape());
  }
}
