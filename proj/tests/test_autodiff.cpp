#include <doctest.h>

#include <cmath>

#include "deqei/rng.hpp"
#include "deqei/tensor.hpp"
#include "test_util.hpp"

using namespace deqei;
using test::max_rel_err_vs_fd;
using test::random_tensor;

TEST_CASE("add is componentwise") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({2}, {3, 4});
  Tensor c = add(a, b);
  CHECK(c.at(0) == 4);
  CHECK(c.at(1) == 6);
}

TEST_CASE("squared norm of zero tensor is zero") {
  CHECK(squared_norm(Tensor::zeros({3, 4})).item() == 0.0);
}

TEST_CASE("1x1 identity kernel convolution is the identity") {
  Rng rng(11);
  Tensor x = random_tensor({2, 5, 5}, rng);
  Tensor w = Tensor::from({2, 2, 1, 1}, {1, 0, 0, 1});
  Tensor y = conv2d(x, w);
  CHECK(test::max_abs_diff(x, y) == 0.0);
}

TEST_CASE("shape mismatch names the primitive and shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), std::runtime_error);
  try {
    add(a, b);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
    CHECK(std::string(e.what()).find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("backward of quadratic") {
  ParameterSet ps;
  ps.add("theta", Tensor::from({3}, {1, 2, 3}));
  Tensor loss = sum(mul(ps.at("theta"), ps.at("theta")));
  GradMap g = backward(loss);
  CHECK(g.at("theta").at(0) == doctest::Approx(2).epsilon(1e-15));
  CHECK(g.at("theta").at(1) == doctest::Approx(4).epsilon(1e-15));
  CHECK(g.at("theta").at(2) == doctest::Approx(6).epsilon(1e-15));
}

TEST_CASE("backward of mean spreads gradient") {
  ParameterSet ps;
  ps.add("x", Tensor::from({4}, {1, 2, 3, 4}));
  GradMap g = backward(mean(ps.at("x")));
  for (int i = 0; i < 4; ++i) CHECK(g.at("x").at(i) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("backward errors") {
  ParameterSet ps;
  ps.add("x", Tensor::from({2}, {1, 2}));
  Tensor y = mul(ps.at("x"), ps.at("x"));
  CHECK_THROWS(backward(y));  // not scalar
  Tensor d = sum(y).detach();
  CHECK_THROWS(backward(d));  // detached
}

TEST_CASE("three-primitive chain matches finite differences") {
  Rng rng(42);
  ParameterSet ps;
  ps.add("w", random_tensor({4, 4}, rng));
  ps.add("b", random_tensor({4}, rng));
  Tensor x = random_tensor({4}, rng);

  auto forward = [&]() {
    Tensor h = matmul(ps.at("w"), x);
    Tensor s = add(h, ps.at("b"));
    return squared_norm(s);
  };
  GradMap g = backward(forward());
  double err = max_rel_err_vs_fd([&] { return forward().item(); }, ps, g);
  CHECK(err <= 1e-6);
}

TEST_CASE("vjp of scaling and identity") {
  Rng rng(1);
  Tensor x = random_tensor({5}, rng);
  x.set_requires_grad(true);
  Tensor y = scalar_mul(x, 3.0);
  Tensor v = random_tensor({5}, rng);
  Tensor r = vjp(y, x, v);
  for (int i = 0; i < 5; ++i) CHECK(r.at(i) == doctest::Approx(3 * v.at(i)).epsilon(1e-15));

  Tensor y2 = add(x, Tensor::zeros({5}));
  Tensor r2 = vjp(y2, x, v);
  for (int i = 0; i < 5; ++i) CHECK(r2.at(i) == v.at(i));
}

TEST_CASE("vjp of dense matvec is the transpose") {
  Rng rng(7);
  Tensor M = random_tensor({4, 4}, rng);
  Tensor x = random_tensor({4}, rng);
  x.set_requires_grad(true);
  Tensor y = matmul(M, x);
  Tensor v = random_tensor({4}, rng);
  Tensor r = vjp(y, x, v);
  // transpose oracle: plain loop
  for (int i = 0; i < 4; ++i) {
    double want = 0;
    for (int j = 0; j < 4; ++j) want += M.at(j * 4 + i) * v.at(j);
    CHECK(std::abs(r.at(i) - want) <= 1e-12);
  }
}

TEST_CASE("vjp does not disturb parameter gradients") {
  ParameterSet ps;
  ps.add("w", Tensor::from({1}, {2.0}));
  Tensor x = Tensor::from({1}, {3.0});
  Tensor y = scalar_mul(x, ps.at("w"));
  Tensor loss = squared_norm(y);
  x.set_requires_grad(false);
  Tensor r = vjp(loss, ps.at("w"), Tensor::scalar(1.0));
  CHECK(r.at(0) == doctest::Approx(2 * 6.0 * 3.0));
  GradMap g = backward(loss);
  CHECK(g.at("w").at(0) == doctest::Approx(2 * 6.0 * 3.0));
}

TEST_CASE("vjp rejects non-ancestors") {
  Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  Tensor z = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  Tensor y = scalar_mul(x, 2.0);
  CHECK_THROWS(vjp(y, z, Tensor::from({2}, {1, 1})));
}

TEST_CASE("detach cuts the graph and preserves values") {
  ParameterSet ps;
  ps.add("w", Tensor::from({2}, {1.5, -2.5}));
  Tensor y = mul(ps.at("w"), ps.at("w"));
  Tensor d = y.detach();
  CHECK(d.data()[0] == y.data()[0]);
  CHECK(d.data()[1] == y.data()[1]);
  CHECK(!d.requires_grad());
  Tensor loss = sum(mul(d, ps.at("w")));
  GradMap g = backward(loss);
  // only the direct factor contributes
  CHECK(g.at("w").at(0) == doctest::Approx(d.at(0)));
  CHECK(g.at("w").at(1) == doctest::Approx(d.at(1)));
}

TEST_CASE("vjp through a re-marked detached tensor sees only the new sub-graph") {
  ParameterSet ps;
  ps.add("w", Tensor::from({1}, {4.0}));
  Tensor y = mul(ps.at("w"), ps.at("w"));  // 16, dy/dw = 8
  Tensor x2 = y.detach(true);
  Tensor z = scalar_mul(x2, 5.0);
  Tensor r = vjp(z, x2, Tensor::scalar(1.0));
  CHECK(r.at(0) == 5.0);
  // manual sub-graph: same computation built from a fresh leaf
  Tensor x2b = Tensor::scalar(16.0).set_requires_grad(true);
  Tensor zb = scalar_mul(x2b, 5.0);
  CHECK(vjp(zb, x2b, Tensor::scalar(1.0)).at(0) == 5.0);
}

TEST_CASE("hooks transform the upstream gradient") {
  auto build = [](std::function<Tensor(const Tensor&)> hook) {
    ParameterSet ps;
    ps.add("w", Tensor::from({2}, {1.0, 2.0}));
    Tensor h = mul(ps.at("w"), ps.at("w"));
    if (hook) register_hook(h, hook);
    Tensor loss = sum(h);
    return backward(loss).at("w");
  };
  Tensor base = build(nullptr);
  Tensor ident = build([](const Tensor& g) { return g; });
  Tensor doubled = build([](const Tensor& g) { return scalar_mul(g, 2.0); });
  Tensor zeroed = build([](const Tensor& g) { return Tensor::zeros(g.shape()); });
  for (int i = 0; i < 2; ++i) {
    CHECK(ident.at(i) == base.at(i));
    CHECK(doubled.at(i) == 2 * base.at(i));
    CHECK(zeroed.at(i) == 0.0);
  }
}

TEST_CASE("second hook registration fails, shape change fails") {
  ParameterSet ps;
  ps.add("w", Tensor::from({2}, {1.0, 2.0}));
  Tensor h = mul(ps.at("w"), ps.at("w"));
  register_hook(h, [](const Tensor& g) { return g; });
  CHECK_THROWS(register_hook(h, [](const Tensor& g) { return g; }));

  Tensor h2 = mul(ps.at("w"), ps.at("w"));
  register_hook(h2, [](const Tensor&) { return Tensor::zeros({3}); });
  CHECK_THROWS(backward(sum(h2)));
}

TEST_CASE("gradient accumulation is additive on a shared tape") {
  Rng rng(3);
  ParameterSet ps;
  ps.add("w", random_tensor({6}, rng));
  Tensor l1 = squared_norm(ps.at("w"));
  Tensor l2 = sum(ps.at("w"));
  GradMap g1 = backward(l1);
  GradMap g2 = backward(l2);
  GradMap g12 = backward(add(l1, l2));
  for (int i = 0; i < 6; ++i)
    CHECK(g12.at("w").at(i) == g1.at("w").at(i) + g2.at("w").at(i));
}

TEST_CASE("random graphs of depth <= 6 match finite differences") {
  for (uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(seed * 977 + 5);
    ParameterSet ps;
    ps.add("w1", random_tensor({3, 3, 3, 3}, rng, 0.5));
    ps.add("b1", random_tensor({3}, rng, 0.5));
    ps.add("g1", random_tensor({3}, rng, 0.3));
    ps.add("h1", random_tensor({3}, rng, 0.3));
    Tensor x = random_tensor({3, 6, 6}, rng);

    auto forward = [&]() {
      Tensor h = conv2d(x, ps.at("w1"), ps.at("b1"));
      h = group_norm(h, add_scalar(ps.at("g1"), 1.0), ps.at("h1"), 3);
      h = leaky_relu(h, 0.1);
      Tensor parts = concat_channels(h, x);
      Tensor flattened = reshape(parts, {6 * 6 * 6});
      return add(mean(flattened), scalar_mul(squared_norm(h), 0.01));
    };
    GradMap g = backward(forward());
    double err = max_rel_err_vs_fd([&] { return forward().item(); }, ps, g);
    CHECK(err <= 1e-5);
  }
}

TEST_CASE("vjp is linear in the vector argument") {
  Rng rng(19);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({8}, rng);
    x.set_requires_grad(true);
    Tensor w = random_tensor({8, 8}, rng);
    Tensor y = leaky_relu(matmul(w, x), 0.1);
    Tensor u = random_tensor({8}, rng);
    Tensor v = random_tensor({8}, rng);
    double alpha = rng.uniform(-2, 2);
    Tensor lhs = vjp(y, x, add(scalar_mul(u, alpha), v));
    Tensor rhs = add(scalar_mul(vjp(y, x, u), alpha), vjp(y, x, v));
    CHECK(test::max_abs_diff(lhs, rhs) <= 1e-12);
  }
}

TEST_CASE("determinism: same seed gives bit-identical values and gradients") {
  auto run = [] {
    Rng rng(123);
    ParameterSet ps;
    ps.add("w", random_tensor({4, 4, 3, 3}, rng));
    Tensor x = random_tensor({4, 5, 5}, rng);
    Tensor loss = squared_norm(conv2d(x, ps.at("w")));
    GradMap g = backward(loss);
    std::vector<double> out(g.at("w").data().begin(), g.at("w").data().end());
    out.push_back(loss.item());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("no-grad mode records nothing") {
  ParameterSet ps;
  ps.add("w", Tensor::from({2}, {1, 2}));
  NoGradGuard ng;
  Tensor y = mul(ps.at("w"), ps.at("w"));
  CHECK(!y.on_tape());
  CHECK(!y.requires_grad());
}

TEST_CASE("parameter set flattening is a bijection") {
  Rng rng(8);
  ParameterSet ps;
  ps.add("a", random_tensor({3, 2}, rng));
  ps.add("b", random_tensor({4}, rng));
  CHECK(ps.total_count() == 10);
  auto flat = ps.flatten();
  CHECK(flat.size() == 10);
  for (double& v : flat) v += 1.0;
  ps.unflatten(flat);
  auto flat2 = ps.flatten();
  CHECK(flat == flat2);
}

TEST_CASE("matmul transpose flags") {
  Rng rng(4);
  Tensor A = random_tensor({3, 5}, rng);
  Tensor u = random_tensor({3}, rng);
  Tensor r = matmul(A, u, /*transpose_a=*/true);  // A^T u
  for (int j = 0; j < 5; ++j) {
    double want = 0;
    for (int i = 0; i < 3; ++i) want += A.at(i * 5 + j) * u.at(i);
    CHECK(r.at(j) == doctest::Approx(want).epsilon(1e-14));
  }
  Tensor B = random_tensor({4, 5}, rng);
  Tensor C = matmul(A, B, false, /*transpose_b=*/true);  // [3,5]x[5,4]
  CHECK(C.shape() == Shape{3, 4});
  double want00 = 0;
  for (int k = 0; k < 5; ++k) want00 += A.at(k) * B.at(k);
  CHECK(C.at(0) == doctest::Approx(want00).epsilon(1e-14));
}

TEST_CASE("sqrt and reciprocal gradients") {
  ParameterSet ps;
  ps.add("x", Tensor::from({3}, {0.5, 2.0, 4.0}));
  auto forward = [&] { return sum(reciprocal(sqrt_elem(ps.at("x")))); };
  GradMap g = backward(forward());
  double err = max_rel_err_vs_fd([&] { return forward().item(); }, ps, g, 1e-7);
  CHECK(err <= 1e-6);
}

TEST_CASE("group norm output has zero mean unit variance per group") {
  Rng rng(21);
  Tensor x = random_tensor({4, 6, 6}, rng, 2.0);
  Tensor y = group_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}), 2);
  const int gsize = 2 * 36;
  for (int g = 0; g < 2; ++g) {
    double mu = 0, var = 0;
    for (int i = 0; i < gsize; ++i) mu += y.at(g * gsize + i);
    mu /= gsize;
    for (int i = 0; i < gsize; ++i) {
      double d = y.at(g * gsize + i) - mu;
      var += d * d;
    }
    var /= gsize;
    CHECK(std::abs(mu) <= 1e-6);
    CHECK(std::abs(var - 1.0) <= 1e-6);
  }
}
