// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "msu/gradcheck.hpp"
#include "msu/ops.hpp"

using namespace msu;
using msu::test::f64;

TEST_SUITE("conv2d") {
  TEST_CASE("identity 1x1 kernel") {
    Rng rng(1);
    Tensor x = test::random({2, 3, 4, 5}, rng);
    Tensor w = Tensor::zeros({3, 3, 1, 1}, DType::f64);
    for (int c = 0; c < 3; ++c) w.mutable_data<double>()[static_cast<std::size_t>(c * 3 + c)] = 1.0;
    CHECK(test::bit_equal(conv2d(x, w, Tensor::zeros({3}, DType::f64)), x));
  }

  TEST_CASE("ones kernel sums windows") {
    Tensor x = Tensor::full({1, 1, 5, 5}, 2.0, DType::f64);
    Tensor y = conv2d(x, Tensor::ones({1, 1, 3, 3}, DType::f64), Tensor(), {1, 1, 1});
    CHECK(y.at(2 * 5 + 2) == 18.0);
    CHECK(y.at(0) == 8.0);
    CHECK(y.at(24) == 8.0);
    CHECK(y.at(2) == 12.0);
  }

  TEST_CASE("4x4 stride 4 embedding shape") {
    Tensor x = Tensor::zeros({1, 3, 224, 224});
    Tensor w = Tensor::zeros({96, 3, 4, 4});
    CHECK(conv2d(x, w, Tensor(), {4, 0, 1}).shape() == Shape{1, 96, 56, 56});
  }

  TEST_CASE("channel mismatch is a contract violation") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 1, 1}), Tensor()), ContractViolation);
  }
}

TEST_SUITE("pool") {
  TEST_CASE("global avg and max") {
    Tensor x = f64({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(pool(x, PoolKind::avg, 1, 1).item() == 2.5);
    CHECK(pool(x, PoolKind::max, 1, 1).item() == 4.0);
  }

  TEST_CASE("quadrant constants") {
    std::vector<double> v(16);
    const double q[4] = {1.5, -2, 7, 0.25};
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) v[static_cast<std::size_t>(y * 4 + x)] = q[(y / 2) * 2 + x / 2];
    Tensor out = pool(f64({1, 1, 4, 4}, v), PoolKind::avg, 2, 2);
    CHECK(out.to_vector() == std::vector<double>{1.5, -2, 7, 0.25});
  }

  TEST_CASE("uneven windows overlap") {
    // 3 rows into 2 cells: [0,2) and [1,3).
    Tensor out = pool(f64({1, 1, 3, 1}, {1, 2, 3}), PoolKind::avg, 2, 1);
    CHECK(out.to_vector() == std::vector<double>{1.5, 2.5});
  }
}

TEST_SUITE("normalization") {
  TEST_CASE("layer norm of a constant vector is zero") {
    Tensor x = Tensor::full({1, 4, 2, 2}, 3.0, DType::f64);
    Tensor y = layer_norm(x, Tensor::ones({4}, DType::f64), Tensor::zeros({4}, DType::f64), 1);
    for (double v : y.to_vector()) CHECK(v == 0.0);
  }

  TEST_CASE("batch norm train standardises") {
    Tensor rm = Tensor::zeros({1}, DType::f64), rv = Tensor::ones({1}, DType::f64);
    Tensor y = batch_norm(f64({2, 1}, {1, 3}), Tensor::ones({1}, DType::f64), Tensor::zeros({1}, DType::f64), rm, rv,
                          true, 0.1, 1e-12);
    CHECK(y.at(0) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rm.at(0) == doctest::Approx(0.2));
  }

  TEST_CASE("batch norm eval with unit running stats is affine") {
    Rng rng(3);
    Tensor x = test::random({3, 2, 2, 2}, rng);
    Tensor rm = Tensor::zeros({2}, DType::f64), rv = Tensor::ones({2}, DType::f64);
    Tensor y = batch_norm(x, Tensor::ones({2}, DType::f64), Tensor::zeros({2}, DType::f64), rm, rv, false, 0.1, 1e-12);
    CHECK(test::max_abs_diff(x, y) < 1e-11);
  }
}

TEST_SUITE("activations") {
  TEST_CASE("scalar values") {
    CHECK(sigmoid(f64({1}, {0})).item() == 0.5);
    CHECK(silu(f64({1}, {1})).item() == doctest::Approx(0.731059).epsilon(1e-6));
    CHECK(relu(f64({2}, {-1, 2})).to_vector() == std::vector<double>{0, 2});
    CHECK(softplus(f64({1}, {0})).item() == doctest::Approx(std::log(2.0)));
  }

  TEST_CASE("softmax shift invariance") {
    for (double a : {-50.0, 0.0, 3.0, 700.0}) {
      Tensor s = softmax(f64({3}, {a, a, a}), 0);
      for (double v : s.to_vector()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-14));
    }
  }
}

TEST_SUITE("linear") {
  TEST_CASE("hand matvec") {
    Tensor y = linear(f64({2}, {1, 2}), f64({2, 2}, {1, 1, 1, -1}), f64({2}, {0, 0}));
    CHECK(y.to_vector() == std::vector<double>{3, -1});
  }

  TEST_CASE("batch shape preserved") {
    Tensor y = linear(Tensor::zeros({4, 7, 16}), Tensor::zeros({32, 16}), Tensor());
    CHECK(y.shape() == Shape{4, 7, 32});
  }
}

TEST_SUITE("channel ops") {
  std::vector<double> iota(int n) {
    std::vector<double> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), 0.0);
    return v;
  }

  TEST_CASE("shuffle groups=2 on six channels") {
    Tensor x = f64({1, 6, 1, 1}, iota(6));
    CHECK(channel_shuffle(x, 1).to_vector() == iota(6));
    CHECK(channel_shuffle(x, 2).to_vector() == std::vector<double>{0, 3, 1, 4, 2, 5});
    CHECK(channel_shuffle(channel_shuffle(x, 2), 3).to_vector() == iota(6));
  }

  TEST_CASE("split and concat round trip") {
    Rng rng(5);
    Tensor x = test::random({2, 96, 3, 3}, rng);
    auto [a, b] = channel_split(x, 48);
    CHECK(a.shape() == Shape{2, 48, 3, 3});
    CHECK(b.shape() == Shape{2, 48, 3, 3});
    CHECK(test::bit_equal(channel_concat({a, b}), x));
    auto [c, d] = channel_split(test::random({1, 4, 2, 2}, rng), 1);
    CHECK(c.dim(1) == 1);
    CHECK(d.dim(1) == 3);
  }

  TEST_CASE("space_to_depth inverts") {
    Rng rng(6);
    Tensor x = test::random({2, 3, 8, 4}, rng);
    CHECK(test::bit_equal(depth_to_space(space_to_depth(x, 2), 2), x));
  }
}

TEST_SUITE("bilinear") {
  TEST_CASE("half-pixel sampling") {
    Tensor y = bilinear_resize(f64({1, 1, 2, 2}, {0, 1, 0, 1}), 4, 4);
    const auto v = y.to_vector();
    for (int r = 0; r < 4; ++r) {
      CHECK(v[static_cast<std::size_t>(r * 4 + 0)] == 0.0);
      CHECK(v[static_cast<std::size_t>(r * 4 + 1)] == 0.25);
      CHECK(v[static_cast<std::size_t>(r * 4 + 2)] == 0.75);
      CHECK(v[static_cast<std::size_t>(r * 4 + 3)] == 1.0);
    }
  }

  TEST_CASE("constant and single-pixel inputs") {
    for (double v : bilinear_resize(Tensor::full({1, 2, 3, 5}, 1.25, DType::f64), 7, 2).to_vector()) CHECK(v == 1.25);
    for (double v : bilinear_resize(f64({1, 1, 1, 1}, {-4}), 3, 3).to_vector()) CHECK(v == -4);
  }
}

TEST_SUITE("autodiff") {
  TEST_CASE("sum gives ones") {
    Rng rng(7);
    Tensor x = test::random({2, 3, 4}, rng).set_requires_grad(true);
    for (double g : gradients(sum(x), {x})[0].to_vector()) CHECK(g == 1.0);
  }

  TEST_CASE("sum of squares") {
    Tensor x = f64({2}, {1, 2}).set_requires_grad(true);
    CHECK(gradients(sum(mul(x, x)), {x})[0].to_vector() == std::vector<double>{2, 4});
  }

  TEST_CASE("sigmoid slope at zero") {
    Tensor x = f64({3}, {0, 0, 0}).set_requires_grad(true);
    for (double g : gradients(sum(sigmoid(x)), {x})[0].to_vector()) CHECK(g == 0.25);
  }

  TEST_CASE("broadcast gradients reduce to operand shape") {
    Tensor a = f64({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad(true);
    Tensor b = f64({3}, {1, 1, 1}).set_requires_grad(true);
    auto g = gradients(sum(mul(a, b)), {a, b});
    CHECK(g[1].to_vector() == std::vector<double>{5, 7, 9});
  }

  TEST_CASE("unconnected parameter gets zeros") {
    Tensor a = f64({2}, {1, 2}).set_requires_grad(true);
    Tensor b = f64({2}, {3, 4}).set_requires_grad(true);
    CHECK(gradients(sum(a), {a, b})[1].to_vector() == std::vector<double>{0, 0});
  }

  TEST_CASE("no-grad guard stops recording") {
    Tensor a = f64({2}, {1, 2}).set_requires_grad(true);
    Tensor y;
    {
      NoGradGuard ng;
      y = mul(a, a);
    }
    CHECK_FALSE(y.requires_grad());
  }

  TEST_CASE("non-finite output raises") {
    CHECK_THROWS_AS(log(f64({1}, {-1})), NumericError);
  }

  TEST_CASE("f32 and f64 agree") {
    Rng rng(8);
    Tensor x = test::random({1, 2, 4, 4}, rng);
    Tensor w = test::random({3, 2, 3, 3}, rng);
    Tensor y64 = conv2d(x, w, Tensor(), {1, 1, 1});
    Tensor y32 = conv2d(x.to(DType::f32), w.to(DType::f32), Tensor(), {1, 1, 1});
    CHECK(y32.dtype() == DType::f32);
    CHECK(test::max_abs_diff(y64, y32.to(DType::f64)) < 1e-5);
  }
}

TEST_SUITE("gradcheck") {
  TEST_CASE("linear map is exact") {
    Rng rng(9);
    std::vector<Tensor> in{test::random({3, 5}, rng), test::random({4, 5}, rng), test::random({4}, rng)};
    GradCheckOptions o;
    o.step = 1e-5;
    auto r = finite_difference_check("linear", [](const std::vector<Tensor>& t) { return linear(t[0], t[1], t[2]); },
                                     in, o);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-6);
  }

  TEST_CASE("sum has no error") {
    Rng rng(10);
    auto r = finite_difference_check("sum", [](const std::vector<Tensor>& t) { return sum(t[0]); },
                                     {test::random({4, 4}, rng)});
    CHECK(r.max_rel_error < 1e-8);
  }

  TEST_CASE("a wrong backward is caught") {
    Rng rng(11);
    // x * detach(x) has gradient x, not 2x.
    auto r = finite_difference_check(
        "broken", [](const std::vector<Tensor>& t) { return sum(mul(t[0], t[0].detach())); },
        {test::random({5}, rng, 0.5, 1.5)});
    CHECK_FALSE(r.passed);
  }

  TEST_CASE("relative error floor") {
    CHECK(relative_error(0, 0) == 0);
    CHECK(relative_error(1e-9, 0) == doctest::Approx(0.1));
    CHECK(relative_error(2, 1) == 0.5);
  }
}
