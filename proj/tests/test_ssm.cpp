// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "msu/gradcheck.hpp"
#include "msu/ops.hpp"
#include "msu/ssm.hpp"
#include "msu/verify.hpp"

using namespace msu;
using msu::test::f64;

TEST_SUITE("selective_scan") {
  TEST_CASE("zero A reduces to a prefix sum") {
    Tensor y = selective_scan(f64({1, 1, 3}, {1, 2, 3}), f64({1, 1, 3}, {1, 1, 1}), f64({1, 1}, {0}),
                              f64({1, 1, 3}, {1, 1, 1}), f64({1, 1, 3}, {1, 1, 1}), f64({1}, {0}));
    CHECK(y.to_vector() == std::vector<double>{1, 3, 6});
  }

  TEST_CASE("pure skip path") {
    Rng rng(1);
    Tensor u = test::random({2, 3, 7}, rng);
    Tensor y = selective_scan(u, test::random({2, 3, 7}, rng, 0.1, 1), test::random({3, 4}, rng, -2, -0.1),
                              test::random({2, 4, 7}, rng), Tensor::zeros({2, 4, 7}, DType::f64),
                              Tensor::ones({3}, DType::f64));
    CHECK(test::bit_equal(y, u));
  }

  TEST_CASE("two-step hand unroll") {
    const double d = std::log(2.0);
    Tensor y = selective_scan(f64({1, 1, 2}, {1, 1}), f64({1, 1, 2}, {d, d}), f64({1, 1}, {-1}),
                              f64({1, 1, 2}, {1, 1}), f64({1, 1, 2}, {1, 1}), f64({1}, {0}));
    CHECK(y.at(0) == doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(y.at(1) == doctest::Approx(1.039721).epsilon(1e-6));
  }

  TEST_CASE("agrees with the loop oracle") {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
      const std::int64_t b = 2, c = 3, l = 9, n = 4;
      Tensor u = test::random({b, c, l}, rng), dl = test::random({b, c, l}, rng, 0.01, 1.5);
      Tensor a = test::random({c, n}, rng, -3, -0.05), bm = test::random({b, n, l}, rng);
      Tensor cm = test::random({b, n, l}, rng), dd = test::random({c}, rng);
      const auto want = oracle::selective_scan(u.to_vector(), dl.to_vector(), a.to_vector(), bm.to_vector(),
                                               cm.to_vector(), dd.to_vector(), b, c, l, n);
      const auto got = selective_scan(u, dl, a, bm, cm, dd).to_vector();
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
  }

  TEST_CASE("non-positive delta is rejected") {
    CHECK_THROWS_AS(selective_scan(f64({1, 1, 1}, {1}), f64({1, 1, 1}, {0}), f64({1, 1}, {-1}), f64({1, 1, 1}, {1}),
                                   f64({1, 1, 1}, {1}), f64({1}, {0})),
                    ContractViolation);
  }
}

TEST_SUITE("cross scan") {
  TEST_CASE("four traversals of a 2x2 map") {
    Tensor y = cross_scan(f64({1, 1, 2, 2}, {1, 2, 3, 4}));
    CHECK(y.shape() == Shape{1, 4, 1, 4});
    CHECK(y.to_vector() == std::vector<double>{1, 2, 3, 4, 1, 3, 2, 4, 4, 3, 2, 1, 4, 2, 3, 1});
  }

  TEST_CASE("single pixel") {
    for (double v : cross_scan(f64({1, 1, 1, 1}, {5})).to_vector()) CHECK(v == 5);
  }

  TEST_CASE("paths are permutations") {
    Rng rng(3);
    Tensor x = test::random({1, 1, 3, 5}, rng);
    auto ref = x.to_vector();
    std::sort(ref.begin(), ref.end());
    Tensor y = cross_scan(x);
    for (int p = 0; p < 4; ++p) {
      auto path = slice(y, 1, p, 1).to_vector();
      std::sort(path.begin(), path.end());
      CHECK(path == ref);
    }
  }

  TEST_CASE("merge of scan is four times the input") {
    Rng rng(4);
    Tensor x = test::random({2, 3, 4, 6}, rng);
    Tensor m = cross_merge(cross_scan(x), 4, 6);
    CHECK(test::max_abs_diff(m, mul_scalar(x, 4.0)) == 0.0);
  }

  TEST_CASE("one live path restores the input") {
    Rng rng(5);
    Tensor x = test::random({1, 2, 3, 3}, rng);
    Tensor y = cross_scan(x);
    Tensor only0 = concat({slice(y, 1, 0, 1), Tensor::zeros({1, 3, 2, 9}, DType::f64)}, 1);
    CHECK(test::bit_equal(cross_merge(only0, 3, 3), x));
  }

  TEST_CASE("merge is linear") {
    Rng rng(6);
    Tensor a = test::random({1, 4, 2, 6}, rng), b = test::random({1, 4, 2, 6}, rng);
    CHECK(test::max_abs_diff(cross_merge(add(a, b), 2, 3), add(cross_merge(a, 2, 3), cross_merge(b, 2, 3))) < 1e-15);
  }
}

TEST_SUITE("ss2d") {
  TEST_CASE("prefix sums in all four directions") {
    const std::int64_t h = 3, w = 4, l = h * w;
    Rng rng(7);
    Tensor x = test::random({1, 1, h, w}, rng);
    Tensor ones = Tensor::ones({4, 1, l}, DType::f64);
    Tensor y = ss2d_scan_merge(x, ones, f64({1, 1}, {0}), ones, ones, f64({1}, {0}));
    const auto xv = x.to_vector();
    auto at = [&](std::int64_t r, std::int64_t c) { return xv[static_cast<std::size_t>(r * w + c)]; };
    for (std::int64_t r = 0; r < h; ++r) {
      for (std::int64_t c = 0; c < w; ++c) {
        double fwd_row = 0, fwd_col = 0, bwd_row = 0, bwd_col = 0;
        for (std::int64_t k = 0; k <= r * w + c; ++k) fwd_row += at(k / w, k % w);
        for (std::int64_t k = r * w + c; k < l; ++k) bwd_row += at(k / w, k % w);
        for (std::int64_t k = 0; k <= c * h + r; ++k) fwd_col += at(k % h, k / h);
        for (std::int64_t k = c * h + r; k < l; ++k) bwd_col += at(k % h, k / h);
        CHECK(y.at(r * w + c) == doctest::Approx(fwd_row + bwd_row + fwd_col + bwd_col).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("module preserves shape") {
    Rng rng(8);
    DTypeScope ds(DType::f64);
    SS2D m(S6Options{16, 4, 1}, rng);
    CHECK(m.forward(test::random({2, 16, 8, 8}, rng)).shape() == Shape{2, 16, 8, 8});
  }

  TEST_CASE("gradient check at tiny dims") {
    Rng rng(9);
    DTypeScope ds(DType::f64);
    auto m = std::make_shared<SS2D>(S6Options{4, 2, 1}, rng);
    std::vector<Tensor> in{test::random({1, 4, 3, 3}, rng)};
    for (auto& p : m->parameters()) in.push_back(p);
    GradCheckOptions o;
    o.step = 1e-5;
    auto r = finite_difference_check("ss2d", [&](const std::vector<Tensor>& t) { return m->forward(t[0]); }, in, o);
    CHECK_MESSAGE(r.passed, "max rel error " << r.max_rel_error);
  }

  TEST_CASE("A is strictly negative at init") {
    Rng rng(10);
    S6Params p(S6Options{8, 16, 1}, rng);
    for (double v : p.a_matrix().to_vector()) CHECK(v < 0);
  }
}

TEST_SUITE("vss block") {
  TEST_CASE("zeroed out_proj is the identity") {
    Rng rng(11);
    VSSBlock b(VSSOptions{16, 2, 4}, rng);
    b.out_proj->weight.fill_(0.0);
    Tensor x = test::random({1, 16, 8, 8}, rng, -1, 1, DType::f32);
    NoGradGuard ng;
    CHECK(test::bit_equal(b.forward(x), x));
    VSSBlock b2(VSSOptions{16, 2, 4}, rng);
    b2.out_proj->weight.fill_(0.0);
    CHECK(test::bit_equal(b2.forward(b.forward(x)), x));
  }

  TEST_CASE("shape preservation") {
    Rng rng(12);
    VSSBlock b(VSSOptions{96, 2, 16}, rng);
    NoGradGuard ng;
    CHECK(b.forward(Tensor::zeros({1, 96, 56, 56})).shape() == Shape{1, 96, 56, 56});
  }
}
