#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ehpe/autodiff/ops.hpp"
#include "support/gradcheck.hpp"

using namespace ehpe;
using ad::Tape;
using ad::Tensor;
using ehpe::test::check_gradients;
using ehpe::test::random_values;
using ehpe::test::weighted_sum;

namespace {

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(Elementwise, AddAndBackward) {
  Tape t;
  auto a = t.variable({2}, {1, 2});
  auto b = t.variable({2}, {3, 4});
  auto c = ad::add(a, b);
  EXPECT_EQ(vec(c.data()), (std::vector<double>{4, 6}));
  t.backward(ad::sum(c));
  EXPECT_EQ(vec(a.grad()), (std::vector<double>{1, 1}));
  EXPECT_EQ(vec(b.grad()), (std::vector<double>{1, 1}));
}

TEST(Elementwise, ReluForwardAndGrad) {
  Tape t;
  auto x = t.variable({2}, {-1, 2});
  auto y = ad::relu(x);
  EXPECT_EQ(vec(y.data()), (std::vector<double>{0, 2}));
  t.backward(ad::sum(ad::mul(y, t.constant({2}, {5, 5}))));
  EXPECT_EQ(vec(x.grad()), (std::vector<double>{0, 5}));
}

TEST(Elementwise, LeakyReluSlope) {
  Tape t;
  auto y = ad::leaky_relu(t.constant({1}, {-2.0}));
  EXPECT_DOUBLE_EQ(y.item(), -0.02);
}

TEST(Elementwise, OpKindDispatch) {
  Tape t;
  auto a = t.constant({2}, {4, 9});
  EXPECT_EQ(vec(ad::elementwise(ad::OpKind::kSqrt, a).data()), (std::vector<double>{2, 3}));
  EXPECT_EQ(vec(ad::elementwise(ad::OpKind::kMul, a, a).data()), (std::vector<double>{16, 81}));
  EXPECT_EQ(vec(ad::elementwise(ad::OpKind::kSub, a, t.constant({1}, {1})).data()),
            (std::vector<double>{3, 8}));
}

TEST(Elementwise, BroadcastMismatchRejected) {
  Tape t;
  auto a = t.constant({2, 3}, std::vector<double>(6, 1.0));
  auto b = t.constant({2}, {1, 2});
  EXPECT_THROW(ad::add(a, b), ad::ShapeError);
}

TEST(Elementwise, BroadcastGradientIsSliceSum) {
  Tape t;
  auto a = t.variable({3, 4}, random_values(12, 1));
  auto b = t.variable({4}, random_values(4, 2));
  auto up = random_values(12, 3);
  auto c = ad::add(a, b);
  t.backward(ad::sum(ad::mul(c, t.constant({3, 4}, up))));
  const double gb = std::accumulate(b.grad().begin(), b.grad().end(), 0.0);
  const double gup = std::accumulate(up.begin(), up.end(), 0.0);
  EXPECT_NEAR(gb, gup, 1e-12);
  for (std::size_t j = 0; j < 4; ++j)
    EXPECT_NEAR(b.grad()[j], up[j] + up[4 + j] + up[8 + j], 1e-12);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  const std::vector<ad::Shape> shapes = {{5}, {2, 3}, {2, 1, 4}};
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    const auto& sh = shapes[s];
    const std::size_t n = ad::numel(sh);
    for (auto kind : {ad::OpKind::kRelu, ad::OpKind::kLeakyRelu, ad::OpKind::kSquare, ad::OpKind::kAbs}) {
      auto r = check_gradients({sh}, {random_values(n, 10 + s)}, [&](Tape&, const auto& in) {
        return weighted_sum(ad::elementwise(kind, in[0]), 7);
      });
      EXPECT_LT(r.max_rel_error, 1e-4) << "kind " << static_cast<int>(kind);
    }
    auto rs = check_gradients({sh}, {random_values(n, 20 + s, 0.2, 2.0)}, [&](Tape&, const auto& in) {
      return weighted_sum(ad::sqrt(in[0]), 8);
    });
    EXPECT_LT(rs.max_rel_error, 1e-4);
    // Binary kinds, with the second operand broadcast over the leading axis.
    ad::Shape tail(sh.begin() + 1, sh.end());
    if (tail.empty()) tail = {1};
    for (auto kind : {ad::OpKind::kAdd, ad::OpKind::kSub, ad::OpKind::kMul}) {
      auto r = check_gradients({sh, tail}, {random_values(n, 30 + s), random_values(ad::numel(tail), 40 + s)},
                               [&](Tape&, const auto& in) {
                                 return weighted_sum(ad::elementwise(kind, in[0], in[1]), 9);
                               });
      EXPECT_LT(r.max_rel_error, 1e-4);
    }
  }
}

TEST(Matmul, IdentityAndHandComputed) {
  Tape t;
  auto id = t.constant({2, 2}, {1, 0, 0, 1});
  auto m = t.constant({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(vec(ad::matmul(id, m).data()), (std::vector<double>{1, 2, 3, 4}));
  auto r = ad::matmul(t.constant({1, 2}, {1, 2}), t.constant({2, 1}, {3, 4}));
  EXPECT_EQ(r.shape(), (ad::Shape{1, 1}));
  EXPECT_DOUBLE_EQ(r.item(), 11.0);
}

TEST(Matmul, InnerDimensionMismatchRejected) {
  Tape t;
  EXPECT_THROW(ad::matmul(t.constant({2, 3}, std::vector<double>(6)), t.constant({2, 2}, std::vector<double>(4))),
               ad::ShapeError);
}

TEST(Matmul, GradientsMatchFiniteDifferences) {
  const std::vector<std::array<std::size_t, 3>> dims = {{3, 4, 2}, {1, 5, 3}, {4, 2, 6}};
  for (std::size_t s = 0; s < dims.size(); ++s) {
    auto [m, k, n] = dims[s];
    auto r = check_gradients({{m, k}, {k, n}}, {random_values(m * k, 50 + s), random_values(k * n, 60 + s)},
                             [](Tape&, const auto& in) { return weighted_sum(ad::matmul(in[0], in[1]), 3); });
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
  auto r = check_gradients({{2, 3, 4}, {2, 4, 2}}, {random_values(24, 70), random_values(16, 71)},
                           [](Tape&, const auto& in) { return weighted_sum(ad::bmm(in[0], in[1]), 4); });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Conv2d, IdentityKernel) {
  Tape t;
  auto x = t.constant({2, 3, 3}, random_values(18, 5));
  auto k = t.constant({2, 2, 1, 1}, {1, 0, 0, 1});
  auto y = ad::conv2d(x, k, 1, 0);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(vec(y.data()), vec(x.data()));
}

TEST(Conv2d, AllOnesSummation) {
  Tape t;
  auto y = ad::conv2d(t.constant({1, 3, 3}, std::vector<double>(9, 1.0)),
                      t.constant({1, 1, 3, 3}, std::vector<double>(9, 1.0)), 1, 0);
  EXPECT_EQ(y.shape(), (ad::Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
}

TEST(Conv2d, OutputShapeArithmetic) {
  Tape t;
  auto y = ad::conv2d(t.constant({2, 3, 7, 6}, std::vector<double>(252, 0.5)),
                      t.constant({4, 3, 3, 3}, std::vector<double>(108, 0.1)), 2, 1);
  EXPECT_EQ(y.shape(), (ad::Shape{2, 4, 4, 3}));
}

TEST(Conv2d, KernelLargerThanPaddedInputRejected) {
  Tape t;
  EXPECT_THROW(ad::conv2d(t.constant({1, 2, 2}, std::vector<double>(4)),
                          t.constant({1, 1, 5, 5}, std::vector<double>(25)), 1, 1),
               ad::ShapeError);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  struct Case { ad::Shape x, k; std::size_t stride, pad; };
  const std::vector<Case> cases = {
      {{2, 5, 5}, {3, 2, 3, 3}, 1, 0},
      {{2, 2, 6, 5}, {3, 2, 3, 3}, 2, 1},
      {{1, 4, 4}, {2, 1, 1, 1}, 1, 0},
  };
  for (std::size_t s = 0; s < cases.size(); ++s) {
    const auto& c = cases[s];
    auto r = check_gradients({c.x, c.k}, {random_values(ad::numel(c.x), 80 + s), random_values(ad::numel(c.k), 90 + s)},
                             [&](Tape&, const auto& in) {
                               return weighted_sum(ad::conv2d(in[0], in[1], c.stride, c.pad), 5);
                             });
    EXPECT_LT(r.max_rel_error, 1e-4) << "case " << s;
  }
}

TEST(Maxpool, Basic) {
  Tape t;
  auto y = ad::maxpool2d(t.constant({1, 2, 2}, {1, 2, 3, 4}), 2, 2);
  EXPECT_DOUBLE_EQ(y.item(), 4.0);
}

TEST(Maxpool, TiesRouteToFirstOccurrence) {
  Tape t;
  auto x = t.variable({1, 4, 4}, std::vector<double>(16, 3.0));
  auto y = ad::maxpool2d(x, 2, 2);
  for (double v : y.data()) EXPECT_EQ(v, 3.0);
  t.backward(ad::sum(y));
  std::vector<double> expect(16, 0.0);
  expect[0] = expect[2] = expect[8] = expect[10] = 1.0;
  EXPECT_EQ(vec(x.grad()), expect);
}

TEST(Maxpool, MatchesBruteForceWindowScan) {
  Tape t;
  auto xv = random_values(16, 11);
  auto y = ad::maxpool2d(t.constant({1, 4, 4}, xv), 2, 2);
  ASSERT_EQ(y.shape(), (ad::Shape{1, 2, 2}));
  for (std::size_t oy = 0; oy < 2; ++oy)
    for (std::size_t ox = 0; ox < 2; ++ox) {
      double m = -1e300;
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, xv[(2 * oy + dy) * 4 + 2 * ox + dx]);
      EXPECT_EQ(y.at(oy * 2 + ox), m);
    }
}

TEST(Maxpool, WindowExceedsInputRejected) {
  Tape t;
  EXPECT_THROW(ad::maxpool2d(t.constant({1, 2, 2}, std::vector<double>(4)), 3, 1), ad::ShapeError);
}

TEST(Maxpool, GradientsMatchFiniteDifferences) {
  const std::vector<ad::Shape> shapes = {{1, 4, 4}, {2, 6, 6}, {2, 1, 5, 4}};
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    auto r = check_gradients({shapes[s]}, {random_values(ad::numel(shapes[s]), 100 + s)},
                             [](Tape&, const auto& in) { return weighted_sum(ad::maxpool2d(in[0], 2, 2), 6); });
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(Softmax, UniformAndStable) {
  Tape t;
  auto y = ad::softmax(t.constant({3}, {0, 0, 0}), 0);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto z = ad::softmax(t.constant({2}, {1000, 0}), 0);
  EXPECT_NEAR(z.at(0), 1.0, 1e-12);
  EXPECT_NEAR(z.at(1), 0.0, 1e-12);
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
  auto xv = random_values(7, 12, -3, 3);
  for (std::size_t out = 0; out < 7; ++out) {
    auto r = check_gradients({{7}}, {xv}, [&](Tape&, const auto& in) {
      return ad::index_select(ad::softmax(in[0], 0), 0, {out});
    });
    EXPECT_LT(r.max_rel_error, 1e-4) << "row " << out;
  }
  for (int axis : {0, 1, 2}) {
    auto r = check_gradients({{2, 3, 4}}, {random_values(24, 13 + axis, -2, 2)},
                             [&](Tape&, const auto& in) { return weighted_sum(ad::softmax(in[0], axis), 2); });
    EXPECT_LT(r.max_rel_error, 1e-4);
  }
}

TEST(Softmax, RowsSumToOneOnWideRange) {
  Tape t;
  auto xv = random_values(5 * 9, 14, -1e4, 1e4);
  auto y = ad::softmax(t.constant({5, 9}, xv), 1);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      ASSERT_TRUE(std::isfinite(y.at(r * 9 + c)));
      s += y.at(r * 9 + c);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(GridSample, ExactCellAndMidpoint) {
  Tape t;
  auto fv = random_values(3 * 4 * 4, 15);
  auto f = t.constant({3, 4, 4}, fv);
  auto on = ad::grid_sample_bilinear(f, t.constant({1, 2}, {2.0, 1.0}));  // column 2, row 1
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(on.at(c), fv[c * 16 + 1 * 4 + 2]);
  auto mid = ad::grid_sample_bilinear(f, t.constant({1, 2}, {1.5, 3.0}));
  for (std::size_t c = 0; c < 3; ++c)
    EXPECT_NEAR(mid.at(c), 0.5 * (fv[c * 16 + 12 + 1] + fv[c * 16 + 12 + 2]), 1e-15);
}

TEST(GridSample, OutOfRangeClampsToBorder) {
  Tape t;
  auto fv = random_values(2 * 3 * 3, 16);
  auto s = ad::grid_sample_bilinear(t.constant({2, 3, 3}, fv), t.constant({1, 2}, {-4.0, 9.0}));
  for (std::size_t c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(s.at(c), fv[c * 9 + 2 * 3 + 0]);
}

TEST(GridSample, GradientsMatchFiniteDifferences) {
  std::vector<double> pts = random_values(10, 17, 0.2, 2.8);  // interior of a 4x4 map
  auto r = check_gradients({{3, 4, 4}, {5, 2}}, {random_values(48, 18), pts}, [](Tape&, const auto& in) {
    return weighted_sum(ad::grid_sample_bilinear(in[0], in[1]), 3);
  });
  EXPECT_LT(r.max_rel_error, 1e-4);
  auto rb = check_gradients({{2, 3, 5, 4}, {2, 3, 2}}, {random_values(120, 19), random_values(12, 20, 0.1, 2.9)},
                            [](Tape&, const auto& in) { return weighted_sum(ad::grid_sample_bilinear(in[0], in[1]), 4); });
  EXPECT_LT(rb.max_rel_error, 1e-4);
  auto r3 = check_gradients({{1, 6, 6}, {4, 2}}, {random_values(36, 21), random_values(8, 22, 0.3, 4.7)},
                            [](Tape&, const auto& in) { return weighted_sum(ad::grid_sample_bilinear(in[0], in[1]), 5); });
  EXPECT_LT(r3.max_rel_error, 1e-4);
}

TEST(Backward, SeedAndFanOut) {
  Tape t;
  auto x = t.variable({1}, {3.0});
  t.backward(x);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);

  Tape t2;
  auto y = t2.variable({1}, {3.0});
  t2.backward(ad::add(y, y));
  EXPECT_DOUBLE_EQ(y.grad()[0], 2.0);
}

TEST(Backward, NonScalarLossRejected) {
  Tape t;
  auto x = t.variable({2}, {1, 2});
  EXPECT_THROW(t.backward(x), ad::ShapeError);
}

TEST(Backward, DeterministicBitIdentical) {
  auto run = [] {
    Tape t;
    auto x = t.variable({2, 3, 6, 6}, random_values(216, 23));
    auto k = t.variable({4, 3, 3, 3}, random_values(108, 24));
    auto y = ad::softmax(ad::maxpool2d(ad::relu(ad::conv2d(x, k, 1, 1)), 2, 2), 1);
    t.backward(weighted_sum(y, 1));
    auto g = vec(x.grad());
    g.insert(g.end(), k.grad().begin(), k.grad().end());
    return g;
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  Tape t;
  auto a = t.variable({2, 2}, random_values(4, 25));
  auto b = ad::matmul(a, ad::transpose(a));
  auto c = ad::sum(ad::square(ad::concat({a, b}, 0)));
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t in : t.node(i).inputs) EXPECT_LT(in, i);
  (void)c;
}

TEST(ShapeOps, PermuteConcatSliceGradients) {
  auto r = check_gradients({{2, 3, 4}, {2, 1, 4}}, {random_values(24, 26), random_values(8, 27)},
                           [](Tape&, const auto& in) {
                             auto c = ad::concat({in[0], in[1]}, 1);
                             auto p = ad::permute(c, {2, 0, 1});
                             auto s = ad::slice(p, 2, 1, 4);
                             return weighted_sum(ad::sum(ad::upsample_nearest(s, 2), 0), 9);
                           });
  EXPECT_LT(r.max_rel_error, 1e-4);
}
