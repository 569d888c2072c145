#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "tdsa/gradcheck.hpp"
#include "tdsa/nn.hpp"
#include "tdsa/ops.hpp"
#include "test_util.hpp"

namespace tdsa {
namespace {

using testing::random_tensor;
using V = Var<double>;

constexpr double kFdTol = 1e-6;

Tensor4<double> row(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor4<double>(Shape{1, 1, 1, n}, std::move(v));
}

TEST(OpsTest, ElementwiseMulValues) {
  Tape<double> tape;
  auto a = tape.leaf(row({2, 3}));
  auto b = tape.leaf(row({4, 5}));
  auto out = ops::mul(a, b);
  EXPECT_EQ(out.value().data(), (std::vector<double>{8, 15}));

  std::mt19937_64 rng(1);
  auto x = tape.leaf(random_tensor({2, 3, 2, 2}, rng));
  auto ones = tape.constant(Tensor4<double>(x.shape(), 1.0));
  EXPECT_EQ(ops::mul(x, ones).value().data(), x.value().data());
}

TEST(OpsTest, ElementwiseMulShapeMismatch) {
  Tape<double> tape;
  auto a = tape.leaf(Tensor4<double>(1, 2, 2, 2));
  auto b = tape.leaf(Tensor4<double>(1, 2, 2, 3));
  EXPECT_THROW(ops::mul(a, b), DimensionError);
}

TEST(OpsTest, ElementwiseMulGradient) {
  std::mt19937_64 rng(2);
  auto res = gradcheck([](Tape<double>&, const std::vector<V>& in) { return ops::sum(ops::mul(ops::mul(in[0], in[1]), in[0])); },
                       {random_tensor({2, 4, 3, 3}, rng), random_tensor({2, 4, 3, 3}, rng)});
  EXPECT_LT(res.max_rel_error, kFdTol);
}

TEST(OpsTest, SigmoidValuesAndSymmetry) {
  Tape<double> tape;
  EXPECT_DOUBLE_EQ(ops::sigmoid(tape.leaf(Tensor4<double>::scalar(0.0))).value().item(), 0.5);
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 4, 4}, rng, 4.0);
  auto s = ops::sigmoid(tape.leaf(x)).value();
  auto sn = ops::sigmoid(ops::scale(tape.leaf(x), -1.0)).value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(s[i] + sn[i], 1.0, 1e-15);
    EXPECT_GT(s[i], 0.0);
    EXPECT_LT(s[i], 1.0);
  }
}

TEST(OpsTest, SigmoidSaturatesWithoutOverflow) {
  Tape<double> tape;
  auto s = ops::sigmoid(tape.leaf(row({-1e4, 1e4}))).value();
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[1], 1.0);
}

TEST(OpsTest, SigmoidGradientIsSTimesOneMinusS) {
  Tape<double> tape;
  auto x = tape.leaf(row({-1.5, 0.0, 0.7}));
  auto s = ops::sigmoid(x);
  tape.backward(ops::sum(s));
  for (std::size_t i = 0; i < 3; ++i) {
    const double sv = s.value()[i];
    EXPECT_NEAR(tape.grad(x)[i], sv * (1 - sv), 1e-15);
  }
  std::mt19937_64 rng(4);
  auto res = gradcheck([](Tape<double>&, const std::vector<V>& in) { return ops::sum(ops::mul(ops::sigmoid(in[0]), in[1])); },
                       {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 2, 3, 3}, rng)});
  EXPECT_LT(res.max_rel_error, kFdTol);
}

TEST(OpsTest, SpatialSoftmaxClosedForms) {
  Tape<double> tape;
  auto u = ops::spatial_softmax(tape.leaf(row({2.0, 2.0}))).value();
  EXPECT_DOUBLE_EQ(u[0], 0.5);
  EXPECT_DOUBLE_EQ(u[1], 0.5);
  auto p = ops::spatial_softmax(tape.leaf(row({std::log(3.0), 0.0}))).value();
  EXPECT_NEAR(p[0], 0.75, 1e-15);
  EXPECT_NEAR(p[1], 0.25, 1e-15);
}

TEST(OpsTest, SpatialSoftmaxNormalizesAndIsShiftInvariant) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tape<double> tape;
    auto x = random_tensor({2, 3, 5, 4}, rng, 3.0);
    auto y = ops::spatial_softmax(tape.leaf(x)).value();
    auto shifted = x;
    std::uniform_real_distribution<double> shift(-50, 50);
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t c = 0; c < 3; ++c) {
        double k = shift(rng);
        for (double& v : shifted.plane(b, c)) v += k;
        double total = 0;
        for (double v : y.plane(b, c)) {
          EXPECT_GT(v, 0.0);
          total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
    }
    auto ys = ops::spatial_softmax(tape.leaf(shifted)).value();
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(ys[i], y[i], 1e-9);
  }
}

TEST(OpsTest, SpatialSoftmaxGradient) {
  std::mt19937_64 rng(6);
  auto res = gradcheck([](Tape<double>&, const std::vector<V>& in) { return ops::sum(ops::mul(ops::spatial_softmax(in[0]), in[1])); },
                       {random_tensor({2, 3, 3, 4}, rng), random_tensor({2, 3, 3, 4}, rng)});
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(BackwardTest, SumGivesOnes) {
  Tape<double> tape;
  std::mt19937_64 rng(7);
  auto x = tape.leaf(random_tensor({2, 2, 2, 2}, rng));
  auto grads = tape.backward(ops::sum(x));
  for (double g : grads.at(x.id).data()) EXPECT_EQ(g, 1.0);
}

TEST(BackwardTest, SquareGivesTwoX) {
  Tape<double> tape;
  std::mt19937_64 rng(8);
  auto x = tape.leaf(random_tensor({2, 2, 2, 2}, rng));
  auto grads = tape.backward(ops::sum(ops::mul(x, x)));
  for (std::size_t i = 0; i < x.value().size(); ++i) EXPECT_DOUBLE_EQ(grads.at(x.id)[i], 2 * x.value()[i]);
}

TEST(BackwardTest, SharedSubexpressionMatchesExpandedForm) {
  std::mt19937_64 rng(9);
  auto xv = random_tensor({1, 2, 3, 3}, rng);
  // Shared: s = sigmoid(x); L = sum(s*s + s)
  Tape<double> t1;
  auto x1 = t1.leaf(xv);
  auto s = ops::sigmoid(x1);
  t1.backward(ops::sum(ops::add(ops::mul(s, s), s)));
  // Expanded: every use of s rebuilt from x.
  Tape<double> t2;
  auto x2 = t2.leaf(xv);
  t2.backward(ops::sum(ops::add(ops::mul(ops::sigmoid(x2), ops::sigmoid(x2)), ops::sigmoid(x2))));
  for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_NEAR(t1.grad(x1)[i], t2.grad(x2)[i], 1e-15);
}

TEST(BackwardTest, UnreachedLeafGetsZeroGradient) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor4<double>::scalar(2.0));
  auto unused = tape.leaf(Tensor4<double>(1, 1, 2, 2, 1.0));
  auto grads = tape.backward(ops::mul(x, x));
  EXPECT_DOUBLE_EQ(grads.at(x.id).item(), 4.0);
  for (double g : grads.at(unused.id).data()) EXPECT_EQ(g, 0.0);
}

TEST(BackwardTest, DetachBlocksGradient) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor4<double>::scalar(3.0));
  auto grads = tape.backward(ops::mul(x, ops::detach(x)));
  EXPECT_DOUBLE_EQ(grads.at(x.id).item(), 3.0);
}

TEST(OpsTest, GroupMaxRoutesToFirstMaximum) {
  Tape<double> tape;
  // Two channels over 1x2: [1,2] and [3,0] -> [3,2]
  auto x = tape.leaf(Tensor4<double>(Shape{1, 2, 1, 2}, {1, 2, 3, 0}));
  auto m = ops::group_max(x, 2);
  EXPECT_EQ(m.value().data(), (std::vector<double>{3, 2}));
  auto tie = tape.leaf(Tensor4<double>(Shape{1, 2, 1, 1}, {5, 5}));
  auto grads = tape.backward(ops::sum(ops::group_max(tie, 2)));
  EXPECT_EQ(grads.at(tie.id).data(), (std::vector<double>{1, 0}));
  EXPECT_THROW(ops::group_max(x, 3), DimensionError);
}

TEST(OpsTest, ReductionsAndPoolingValues) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor4<double>(Shape{1, 2, 1, 2}, {1, 3, 5, 7}));
  EXPECT_DOUBLE_EQ(ops::sum(x).value().item(), 16.0);
  EXPECT_DOUBLE_EQ(ops::mean(x).value().item(), 4.0);
  EXPECT_EQ(ops::global_avg_pool(x).value().data(), (std::vector<double>{2, 6}));
  EXPECT_EQ(ops::spatial_sum(x).value().data(), (std::vector<double>{4, 12}));
  EXPECT_EQ(ops::channel_slice(x, 1, 1).value().data(), (std::vector<double>{5, 7}));
  auto cat = ops::concat_channels<double>({ops::channel_slice(x, 1, 1), ops::channel_slice(x, 0, 1)});
  EXPECT_EQ(cat.value().data(), (std::vector<double>{5, 7, 1, 3}));
  std::vector<double> mask{0.0, 2.0};
  EXPECT_EQ(ops::channel_scale(x, std::span<const double>(mask)).value().data(), (std::vector<double>{0, 0, 10, 14}));
  EXPECT_THROW(ops::channel_slice(x, 1, 2), DimensionError);
}

TEST(OpsTest, CrossEntropyValues) {
  Tape<double> tape;
  auto z = tape.leaf(Tensor4<double>(Shape{2, 2, 1, 1}, {0, 0, 10, 0}));
  std::vector<int> y{1, 0};
  const double expected = (std::log(2.0) + std::log1p(std::exp(-10.0))) / 2;
  EXPECT_NEAR(ops::softmax_cross_entropy(z, std::span<const int>(y)).value().item(), expected, 1e-14);
  std::vector<int> bad{0, 2};
  EXPECT_THROW(ops::softmax_cross_entropy(z, std::span<const int>(bad)), ContractError);
}

TEST(OpsTest, LogOfNonPositiveIsNumericError) {
  Tape<double> tape;
  auto x = tape.leaf(row({1.0, -1.0}));
  EXPECT_THROW(ops::log(x), NumericError);
}

// Every primitive through the finite-difference oracle, double precision.
TEST(OpsGradientSuite, AllPrimitivesMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  const Shape s{2, 4, 3, 3};
  auto w = random_tensor(s, rng);
  auto weigh = [w](Tape<double>& t, V v) { return ops::sum(ops::mul(v, t.constant(w))); };
  std::vector<int> labels{1, 3};
  std::vector<double> mask{1, 0, 2, -1};

  struct Case {
    const char* name;
    ExprBuilder build;
    std::vector<Tensor4<double>> inputs;
  };
  std::vector<Case> cases = {
      {"add", [&](auto& t, const auto& in) { return weigh(t, ops::add(in[0], in[1])); }, {random_tensor(s, rng), random_tensor(s, rng)}},
      {"sub", [&](auto& t, const auto& in) { return weigh(t, ops::sub(in[0], in[1])); }, {random_tensor(s, rng), random_tensor(s, rng)}},
      {"affine", [&](auto& t, const auto& in) { return weigh(t, ops::affine(in[0], 1.7, -0.3)); }, {random_tensor(s, rng)}},
      {"relu", [&](auto& t, const auto& in) { return weigh(t, ops::relu(in[0])); }, {random_tensor(s, rng)}},
      {"exp", [&](auto& t, const auto& in) { return weigh(t, ops::exp(in[0])); }, {random_tensor(s, rng)}},
      {"log", [&](auto& t, const auto& in) { return weigh(t, ops::log(ops::exp(in[0]))); }, {random_tensor(s, rng)}},
      {"mean", [&](auto&, const auto& in) { return ops::mean(ops::mul(in[0], in[0])); }, {random_tensor(s, rng)}},
      {"group_max", [&](auto& t, const auto& in) { return weigh(t, ops::concat_channels<double>({ops::group_max(in[0], 2), ops::group_max(in[0], 2)})); }, {random_tensor(s, rng)}},
      {"gap", [&](auto&, const auto& in) { return ops::sum(ops::mul(ops::global_avg_pool(in[0]), ops::global_avg_pool(in[0]))); }, {random_tensor(s, rng)}},
      {"slice_concat", [&](auto& t, const auto& in) { return weigh(t, ops::concat_channels<double>({ops::channel_slice(in[0], 2, 2), ops::channel_slice(in[0], 0, 2)})); }, {random_tensor(s, rng)}},
      {"channel_scale", [&](auto& t, const auto& in) { return weigh(t, ops::channel_scale(in[0], std::span<const double>(mask))); }, {random_tensor(s, rng)}},
      {"cross_entropy", [&](auto&, const auto& in) { return ops::softmax_cross_entropy(ops::global_avg_pool(in[0]), std::span<const int>(labels)); }, {random_tensor(s, rng)}},
      {"softmax", [&](auto& t, const auto& in) { return weigh(t, ops::spatial_softmax(in[0])); }, {random_tensor(s, rng)}},
  };
  for (const auto& c : cases) {
    auto res = gradcheck(c.build, c.inputs);
    EXPECT_LT(res.max_rel_error, 1e-4) << c.name;
  }
}

TEST(NnGradientSuite, LayersMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({2, 3, 5, 5}, rng);
  auto wconv = random_tensor({4, 3, 3, 3}, rng, 0.3);
  auto bconv = random_tensor({1, 4, 1, 1}, rng);
  auto out_w = random_tensor({2, 4, 5, 5}, rng);
  auto res = gradcheck(
      [&](auto& t, const auto& in) { return ops::sum(ops::mul(nn::conv2d(in[0], in[1], in[2], 1), t.constant(out_w))); },
      {x, wconv, bconv});
  EXPECT_LT(res.max_rel_error, 1e-4) << "conv2d";

  auto gamma = random_tensor({1, 3, 1, 1}, rng, 0.2, 1.0);
  auto beta = random_tensor({1, 3, 1, 1}, rng);
  auto bn_w = random_tensor({2, 3, 5, 5}, rng);
  res = gradcheck([&](auto& t, const auto& in) {
    return ops::sum(ops::mul(nn::batch_norm_train(in[0], in[1], in[2], 1e-5), t.constant(bn_w)));
  }, {x, gamma, beta});
  EXPECT_LT(res.max_rel_error, 1e-4) << "batch_norm_train";

  std::vector<double> rm{0.1, -0.2, 0.3}, rv{1.5, 0.7, 2.0};
  res = gradcheck([&](auto& t, const auto& in) {
    return ops::sum(ops::mul(nn::batch_norm_eval(in[0], in[1], in[2], std::span<const double>(rm),
                                                 std::span<const double>(rv), 1e-5),
                             t.constant(bn_w)));
  }, {x, gamma, beta});
  EXPECT_LT(res.max_rel_error, 1e-4) << "batch_norm_eval";

  auto pool_w = random_tensor({2, 3, 2, 2}, rng);
  res = gradcheck([&](auto& t, const auto& in) { return ops::sum(ops::mul(nn::max_pool2d(in[0], 2), t.constant(pool_w))); }, {x});
  EXPECT_LT(res.max_rel_error, 1e-4) << "max_pool2d";

  auto lx = random_tensor({3, 5, 1, 1}, rng);
  auto lw = random_tensor({4, 5, 1, 1}, rng);
  auto lb = random_tensor({1, 4, 1, 1}, rng);
  auto lo = random_tensor({3, 4, 1, 1}, rng);
  res = gradcheck([&](auto& t, const auto& in) { return ops::sum(ops::mul(nn::linear(in[0], in[1], in[2]), t.constant(lo))); },
                  {lx, lw, lb});
  EXPECT_LT(res.max_rel_error, 1e-4) << "linear";
}

TEST(NnTest, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(12);
  auto x = random_tensor({2, 2, 4, 3}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({1, 3, 1, 1}, rng);
  Tape<double> tape;
  auto y = nn::conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b), 1).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 3; ++o)
      for (long oy = 0; oy < 4; ++oy)
        for (long ox = 0; ox < 3; ++ox) {
          double acc = b[o];
          for (std::size_t c = 0; c < 2; ++c)
            for (long ky = 0; ky < 3; ++ky)
              for (long kx = 0; kx < 3; ++kx) {
                long iy = oy + ky - 1, ix = ox + kx - 1;
                if (iy < 0 || ix < 0 || iy >= 4 || ix >= 3) continue;
                acc += w.at(o, c, ky, kx) * x.at(n, c, iy, ix);
              }
          EXPECT_NEAR(y.at(n, o, oy, ox), acc, 1e-12);
        }
}

}  // namespace
}  // namespace tdsa
