#include <gtest/gtest.h>

#include "tdsa/gradcheck.hpp"
#include "tdsa/oracle.hpp"
#include "tdsa/resample.hpp"
#include "test_util.hpp"

namespace tdsa {
namespace {

using testing::random_tensor;
using V = Var<double>;

constexpr UpsampleMethod kAll[] = {UpsampleMethod::kNearest, UpsampleMethod::kBilinear, UpsampleMethod::kBicubic};

TEST(UpsampleTest, NearestReplicatesSinglePixel) {
  Tape<double> tape;
  auto out = upsample(tape.leaf(Tensor4<double>(Shape{1, 1, 1, 1}, {4.25})), UpsampleMethod::kNearest, 2, 2).value();
  EXPECT_EQ(out.data(), (std::vector<double>{4.25, 4.25, 4.25, 4.25}));
}

TEST(UpsampleTest, BilinearHalfPixelRow) {
  // src = (dst + 0.5) * 0.5 - 0.5 = {-0.25, 0.25, 0.75, 1.25}, taps clamped.
  Tape<double> tape;
  auto out = upsample(tape.leaf(Tensor4<double>(Shape{1, 1, 1, 2}, {1, 3})), UpsampleMethod::kBilinear, 1, 4).value();
  const std::vector<double> expected{1.0, 1.5, 2.5, 3.0};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out[i], expected[i], 1e-15);
}

TEST(UpsampleTest, ConstantInputsStayConstant) {
  for (UpsampleMethod m : kAll) {
    for (auto [ih, iw, oh, ow] : {std::array<std::size_t, 4>{1, 1, 3, 5}, {2, 3, 4, 9}, {3, 3, 7, 5}, {4, 4, 16, 16}}) {
      Tape<double> tape;
      auto out = upsample(tape.leaf(Tensor4<double>(Shape{2, 2, ih, iw}, -2.5)), m, oh, ow).value();
      for (double v : out.data()) EXPECT_NEAR(v, -2.5, 1e-6) << to_string(m);
    }
  }
}

TEST(UpsampleTest, RejectsDownscale) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor4<double>(1, 1, 4, 4));
  EXPECT_THROW(upsample(x, UpsampleMethod::kBilinear, 2, 8), ContractError);
}

TEST(UpsampleTest, NearestIsIdempotentAtIntegerFactors) {
  std::mt19937_64 rng(21);
  for (std::size_t f : {1, 2, 3, 4}) {
    auto x = random_tensor({2, 3, 3, 5}, rng);
    Tape<double> tape;
    auto up = upsample(tape.leaf(x), UpsampleMethod::kNearest, 3 * f, 5 * f).value();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 3; ++y)
          for (std::size_t xx = 0; xx < 5; ++xx) EXPECT_EQ(up.at(b, c, y * f, xx * f), x.at(b, c, y, xx));
  }
}

TEST(UpsampleTest, BicubicOvershootIsBoundedOnRamps) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> step(0.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    // Monotone row, including hard steps.
    Tensor4<double> x(1, 1, 1, 6);
    double v = 0;
    for (std::size_t i = 0; i < 6; ++i) {
      v += (trial % 3 == 0 && i != 3) ? 0.0 : step(rng);
      x[i] = v;
    }
    const double lo = x[0], hi = x[5], range = hi - lo;
    Tape<double> tape;
    auto out = upsample(tape.leaf(x), UpsampleMethod::kBicubic, 1, 24).value();
    for (double o : out.data()) {
      EXPECT_GE(o, lo - 0.25 * range - 1e-12);
      EXPECT_LE(o, hi + 0.25 * range + 1e-12);
    }
  }
}

TEST(UpsampleTest, MatchesNaivePerPixelInterpolation) {
  std::mt19937_64 rng(23);
  for (UpsampleMethod m : kAll) {
    for (auto [ih, iw, oh, ow] : {std::array<std::size_t, 4>{2, 2, 4, 4}, {3, 2, 7, 6}, {4, 5, 8, 10}, {1, 3, 2, 9}}) {
      auto x = random_tensor({2, 2, ih, iw}, rng);
      Tape<double> tape;
      auto out = upsample(tape.leaf(x), m, oh, ow).value();
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
              EXPECT_NEAR(out.at(b, c, y, xx), oracle::naive_sample(x, b, c, y, xx, oh, ow, m), 1e-12)
                  << to_string(m);
            }
    }
  }
}

TEST(UpsampleTest, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(24);
  for (UpsampleMethod m : kAll) {
    auto x = random_tensor({2, 2, 3, 3}, rng);
    auto w = random_tensor({2, 2, 7, 6}, rng);
    auto res = gradcheck([&](Tape<double>& t, const std::vector<V>& in) {
      return ops::sum(ops::mul(upsample(in[0], m, 7, 6), t.constant(w)));
    }, {x});
    EXPECT_LT(res.max_rel_error, 1e-6) << to_string(m);
  }
}

TEST(ChannelRepeatTest, OrderAndIdentity) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor4<double>(Shape{1, 2, 1, 1}, {7, 9}));
  EXPECT_EQ(channel_repeat(x, 1).value().data(), (std::vector<double>{7, 9}));
  EXPECT_EQ(channel_repeat(x, 2).value().data(), (std::vector<double>{7, 7, 9, 9}));
  EXPECT_EQ(channel_repeat(x, 3).value().data(), (std::vector<double>{7, 7, 7, 9, 9, 9}));
  EXPECT_THROW(channel_repeat(x, 0), ContractError);
}

TEST(ChannelRepeatTest, GradientSumsCopies) {
  std::mt19937_64 rng(25);
  auto x = random_tensor({2, 3, 2, 2}, rng);
  auto w = random_tensor({2, 6, 2, 2}, rng);
  auto res = gradcheck([&](Tape<double>& t, const std::vector<V>& in) {
    return ops::sum(ops::mul(channel_repeat(in[0], 2), t.constant(w)));
  }, {x});
  EXPECT_LT(res.max_rel_error, 1e-6);
  Tape<double> tape;
  auto xl = tape.leaf(x);
  tape.backward(ops::sum(ops::mul(channel_repeat(xl, 2), tape.constant(w))));
  EXPECT_NEAR(tape.grad(xl).at(1, 2, 1, 0), w.at(1, 4, 1, 0) + w.at(1, 5, 1, 0), 1e-15);
}

TEST(ResizeTest, DownscaleAllowedForLoading) {
  Tensor4<float> x(1, 1, 4, 4, 2.0f);
  auto y = resize(x, UpsampleMethod::kBilinear, 2, 3);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 3}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 2.0f);
}

}  // namespace
}  // namespace tdsa
