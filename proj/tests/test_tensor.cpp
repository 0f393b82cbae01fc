#include <cmath>
#include <cstring>

#include <gtest/gtest.h>

#include "cosod/checkpoint.hpp"
#include "cosod/gradcheck.hpp"
#include "cosod/rng.hpp"
#include "cosod/tensor.hpp"

using namespace cosod;
using Td = Tensor<double>;
using Tf = Tensor<float>;

namespace {

std::vector<double> values(const Td& t) { return {t.data().begin(), t.data().end()}; }

Td leaf(const Shape& s, std::uint64_t seed, double lo = -1, double hi = 1) {
  Td t = Td::uniform(s, lo, hi, seed);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST(Creation, ZerosConstantAndSeededUniform) {
  EXPECT_EQ(values(Td::zeros({2, 2})), (std::vector<double>{0, 0, 0, 0}));
  EXPECT_EQ(values(Td::constant({3}, 1.5)), (std::vector<double>{1.5, 1.5, 1.5}));
  const Tf a = Tf::uniform({4}, 0.f, 1.f, 7), b = Tf::uniform({4}, 0.f, 1.f, 7);
  EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), 4 * sizeof(float)), 0);
  for (float v : a.data()) {
    EXPECT_GE(v, 0.f);
    EXPECT_LT(v, 1.f);
  }
  EXPECT_NE(values(Td::uniform({4}, 0, 1, 7)), values(Td::uniform({4}, 0, 1, 8)));
}

TEST(Elementwise, Examples) {
  EXPECT_EQ(values(relu(Td::from_data({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(sigmoid(Td::from_data({1}, {0})).item(), 0.5);
  EXPECT_EQ(values(Td::from_data({2}, {1, 2}) + Td::from_data({2}, {3, 4})), (std::vector<double>{4, 6}));
}

TEST(Elementwise, BroadcastsTrailingAxis) {
  const Td a = Td::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(values(a + Td::from_data({3}, {10, 20, 30})), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_EQ(values(a * Td::from_data({1}, {2})), (std::vector<double>{2, 4, 6, 8, 10, 12}));
  EXPECT_THROW(a + Td::zeros({2}), ShapeError);
}

TEST(Matmul, IdentityAndOnes) {
  const Td eye = Td::from_data({2, 2}, {1, 0, 0, 1});
  const Td m = Td::from_data({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(matmul(eye, m)), values(m));
  EXPECT_EQ(matmul(Td::from_data({1, 2}, {1, 1}), Td::from_data({2, 1}, {1, 1})).item(), 2.0);
  EXPECT_THROW(matmul(Td::zeros({2, 3}), Td::zeros({2, 3})), ShapeError);
}

TEST(Matmul, GradientMatchesCentralDifferences) {
  const Td a = leaf({3, 4}, 1), b = leaf({4, 2}, 2);
  const Td w = Td::uniform({3, 2}, -1, 1, 3);
  const auto rep = finite_diff_check([&] { return sum(matmul(a, b) * w); }, {a, b}, 1e-3, 1e-4);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(Conv2d, Examples) {
  const Td ones = Td::constant({1, 3, 3}, 1);
  const Td out = conv2d(ones, Td::constant({1, 1, 2, 2}, 1), Td::zeros({1}), 1, 0);
  EXPECT_EQ(out.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(values(out), (std::vector<double>{4, 4, 4, 4}));
  const Td x = Td::uniform({1, 4, 5}, -1, 1, 4);
  EXPECT_EQ(values(conv2d(x, Td::constant({1, 1, 1, 1}, 1), Td::zeros({1}))), values(x));
}

TEST(Conv2d, MatchesDirectLoopsWithStrideAndPadding) {
  const Td x = Td::uniform({2, 5, 6}, -1, 1, 5), w = Td::uniform({3, 2, 3, 3}, -1, 1, 6),
           b = Td::uniform({3}, -1, 1, 7);
  const Td out = conv2d(x, w, b, 2, 1);
  const int oh = (5 + 2 - 3) / 2 + 1, ow = (6 + 2 - 3) / 2 + 1;
  ASSERT_EQ(out.shape(), (Shape{3, oh, ow}));
  for (int o = 0; o < 3; ++o)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        double acc = b[o];
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = y * 2 - 1 + ky, ix = xx * 2 - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
              acc += w[((o * 2 + c) * 3 + ky) * 3 + kx] * x[(c * 5 + iy) * 6 + ix];
            }
        EXPECT_NEAR(out[(o * oh + y) * ow + xx], acc, 1e-12);
      }
}

TEST(Conv2d, GradientCheck) {
  const Td x = leaf({2, 5, 5}, 8), w = leaf({2, 2, 3, 3}, 9), b = leaf({2}, 10);
  const Td r = Td::uniform({2, 3, 3}, -1, 1, 11);
  const auto rep = finite_diff_check([&] { return sum(conv2d(x, w, b, 2, 1) * r); }, {x, w, b}, 1e-3, 1e-4);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(Pooling, MaxpoolAndUpsample) {
  EXPECT_EQ(maxpool2(Td::from_data({1, 2, 2}, {1, 2, 3, 4})).item(), 4.0);
  EXPECT_THROW(maxpool2(Td::zeros({1, 3, 2})), ShapeError);
  const Td up = upsample_bilinear(Td::constant({2, 3, 4}, 0.37), 2);
  EXPECT_EQ(up.shape(), (Shape{2, 6, 8}));
  for (double v : up.data()) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(Pooling, UpsampleUsesHalfPixelCenters) {
  // 1x2 -> 1x4: source coordinates -0.25, 0.25, 0.75, 1.25, clamped at the border.
  const Td up = upsample_bilinear(Td::from_data({1, 1, 2}, {0, 1}), 1, 4);
  EXPECT_EQ(values(up), (std::vector<double>{0, 0.25, 0.75, 1}));
}

TEST(Pooling, UpsampleGradientCheck) {
  const Td x = leaf({2, 2, 3}, 12);
  const Td r = Td::uniform({2, 5, 7}, -1, 1, 13);
  const auto rep = finite_diff_check([&] { return sum(upsample_bilinear(x, 5, 7) * r); }, {x}, 1e-3, 1e-4);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(Softmax, UniformStableAndNormalized) {
  const Td u = softmax(Td::zeros({3}), 0);
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3, 1e-15);
  const Td big = softmax(Td::from_data({2}, {1000, 0}), 0);
  EXPECT_NEAR(big[0], 1.0, 1e-12);
  EXPECT_NEAR(big[1], 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(big[0]) && std::isfinite(big[1]));
  const Td s = softmax(Td::uniform({4, 7}, -3, 3, 14), 1);
  for (int r = 0; r < 4; ++r) {
    double total = 0;
    for (int c = 0; c < 7; ++c) total += s[r * 7 + c];
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(LayerNorm, Examples) {
  const Td g = Td::constant({2}, 1), b = Td::zeros({2});
  const Td flat = layer_norm(Td::constant({1, 2}, 3.0), g, b);
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  const Td y = layer_norm(Td::from_data({1, 2}, {1, -1}), g, b, 1e-12);
  EXPECT_NEAR(y[0], 1.0, 1e-9);
  EXPECT_NEAR(y[1], -1.0, 1e-9);
}

TEST(LayerNorm, GradientCheck) {
  const Td x = leaf({3, 5}, 15, -2, 2), g = leaf({5}, 16, 0.5, 1.5), b = leaf({5}, 17);
  const Td r = Td::uniform({3, 5}, -1, 1, 18);
  const auto rep = finite_diff_check([&] { return sum(layer_norm(x, g, b) * r); }, {x, g, b}, 1e-3, 1e-4);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(Reductions, Examples) {
  EXPECT_EQ(mean(Td::from_data({3}, {1, 2, 3})).item(), 2.0);
  EXPECT_EQ(values(sum(Td::from_data({2, 2}, {1, 2, 3, 4}), 0)), (std::vector<double>{4, 6}));
  const Td x = leaf({2, 5}, 19);
  backward(mean(x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.1);
}

TEST(Concat, ExampleAndRoundTrip) {
  EXPECT_EQ(concat(std::vector<Td>{Td::from_data({1, 1}, {1}), Td::from_data({1, 1}, {2})}, 0).shape(), (Shape{2, 1}));
  const Td a = Td::uniform({2, 3}, -1, 1, 20), b = Td::uniform({2, 4}, -1, 1, 21);
  const Td c = concat(std::vector<Td>{a, b}, 1);
  EXPECT_EQ(values(slice(c, 1, 0, 3)), values(a));
  EXPECT_EQ(values(slice(c, 1, 3, 4)), values(b));
}

TEST(Concat, GradientCheck) {
  const Td a = leaf({2, 3}, 22), b = leaf({1, 3}, 23);
  const Td r = Td::uniform({3, 3}, -1, 1, 24);
  const auto rep = finite_diff_check([&] { return sum(concat(std::vector<Td>{a, b}, 0) * r); }, {a, b}, 1e-3, 1e-4);
  EXPECT_TRUE(rep.pass);
}

TEST(Backward, AnalyticExamples) {
  const Td x = leaf({2, 3}, 25);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  const Td y = Td::from_data({2}, {1, 2});
  y.storage()->requires_grad = true;
  backward(sum(y * y));
  EXPECT_EQ(std::vector<double>(y.grad().begin(), y.grad().end()), (std::vector<double>{2, 4}));
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  const Td x = leaf({3}, 26);
  backward(sum(x));
  backward(sum(mul_scalar(x, 2.0)));
  for (double g : x.grad()) EXPECT_EQ(g, 3.0);
}

TEST(Backward, NoGradGuardStopsRecording) {
  const Td x = leaf({3}, 27);
  Td y;
  {
    NoGradGuard guard;
    y = sum(square(x));
    EXPECT_EQ(Tape<double>::current().size(), 0u);
  }
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, CompositeChainMatchesFiniteDifferences) {
  const Td x = leaf({1, 6, 6}, 28), w = leaf({2, 1, 3, 3}, 29), b = leaf({2}, 30, 0.1, 0.5);
  const auto rep = finite_diff_check([&] { return mean(relu(conv2d(x, w, b, 1, 1))); }, {x, w, b}, 1e-6, 1e-4);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(GradCheck, SumHasExactConstantGradient) {
  const auto rep = finite_diff_check([](const Td& x) { return sum(x); }, Td::uniform({5}, -1, 1, 31), 1e-3, 1e-4);
  EXPECT_LE(rep.max_rel_err, 1e-10);
}

TEST(GradCheck, BinaryCrossEntropyAgainstFixedTarget) {
  const Td t = Td::from_data({4}, {1, 0, 1, 0});
  auto bce = [&](const Td& p) {
    return neg(mean(t * log(p) + (add_scalar(neg(t), 1.0)) * log(add_scalar(neg(p), 1.0))));
  };
  const auto rep = finite_diff_check(bce, Td::uniform({4}, 0.1, 0.9, 32), 1e-3, 1e-4);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(GradCheck, DetectsAWrongBackwardRule) {
  // Forward is x^2 but the recorded backward claims 3x.
  auto broken = [](const Td& x) {
    Td out = Td::from_data(x.shape(), {x.data().begin(), x.data().end()});
    for (auto& v : out.mutable_data()) v = v * v;
    out.set_requires_grad(true);
    Tape<double>::current().record({out.storage(), [xs = x.storage(), os = out.storage()](const std::vector<double>& g) {
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                        xs->accumulate_grad(i, 3 * xs->data[i] * g[i]);
                                    }});
    return sum(out);
  };
  const auto rep = finite_diff_check(broken, Td::uniform({3}, 0.5, 1, 33), 1e-3, 1e-4);
  EXPECT_FALSE(rep.pass);
}

TEST(Checkpoint, RoundTripIsBitwiseExact) {
  std::vector<NamedTensor> tensors{{"a.weight", Tf::uniform({3, 4}, -1, 1, 34)},
                                   {"b", Tf::from_data({1}, {-0.0f})},
                                   {"c.bias", Tf::from_data({2}, {std::nanf(""), 1e-38f})}};
  const std::string bytes = encode_checkpoint(tensors);
  EXPECT_EQ(bytes.substr(0, 6), "COSF1\n");
  const auto back = decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), tensors.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].name, tensors[i].name);
    EXPECT_EQ(back[i].tensor.shape(), tensors[i].tensor.shape());
    EXPECT_EQ(std::memcmp(back[i].tensor.data().data(), tensors[i].tensor.data().data(),
                          tensors[i].tensor.numel() * sizeof(float)),
              0);
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, RejectsCorruptInput) {
  const std::string bytes = encode_checkpoint({{"w", Tf::zeros({2, 2})}});
  EXPECT_THROW(decode_checkpoint("XXXXX\n" + bytes.substr(6)), ParseError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), ParseError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), ParseError);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), IoError);
}

TEST(Rng, StableStreams) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(1);
  for (int i = 0; i < 1000; ++i) {
    const int v = c.uniform_int(-3, 5);
    EXPECT_GE(v, -3);
    EXPECT_LE(v, 5);
  }
  EXPECT_NE(Rng::combine(1, 2), Rng::combine(2, 1));
}
