#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "cosod/gradcheck.hpp"
#include "cosod/params.hpp"
#include "cosod/transformer.hpp"

using namespace cosod;
using Td = Tensor<double>;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.stage_channels = {4, 8, 8, 8};
  cfg.heads = 2;
  cfg.layers_tsir = 2;
  cfg.layers_tgl = 2;
  cfg.layers_tgf = 2;
  cfg.ffn_multiplier = 2;
  return cfg;
}

std::vector<Td> random_group(int n, int q, int d, std::uint64_t seed) {
  std::vector<Td> s;
  for (int i = 0; i < n; ++i) s.push_back(Td::uniform({q, d}, -1, 1, seed + i));
  return s;
}

double max_abs_diff(const Td& a, const Td& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Td rows(const Td& t, int start, int count) { return slice(t, 0, start, count); }

}  // namespace

TEST(PositionalEncoding, OriginIsSineZeroCosineOne) {
  const Td pe = positional_encoding_2d<double>(4, 4, 16);
  for (int c = 0; c < 16; ++c) EXPECT_EQ(pe[c], c % 2 == 0 ? 0.0 : 1.0);
}

TEST(PositionalEncoding, MatchesClosedForm) {
  const int h = 3, w = 5, d = 12, half = d / 2;
  const Td pe = positional_encoding_2d<double>(h, w, d);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < d; ++c) {
        const int pos = c < half ? x : y;
        const int k = (c % half) / 2;
        const double angle = pos / std::pow(10000.0, 2.0 * k / half);
        const double expect = c % 2 == 0 ? std::sin(angle) : std::cos(angle);
        EXPECT_NEAR(pe[(y * w + x) * d + c], expect, 1e-15);
      }
}

TEST(PositionalEncoding, BoundedAndDistinct) {
  const int h = 32, w = 32, d = 8;
  const Td pe = positional_encoding_2d<double>(h, w, d);
  for (double v : pe.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  int duplicates = 0;
  for (int a = 0; a < h * w; ++a)
    for (int b = a + 1; b < h * w; ++b) {
      bool same = true;
      for (int c = 0; c < d && same; ++c) same = pe[a * d + c] == pe[b * d + c];
      duplicates += same;
    }
  EXPECT_EQ(duplicates, 0);
  EXPECT_THROW(positional_encoding_2d<double>(2, 2, 6), ConfigError);
}

TEST(Attention, SingleTokenReturnsProjectedValue) {
  ParameterSet<double> params(1);
  const auto w = AttentionWeights<double>::create(params, "a", 8);
  const Td x = Td::uniform({1, 8}, -1, 1, 2), other = Td::uniform({1, 8}, -1, 1, 3);
  std::vector<Td> attn;
  const Td out = multi_head_attention(other, x, Td{}, Td{}, w, 2, &attn);
  const Td expect = w.output(w.value(x));
  EXPECT_LE(max_abs_diff(out, expect), 1e-14);
  ASSERT_EQ(attn.size(), 2u);
  for (const auto& a : attn) EXPECT_EQ(a.item(), 1.0);
}

TEST(Attention, RowsAreDistributions) {
  ParameterSet<double> params(4);
  const auto w = AttentionWeights<double>::create(params, "a", 8);
  std::vector<Td> attn;
  multi_head_attention(Td::uniform({3, 8}, -1, 1, 5), Td::uniform({5, 8}, -1, 1, 6), Td{}, Td{}, w, 4, &attn);
  ASSERT_EQ(attn.size(), 4u);
  for (const auto& a : attn) {
    ASSERT_EQ(a.shape(), (Shape{3, 5}));
    for (int r = 0; r < 3; ++r) {
      double total = 0;
      for (int c = 0; c < 5; ++c) total += a[r * 5 + c];
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Attention, PermutingTokensPermutesOutputs) {
  ParameterSet<double> params(7);
  const auto w = AttentionWeights<double>::create(params, "a", 8);
  const Td x = Td::uniform({5, 8}, -1, 1, 8);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  std::vector<Td> parts;
  for (int p : perm) parts.push_back(rows(x, p, 1));
  const Td xp = concat(parts, 0);
  const Td out = multi_head_attention(x, x, Td{}, Td{}, w, 2);
  const Td outp = multi_head_attention(xp, xp, Td{}, Td{}, w, 2);
  for (int k = 0; k < 5; ++k) EXPECT_LE(max_abs_diff(rows(outp, k, 1), rows(out, perm[k], 1)), 1e-12);
}

TEST(Attention, RejectsIndivisibleHeads) {
  ParameterSet<double> params(9);
  const auto w = AttentionWeights<double>::create(params, "a", 8);
  const Td x = Td::uniform({2, 8}, -1, 1, 10);
  EXPECT_THROW(multi_head_attention(x, x, Td{}, Td{}, w, 3), ConfigError);
}

TEST(Attention, GradientOverProjectionWeights) {
  ParameterSet<double> params(11);
  const auto w = AttentionWeights<double>::create(params, "a", 8);
  const Td x = Td::uniform({3, 8}, -1, 1, 12), pe = positional_encoding_2d<double>(1, 3, 8);
  const Td r = Td::uniform({3, 8}, -1, 1, 13);
  std::vector<Td> leaves;
  for (const auto& [_, t] : params.entries()) leaves.push_back(t);
  const auto rep =
      finite_diff_check([&] { return sum(multi_head_attention(x, x, pe, pe, w, 2) * r); }, leaves, 1e-5, 1e-4);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;
}

TEST(TransformerLayer, PreservesShapeAndNormalizesRows) {
  ParameterSet<double> params(14);
  const auto w = TransformerLayerWeights<double>::create(params, "l", 8, 4);
  const Td out = transformer_layer(Td::uniform({6, 8}, -1, 1, 15), positional_encoding_2d<double>(2, 3, 8), w, 2);
  ASSERT_EQ(out.shape(), (Shape{6, 8}));
  // Final layer norm with unit gain and zero bias at initialization.
  for (int r = 0; r < 6; ++r) {
    double m = 0;
    for (int c = 0; c < 8; ++c) m += out[r * 8 + c];
    EXPECT_NEAR(m / 8, 0.0, 1e-12);
  }
}

TEST(Tsir, OutputShape) {
  ModelConfig cfg = small_config();
  ParameterSet<double> params(16);
  const auto w = TsirWeights<double>::create(params, cfg);
  const Td f6 = Td::uniform({8, 2, 2}, -1, 1, 17);
  const Td s = tsir_forward(f6, positional_encoding_2d<double>(2, 2, 8), w, cfg);
  EXPECT_EQ(s.shape(), (Shape{4, 8}));
}

TEST(Tgl, SwappingImagesSwapsOutputBlocks) {
  const ModelConfig cfg = small_config();
  ParameterSet<double> params(18);
  const auto w = TglWeights<double>::create(params, cfg);
  auto s = random_group(3, 4, 8, 19);
  const Td g = tgl_forward(s, w, cfg);
  std::swap(s[0], s[1]);
  const Td gs = tgl_forward(s, w, cfg);
  // Attention sums run in a different order, so equality holds up to rounding.
  EXPECT_LE(max_abs_diff(rows(gs, 0, 4), rows(g, 4, 4)), 1e-12);
  EXPECT_LE(max_abs_diff(rows(gs, 4, 4), rows(g, 0, 4)), 1e-12);
  EXPECT_LE(max_abs_diff(rows(gs, 8, 4), rows(g, 8, 4)), 1e-12);
}

TEST(Tgl, PositionalEncodingBreaksTheSwap) {
  ModelConfig cfg = small_config();
  cfg.pe_in_tgl = true;
  ParameterSet<double> params(20);
  const auto w = TglWeights<double>::create(params, cfg);
  auto s = random_group(3, 4, 8, 21);
  const Td g = tgl_forward(s, w, cfg);
  std::swap(s[0], s[1]);
  const Td gs = tgl_forward(s, w, cfg);
  EXPECT_GT(max_abs_diff(rows(gs, 0, 4), rows(g, 4, 4)), 1e-3);
}

TEST(Tgl, ConcatBaselineNeedsFixedGroupSize) {
  ModelConfig cfg = small_config();
  cfg.tgl = TglMode::kConcatConv;
  cfg.group_size = 3;
  ParameterSet<double> params(22);
  const auto w = TglWeights<double>::create(params, cfg);
  EXPECT_EQ(tgl_forward(random_group(3, 4, 8, 23), w, cfg).shape(), (Shape{12, 8}));
  EXPECT_THROW(tgl_forward(random_group(4, 4, 8, 24), w, cfg), ShapeError);
}

TEST(Tgf, ConsensusIgnoresImageOrder) {
  const ModelConfig cfg = small_config();
  ParameterSet<double> params(25);
  const auto tgl = TglWeights<double>::create(params, cfg);
  const auto tgf = TgfWeights<double>::create(params, cfg);
  const auto pe = positional_encoding_2d<double>(2, 2, 8);
  auto s = random_group(4, 4, 8, 26);
  const Td fixed = s[2];
  const Td out = tgf_forward(fixed, tgl_forward(s, tgl, cfg), 4, pe, tgf, cfg);
  std::vector<int> perm{3, 1, 0, 2};
  std::vector<Td> sp;
  for (int p : perm) sp.push_back(s[p]);
  const Td outp = tgf_forward(fixed, tgl_forward(sp, tgl, cfg), 4, pe, tgf, cfg);
  EXPECT_LE(max_abs_diff(out, outp), 1e-12);
  EXPECT_EQ(out.shape(), (Shape{4, 8}));
}

TEST(Tgf, ConsensusIsTheProjectedImageMean) {
  const ModelConfig cfg = small_config();
  ParameterSet<double> params(27);
  const auto tgf = TgfWeights<double>::create(params, cfg);
  const Td g = Td::uniform({12, 8}, -1, 1, 28);
  const Td mean_rows = mul_scalar(rows(g, 0, 4) + rows(g, 4, 4) + rows(g, 8, 4), 1.0 / 3);
  EXPECT_LE(max_abs_diff(group_consensus(g, 3, tgf), tgf.proj(mean_rows)), 1e-14);
}

TEST(Tokens, MapRoundTrip) {
  const Td t = Td::uniform({6, 5}, -1, 1, 29);
  const Td m = tokens_to_map(t, 2, 3);
  EXPECT_EQ(m.shape(), (Shape{5, 2, 3}));
  EXPECT_EQ(m[1 * 6 + 4], t[4 * 5 + 1]);
  EXPECT_EQ(max_abs_diff(map_to_tokens(m), t), 0.0);
}
