#include <cmath>

#include <gtest/gtest.h>

#include "cosod/losses.hpp"
#include "cosod/rng.hpp"

using namespace cosod;
using Td = Tensor<double>;
using Opt = std::optional<Td>;

namespace {

Td binary_map(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(h * w);
  for (auto& x : v) x = rng.uniform01() < 0.4 ? 1.0 : 0.0;
  v[0] = 1.0;
  v[1] = 0.0;
  return Td::from_data({h, w}, v);
}

Td one_minus(const Td& t) { return add_scalar(neg(t), 1.0); }

BinaryMask mask_of(int h, int w, std::vector<int> bits) {
  BinaryMask m = BinaryMask::zeros(h, w);
  for (int i = 0; i < h * w; ++i) m.bits[i] = static_cast<std::uint8_t>(bits[i]);
  return m;
}

Td row(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Td::from_data({1, n}, std::move(v));
}

// SSIM of one window from its sample statistics.
double window_ssim(const std::vector<double>& m, const std::vector<double>& t, double c1, double c2) {
  const double n = static_cast<double>(m.size());
  double mu_m = 0, mu_t = 0;
  for (std::size_t i = 0; i < m.size(); ++i) mu_m += m[i] / n, mu_t += t[i] / n;
  double vm = 0, vt = 0, cov = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    vm += (m[i] - mu_m) * (m[i] - mu_m) / n;
    vt += (t[i] - mu_t) * (t[i] - mu_t) / n;
    cov += (m[i] - mu_m) * (t[i] - mu_t) / n;
  }
  return (2 * mu_m * mu_t + c1) * (2 * cov + c2) / ((mu_m * mu_m + mu_t * mu_t + c1) * (vm + vt + c2));
}

}  // namespace

TEST(Bce, PerfectPredictionAndSymmetricPoint) {
  const LossConfig cfg;
  const Td t = binary_map(8, 8, 1);
  EXPECT_NEAR(bce_loss<double>({t}, {t}, cfg).item(), -std::log(1 - 1e-7), 1e-12);
  const Td half = Td::constant({8, 8}, 0.5);
  EXPECT_NEAR(bce_loss<double>({half, half}, {t, binary_map(8, 8, 2)}, cfg).item(), std::log(2.0), 1e-15);
  EXPECT_THROW(bce_loss<double>({half}, {Td::zeros({4, 4})}, cfg), ShapeError);
}

TEST(Ssim, IdenticalSignalsGiveZero) {
  const LossConfig cfg;
  const Td t = binary_map(16, 16, 3);
  EXPECT_NEAR(ssim_loss<double>({t}, {t}, cfg).item(), 0.0, 1e-6);
  const Td x = Td::uniform({16, 16}, 0, 1, 4);
  EXPECT_NEAR(ssim_loss<double>({x}, {x}, cfg).item(), 0.0, 1e-6);
}

TEST(Ssim, InvertedMapOnOneWindowMatchesHandEvaluation) {
  LossConfig cfg;
  cfg.ssim_window = 5;
  const Td t = binary_map(5, 5, 5);
  const Td m = one_minus(t);
  const std::vector<double> tv(t.data().begin(), t.data().end()), mv(m.data().begin(), m.data().end());
  const double ssd = window_ssim(mv, tv, cfg.ssim_c1, cfg.ssim_c2);
  EXPECT_LT(ssd, 1.0);
  EXPECT_NEAR(ssim_loss<double>({m}, {t}, cfg).item(), 1 - ssd, 1e-12);
}

TEST(Ssim, AveragesEveryValidWindow) {
  LossConfig cfg;
  cfg.ssim_window = 3;
  const int h = 6, w = 7;
  const Td m = Td::uniform({h, w}, 0, 1, 6), t = binary_map(h, w, 7);
  double total = 0;
  int windows = 0;
  for (int y = 0; y + 3 <= h; ++y)
    for (int x = 0; x + 3 <= w; ++x) {
      std::vector<double> mw, tw;
      for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx) {
          mw.push_back(m[(y + dy) * w + x + dx]);
          tw.push_back(t[(y + dy) * w + x + dx]);
        }
      total += window_ssim(mw, tw, cfg.ssim_c1, cfg.ssim_c2);
      ++windows;
    }
  EXPECT_NEAR(ssim_loss<double>({m}, {t}, cfg).item(), 1 - total / windows, 1e-12);
}

TEST(Ssim, RejectsMapsSmallerThanWindow) {
  const LossConfig cfg;
  const Td t = binary_map(8, 8, 8);
  EXPECT_THROW(ssim_loss<double>({t}, {t}, cfg), ConfigError);
}

TEST(FMeasure, PerfectAndTotalMiss) {
  const LossConfig cfg;
  const Td t = binary_map(8, 8, 9);
  EXPECT_LE(fmeasure_loss<double>({t}, {t}, cfg).item(), 1e-5);
  EXPECT_EQ(fmeasure_loss<double>({Td::zeros({8, 8})}, {t}, cfg).item(), 1.0);
}

TEST(FMeasure, MatchesSoftCounts) {
  const LossConfig cfg;
  const Td m = Td::uniform({5, 5}, 0, 1, 10), t = binary_map(5, 5, 11);
  double tp = 0, sm = 0, st = 0;
  for (int i = 0; i < 25; ++i) tp += m[i] * t[i], sm += m[i], st += t[i];
  const double p = tp / (sm + 1e-7), r = tp / (st + 1e-7);
  const double f = 1.3 * p * r / (0.3 * p + r + 1e-7);
  EXPECT_NEAR(fmeasure_loss<double>({m}, {t}, cfg).item(), 1 - f, 1e-12);
}

TEST(Composite, PerfectPredictionsAndEmptyAux) {
  const LossConfig cfg;
  const Td t = binary_map(16, 16, 12);
  const auto l = composite_losses<double>({t}, {t}, {}, {t}, {}, cfg);
  EXPECT_LE(l.l_c.item(), 1e-4);
  EXPECT_LE(l.l_ct.item(), 1e-4);
  EXPECT_EQ(l.l_s.item(), 0.0);
}

TEST(Composite, SubTermsMatchStandaloneOps) {
  const LossConfig cfg;
  const std::vector<Td> m{Td::uniform({16, 16}, 0.05, 0.95, 13), Td::uniform({16, 16}, 0.05, 0.95, 14)};
  const std::vector<Td> ms{Td::uniform({16, 16}, 0.05, 0.95, 15), Td::uniform({16, 16}, 0.05, 0.95, 16)};
  const std::vector<Td> h{Td::uniform({16, 16}, 0.05, 0.95, 17)};
  const std::vector<Td> t{binary_map(16, 16, 18), binary_map(16, 16, 19)}, ts{binary_map(16, 16, 20)};
  const auto l = composite_losses(m, ms, h, t, ts, cfg);
  EXPECT_DOUBLE_EQ(l.l_c.item(), bce_loss(m, t, cfg).item() + ssim_loss(m, t, cfg).item() +
                                     fmeasure_loss(m, t, cfg).item());
  EXPECT_DOUBLE_EQ(l.l_s.item(), bce_loss(h, ts, cfg).item() + fmeasure_loss(h, ts, cfg).item());
  EXPECT_DOUBLE_EQ(l.l_ct.item(), bce_loss(ms, t, cfg).item() + fmeasure_loss(ms, t, cfg).item());
}

TEST(MaskTriple, WorkedExample) {
  const auto ms = mask_of(2, 2, {1, 1, 0, 0}), m = mask_of(2, 2, {1, 0, 0, 0}), t = mask_of(2, 2, {1, 0, 0, 0});
  const auto r = build_mask_triple(ms, m, t);
  EXPECT_EQ(r.diff, mask_of(2, 2, {0, 1, 0, 0}));
  EXPECT_EQ(r.agree, mask_of(2, 2, {0, 0, 0, 0}));
  EXPECT_EQ(r.missed, mask_of(2, 2, {1, 0, 0, 0}));
  EXPECT_EQ(r.noise, mask_of(2, 2, {0, 1, 0, 0}));
}

TEST(MaskTriple, AgreementLeavesOnlyMissed) {
  const auto t = mask_of(2, 3, {1, 0, 1, 1, 0, 0});
  const auto ms = mask_of(2, 3, {0, 1, 1, 0, 1, 0});
  const auto r = build_mask_triple(ms, ms, t);
  EXPECT_EQ(r.diff.count(), 0);
  EXPECT_EQ(r.agree.count(), 0);
  EXPECT_EQ(r.missed, t);
  EXPECT_EQ(r.noise.count(), 0);
}

TEST(MaskTriple, BinarizesAtThreshold) {
  const LossConfig cfg;
  const Td ms = Td::from_data({1, 3}, {0.5, 0.49, 0.9}), m = Td::from_data({1, 3}, {0.2, 0.2, 0.7});
  const auto t = mask_of(1, 3, {1, 1, 0});
  const auto r = build_mask_triple(ms, m, t, cfg);
  EXPECT_EQ(r.diff, mask_of(1, 3, {1, 0, 0}));
  EXPECT_EQ(r.agree, mask_of(1, 3, {1, 0, 0}));
  EXPECT_EQ(r.missed, mask_of(1, 3, {0, 1, 0}));
}

TEST(MaskedEmbed, FullEmptyAndSingleToken) {
  const Td tokens = Td::uniform({4, 3}, -1, 1, 21);
  const BinaryMask all = mask_of(4, 4, std::vector<int>(16, 1));
  const auto z = masked_embed(tokens, all, 2, 2);
  ASSERT_TRUE(z.has_value());
  for (int c = 0; c < 3; ++c)
    EXPECT_NEAR((*z)[c], (tokens[c] + tokens[3 + c] + tokens[6 + c] + tokens[9 + c]) / 4, 1e-15);
  EXPECT_FALSE(masked_embed(tokens, BinaryMask::zeros(4, 4), 2, 2).has_value());
  // Bottom-right cell only.
  const auto one = masked_embed(tokens, mask_of(4, 4, {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1}), 2, 2);
  ASSERT_TRUE(one.has_value());
  for (int c = 0; c < 3; ++c) EXPECT_EQ((*one)[c], tokens[9 + c]);
}

TEST(MaskedEmbed, AreaVoteKeepsHalfCoveredCells) {
  const Td tokens = Td::uniform({4, 2}, -1, 1, 22);
  // Top-left cell half covered, top-right a quarter covered.
  const auto half = mask_of(4, 4, {1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  const auto z = masked_embed(tokens, half, 2, 2);
  ASSERT_TRUE(z.has_value());
  EXPECT_EQ((*z)[0], tokens[0]);
  EXPECT_EQ((*z)[1], tokens[1]);
  EXPECT_FALSE(masked_embed(tokens, mask_of(4, 4, {1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}), 2, 2));
}

TEST(Contrastive, SingleClosedForms) {
  LossConfig cfg;
  cfg.tau = 1.0;
  const std::vector<Opt> za{row({1, 0})}, zp{row({1, 0})}, zn{row({-1, 0})};
  cfg.paper_exact_denominator = true;
  EXPECT_NEAR(contrastive_single(za, zp, zn, cfg).item(), -2.0, 1e-12);
  cfg.paper_exact_denominator = false;
  EXPECT_NEAR(contrastive_single(za, zp, zn, cfg).item(), std::log1p(std::exp(-2.0)), 1e-12);
  EXPECT_NEAR(std::log1p(std::exp(-2.0)), 0.1269, 1e-4);
  const std::vector<Opt> none{std::nullopt};
  EXPECT_EQ(contrastive_single(none, none, none, cfg).item(), 0.0);
}

TEST(Contrastive, SingleSumsOverCompleteImages) {
  LossConfig cfg;
  cfg.tau = 0.5;
  const std::vector<Opt> za{row({1, 0}), row({0, 1})}, zp{row({0.6, 0.8}), row({0, 1})},
      zn{row({0, 1}), std::nullopt};
  // Only image 0 has all three embeddings.
  const double pos = 0.6 / 0.5, negv = 0.0 / 0.5;
  const double expect = -pos + std::log(std::exp(pos) + std::exp(negv));
  EXPECT_NEAR(contrastive_single(za, zp, zn, cfg).item(), expect, 1e-12);
}

TEST(Contrastive, GroupClosedForms) {
  LossConfig cfg;
  cfg.tau = 1.0;
  const std::vector<Opt> zt{row({1, 0}), row({1, 0})}, zn{row({0, 1}), std::nullopt};
  EXPECT_NEAR(contrastive_group(zt, zn, cfg).item(), 2 * std::log1p(std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(std::log1p(std::exp(-1.0)), 0.3133, 1e-4);
  const std::vector<Opt> no_noise{std::nullopt, std::nullopt};
  EXPECT_EQ(contrastive_group(zt, no_noise, cfg).item(), 0.0);
}

TEST(TotalLoss, Arithmetic) {
  LossFlags all;
  EXPECT_EQ(total_loss(LossReport{}, all).total, 0.0);
  LossReport parts;
  parts.l_s = 1;
  parts.l_c = 2;
  parts.l_ct = 3;
  parts.l_single = 1.5;
  parts.l_group = 2.5;
  const auto r = total_loss(parts, all);
  EXPECT_EQ(r.l_cont, 4.0);
  EXPECT_EQ(r.total, 10.0);
  LossFlags no_aux = all;
  no_aux.aux = false;
  EXPECT_EQ(total_loss(parts, no_aux).total, 9.0);
}

TEST(TotalLoss, NothingEnabledIsAnError) {
  LossTerms<double> terms{Td::scalar(1), Td::scalar(1), Td::scalar(1), Td::scalar(0), Td::scalar(0), false};
  EXPECT_THROW(total_loss(terms, LossFlags{false, false, false, false}), UsageError);
  EXPECT_EQ(total_loss(terms, LossFlags{}).total.item(), 3.0);
}

TEST(LossConfig, Validation) {
  LossConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.ssim_window = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = LossConfig{};
  cfg.tau = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
