#include "cosod/losses.hpp"

#include <algorithm>

namespace cosod {

void LossConfig::validate() const {
  if (ssim_window < 1 || ssim_window % 2 == 0) throw ConfigError("loss.ssim_window must be odd");
  if (!(epsilon > 0)) throw ConfigError("loss.epsilon must be positive");
  if (!(tau > 0)) throw ConfigError("loss.tau must be positive");
  if (!(binarize_threshold > 0 && binarize_threshold < 1))
    throw ConfigError("loss.binarize_threshold must lie in (0, 1)");
  if (!(beta_sq > 0)) throw ConfigError("loss.beta_sq must be positive");
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

template <typename Scalar>
BinaryMask binarize(const Tensor<Scalar>& map, double threshold) {
  if (map.rank() != 2) throw ShapeError("binarize: map must be [H, W]");
  BinaryMask m = BinaryMask::zeros(map.dim(0), map.dim(1));
  const auto v = map.data();
  for (std::size_t i = 0; i < v.size(); ++i) m.bits[i] = static_cast<double>(v[i]) >= threshold;
  return m;
}

template <typename Scalar>
Tensor<Scalar> mask_tensor(const BinaryMask& mask) {
  std::vector<Scalar> data(mask.bits.begin(), mask.bits.end());
  return Tensor<Scalar>::from_data({mask.h, mask.w}, std::move(data));
}

MaskTriple build_mask_triple(const BinaryMask& m_s, const BinaryMask& m, const BinaryMask& t,
                             MaskDifference op) {
  if (m_s.h != t.h || m_s.w != t.w || m.h != t.h || m.w != t.w)
    throw ShapeError("mask triple: mask sizes differ");
  MaskTriple r{BinaryMask::zeros(t.h, t.w), BinaryMask::zeros(t.h, t.w), BinaryMask::zeros(t.h, t.w),
               BinaryMask::zeros(t.h, t.w)};
  for (std::size_t i = 0; i < t.bits.size(); ++i) {
    const bool c = op == MaskDifference::kXor ? (m_s.bits[i] != m.bits[i]) : (m_s.bits[i] || m.bits[i]);
    const bool g = t.bits[i] != 0;
    r.diff.bits[i] = c;
    r.agree.bits[i] = c && g;
    r.missed.bits[i] = g && !c;
    r.noise.bits[i] = c && !g;
  }
  return r;
}

template <typename Scalar>
MaskTriple build_mask_triple(const Tensor<Scalar>& m_s, const Tensor<Scalar>& m, const BinaryMask& t,
                             const LossConfig& cfg, MaskDifference op) {
  return build_mask_triple(binarize(m_s, cfg.binarize_threshold), binarize(m, cfg.binarize_threshold),
                           t, op);
}

namespace {

template <typename Scalar>
void check_pairs(const std::vector<Tensor<Scalar>>& m, const std::vector<Tensor<Scalar>>& t,
                 const char* name) {
  if (m.size() != t.size())
    throw ShapeError(std::string(name) + ": " + std::to_string(m.size()) + " maps vs " +
                     std::to_string(t.size()) + " targets");
  if (m.empty()) throw UsageError(std::string(name) + ": no maps");
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i].shape() != t[i].shape())
      throw ShapeError(std::string(name) + ": map " + shape_str(m[i].shape()) + " vs target " +
                       shape_str(t[i].shape()));
}

template <typename Scalar>
Tensor<Scalar> mean_of(const std::vector<Tensor<Scalar>>& parts) {
  Tensor<Scalar> acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = acc + parts[i];
  return mul_scalar(acc, Scalar(1) / static_cast<Scalar>(parts.size()));
}

template <typename Scalar>
Tensor<Scalar> one_minus(const Tensor<Scalar>& x) {
  return add_scalar(neg(x), Scalar(1));
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> bce_loss(const std::vector<Tensor<Scalar>>& m, const std::vector<Tensor<Scalar>>& t,
                        const LossConfig& cfg) {
  check_pairs(m, t, "bce_loss");
  const auto eps = static_cast<Scalar>(cfg.epsilon);
  std::vector<Tensor<Scalar>> per_map;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto p = clamp(m[i], eps, Scalar(1) - eps);
    const auto ll = t[i] * log(p) + one_minus(t[i]) * log(one_minus(p));
    per_map.push_back(neg(mean(ll)));
  }
  return mean_of(per_map);
}

template <typename Scalar>
Tensor<Scalar> ssim_loss(const std::vector<Tensor<Scalar>>& m, const std::vector<Tensor<Scalar>>& t,
                         const LossConfig& cfg) {
  check_pairs(m, t, "ssim_loss");
  const int win = cfg.ssim_window;
  const auto c1 = static_cast<Scalar>(cfg.ssim_c1);
  const auto c2 = static_cast<Scalar>(cfg.ssim_c2);
  const auto box = Tensor<Scalar>::constant({1, 1, win, win}, Scalar(1) / static_cast<Scalar>(win * win));
  const Tensor<Scalar> no_bias;
  auto filt = [&](const Tensor<Scalar>& x) { return conv2d(x, box, no_bias, 1, 0); };

  std::vector<Tensor<Scalar>> per_map;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const int h = m[i].dim(0), w = m[i].dim(1);
    if (h < win || w < win)
      throw ConfigError("ssim_loss: map " + shape_str(m[i].shape()) + " smaller than window " +
                        std::to_string(win));
    const auto x = reshape(m[i], {1, h, w});
    const auto y = reshape(t[i], {1, h, w});
    const auto mu_x = filt(x);
    const auto mu_y = filt(y);
    const auto mu_xx = mu_x * mu_x;
    const auto mu_yy = mu_y * mu_y;
    const auto mu_xy = mu_x * mu_y;
    const auto var_x = filt(x * x) - mu_xx;
    const auto var_y = filt(y * y) - mu_yy;
    const auto cov = filt(x * y) - mu_xy;
    const auto num = add_scalar(mul_scalar(mu_xy, Scalar(2)), c1) * add_scalar(mul_scalar(cov, Scalar(2)), c2);
    const auto den = add_scalar(mu_xx + mu_yy, c1) * add_scalar(var_x + var_y, c2);
    per_map.push_back(one_minus(mean(num / den)));
  }
  return mean_of(per_map);
}

template <typename Scalar>
Tensor<Scalar> fmeasure_loss(const std::vector<Tensor<Scalar>>& m,
                             const std::vector<Tensor<Scalar>>& t, const LossConfig& cfg) {
  check_pairs(m, t, "fmeasure_loss");
  const auto eps = static_cast<Scalar>(cfg.epsilon);
  const auto beta_sq = static_cast<Scalar>(cfg.beta_sq);
  std::vector<Tensor<Scalar>> per_map;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto tp = sum(m[i] * t[i]);
    const auto precision = tp / add_scalar(sum(m[i]), eps);
    const auto recall = tp / add_scalar(sum(t[i]), eps);
    const auto f = mul_scalar(precision * recall, Scalar(1) + beta_sq) /
                   add_scalar(mul_scalar(precision, beta_sq) + recall, eps);
    per_map.push_back(one_minus(f));
  }
  return mean_of(per_map);
}

template <typename Scalar>
CompositeLosses<Scalar> composite_losses(const std::vector<Tensor<Scalar>>& m,
                                         const std::vector<Tensor<Scalar>>& m_s,
                                         const std::vector<Tensor<Scalar>>& h,
                                         const std::vector<Tensor<Scalar>>& t,
                                         const std::vector<Tensor<Scalar>>& t_s,
                                         const LossConfig& cfg) {
  CompositeLosses<Scalar> r;
  r.l_c = bce_loss(m, t, cfg) + ssim_loss(m, t, cfg) + fmeasure_loss(m, t, cfg);
  if (h.empty()) {
    if (!t_s.empty()) throw ShapeError("composite_losses: aux targets without aux maps");
    r.l_s = Tensor<Scalar>::scalar(Scalar(0));
  } else {
    r.l_s = bce_loss(h, t_s, cfg) + fmeasure_loss(h, t_s, cfg);
  }
  r.l_ct = bce_loss(m_s, t, cfg) + fmeasure_loss(m_s, t, cfg);
  return r;
}

template <typename Scalar>
std::optional<Tensor<Scalar>> masked_embed(const Tensor<Scalar>& tokens, const BinaryMask& mask,
                                           int grid_h, int grid_w) {
  if (tokens.rank() != 2 || tokens.dim(0) != grid_h * grid_w)
    throw ShapeError("masked_embed: tokens " + shape_str(tokens.shape()) + " vs grid " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w));
  if (mask.h % grid_h || mask.w % grid_w)
    throw ShapeError("masked_embed: mask size not divisible by token grid");
  const int ch = mask.h / grid_h, cw = mask.w / grid_w;
  std::vector<Scalar> weights(grid_h * grid_w, Scalar(0));
  int on = 0;
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx) {
      int hits = 0;
      for (int y = gy * ch; y < (gy + 1) * ch; ++y)
        for (int x = gx * cw; x < (gx + 1) * cw; ++x) hits += mask.bits[y * mask.w + x];
      // Area average >= 0.5, compared in integers.
      if (2 * hits >= ch * cw) {
        weights[gy * grid_w + gx] = Scalar(1);
        ++on;
      }
    }
  if (on == 0) return std::nullopt;
  for (auto& v : weights) v /= static_cast<Scalar>(on);
  return matmul(Tensor<Scalar>::from_data({1, grid_h * grid_w}, std::move(weights)), tokens);
}

namespace {

template <typename Scalar>
Tensor<Scalar> similarity(const Tensor<Scalar>& a, const Tensor<Scalar>& b, Scalar inv_tau) {
  return mul_scalar(sum(a * b), inv_tau);
}

// -log(exp(pos) / (Σ exp(neg) [+ exp(pos)])) = lse(den) - pos.
template <typename Scalar>
Tensor<Scalar> info_nce_term(const Tensor<Scalar>& pos, std::vector<Tensor<Scalar>> negatives,
                             bool paper_exact) {
  if (!paper_exact) negatives.insert(negatives.begin(), pos);
  return logsumexp(concat(negatives, 0)) - pos;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> contrastive_single(const std::vector<std::optional<Tensor<Scalar>>>& z_a,
                                  const std::vector<std::optional<Tensor<Scalar>>>& z_p,
                                  const std::vector<std::optional<Tensor<Scalar>>>& z_n,
                                  const LossConfig& cfg) {
  if (z_a.size() != z_p.size() || z_a.size() != z_n.size())
    throw ShapeError("contrastive_single: embedding lists differ in length");
  const auto inv_tau = static_cast<Scalar>(1.0 / cfg.tau);
  Tensor<Scalar> total;
  for (std::size_t i = 0; i < z_a.size(); ++i) {
    if (!z_a[i] || !z_p[i] || !z_n[i]) continue;
    const auto term = info_nce_term(similarity(*z_a[i], *z_p[i], inv_tau),
                                    {similarity(*z_a[i], *z_n[i], inv_tau)},
                                    cfg.paper_exact_denominator);
    total = total.defined() ? total + term : term;
  }
  return total.defined() ? total : Tensor<Scalar>::scalar(Scalar(0));
}

template <typename Scalar>
Tensor<Scalar> contrastive_group(const std::vector<std::optional<Tensor<Scalar>>>& z_t,
                                 const std::vector<std::optional<Tensor<Scalar>>>& z_n,
                                 const LossConfig& cfg) {
  if (z_t.size() != z_n.size())
    throw ShapeError("contrastive_group: embedding lists differ in length");
  const auto inv_tau = static_cast<Scalar>(1.0 / cfg.tau);
  std::vector<std::size_t> noise;
  for (std::size_t m = 0; m < z_n.size(); ++m)
    if (z_n[m]) noise.push_back(m);
  Tensor<Scalar> total;
  if (z_t.size() >= 2 && !noise.empty()) {
    for (std::size_t i = 0; i < z_t.size(); ++i) {
      if (!z_t[i]) continue;
      std::vector<Tensor<Scalar>> negatives;
      for (std::size_t m : noise) negatives.push_back(similarity(*z_t[i], *z_n[m], inv_tau));
      for (std::size_t j = 0; j < z_t.size(); ++j) {
        if (j == i || !z_t[j]) continue;
        const auto term = info_nce_term(similarity(*z_t[i], *z_t[j], inv_tau), negatives,
                                        cfg.paper_exact_denominator);
        total = total.defined() ? total + term : term;
      }
    }
  }
  return total.defined() ? total : Tensor<Scalar>::scalar(Scalar(0));
}

LossReport total_loss(const LossReport& parts, const LossFlags& flags) {
  LossReport r = parts;
  r.flags = flags;
  if (!flags.cosal) r.l_c = 0;
  if (!flags.aux) r.l_s = 0;
  if (!flags.early) r.l_ct = 0;
  if (!flags.contrastive) r.l_single = r.l_group = 0;
  r.l_cont = r.l_single + r.l_group;
  r.total = r.l_s + r.l_c + r.l_ct + r.l_cont;
  return r;
}

template <typename Scalar>
Objective<Scalar> total_loss(const LossTerms<Scalar>& terms, const LossFlags& flags) {
  if (!flags.any()) throw UsageError("every loss term is disabled; nothing to optimize");
  Objective<Scalar> obj;
  std::vector<Tensor<Scalar>> active;
  auto value = [](const Tensor<Scalar>& t) { return t.defined() ? static_cast<double>(t.item()) : 0.0; };
  LossReport parts;
  parts.l_c = value(terms.l_c);
  parts.l_s = value(terms.l_s);
  parts.l_ct = value(terms.l_ct);
  parts.l_single = value(terms.l_single);
  parts.l_group = value(terms.l_group);
  parts.contrastive_active = terms.contrastive_active && flags.contrastive;
  obj.report = total_loss(parts, flags);
  if (flags.aux && terms.l_s.defined()) active.push_back(terms.l_s);
  if (flags.cosal && terms.l_c.defined()) active.push_back(terms.l_c);
  if (flags.early && terms.l_ct.defined()) active.push_back(terms.l_ct);
  if (flags.contrastive) {
    if (terms.l_single.defined()) active.push_back(terms.l_single);
    if (terms.l_group.defined()) active.push_back(terms.l_group);
  }
  Tensor<Scalar> total = Tensor<Scalar>::scalar(Scalar(0));
  for (const auto& t : active) total = total + t;
  obj.total = total;
  return obj;
}

template <typename Scalar>
LossTerms<Scalar> group_loss_terms(const SaliencyMaps<Scalar>& out,
                                   const std::vector<Tensor<Scalar>>& gt,
                                   const std::vector<Tensor<Scalar>>& aux_gt,
                                   const CoSformer<Scalar>& model, const LossConfig& cfg,
                                   const LossFlags& flags) {
  LossTerms<Scalar> terms;
  if (flags.cosal)
    terms.l_c = bce_loss(out.m, gt, cfg) + ssim_loss(out.m, gt, cfg) + fmeasure_loss(out.m, gt, cfg);
  if (flags.aux)
    terms.l_s = out.h.empty() ? Tensor<Scalar>::scalar(Scalar(0))
                              : bce_loss(out.h, aux_gt, cfg) + fmeasure_loss(out.h, aux_gt, cfg);
  if (flags.early) terms.l_ct = bce_loss(out.m_s, gt, cfg) + fmeasure_loss(out.m_s, gt, cfg);
  if (!flags.contrastive) return terms;

  const int gh = model.config().token_h(), gw = model.config().token_w();
  const auto& proj = model.projection();
  auto embed = [&](const Tensor<Scalar>& tokens, const BinaryMask& mask) -> std::optional<Tensor<Scalar>> {
    auto pooled = masked_embed(tokens, mask, gh, gw);
    if (!pooled) return std::nullopt;
    return project(*pooled, proj);
  };
  const std::size_t n = out.m.size();
  std::vector<std::optional<Tensor<Scalar>>> z_a(n), z_p(n), z_n(n), z_t(n);
  for (std::size_t i = 0; i < n; ++i) {
    const BinaryMask t = binarize(gt[i], 0.5);
    const MaskTriple triple = build_mask_triple(out.m_s[i], out.m[i], t, cfg);
    z_a[i] = embed(out.s_g[i], triple.agree);
    z_p[i] = embed(out.s_g[i], triple.missed);
    z_n[i] = embed(out.s_g[i], triple.noise);
    z_t[i] = embed(out.s_g[i], t);
  }
  terms.l_single = contrastive_single(z_a, z_p, z_n, cfg);
  terms.l_group = contrastive_group(z_t, z_n, cfg);
  terms.contrastive_active = terms.l_single.requires_grad() || terms.l_group.requires_grad();
  return terms;
}

#define COSOD_INSTANTIATE(S)                                                                      \
  template BinaryMask binarize<S>(const Tensor<S>&, double);                                      \
  template Tensor<S> mask_tensor<S>(const BinaryMask&);                                           \
  template MaskTriple build_mask_triple<S>(const Tensor<S>&, const Tensor<S>&, const BinaryMask&, \
                                           const LossConfig&, MaskDifference);                    \
  template Tensor<S> bce_loss<S>(const std::vector<Tensor<S>>&, const std::vector<Tensor<S>>&,    \
                                 const LossConfig&);                                              \
  template Tensor<S> ssim_loss<S>(const std::vector<Tensor<S>>&, const std::vector<Tensor<S>>&,   \
                                  const LossConfig&);                                             \
  template Tensor<S> fmeasure_loss<S>(const std::vector<Tensor<S>>&,                              \
                                      const std::vector<Tensor<S>>&, const LossConfig&);          \
  template CompositeLosses<S> composite_losses<S>(                                                \
      const std::vector<Tensor<S>>&, const std::vector<Tensor<S>>&, const std::vector<Tensor<S>>&, \
      const std::vector<Tensor<S>>&, const std::vector<Tensor<S>>&, const LossConfig&);           \
  template std::optional<Tensor<S>> masked_embed<S>(const Tensor<S>&, const BinaryMask&, int, int); \
  template Tensor<S> contrastive_single<S>(const std::vector<std::optional<Tensor<S>>>&,          \
                                           const std::vector<std::optional<Tensor<S>>>&,          \
                                           const std::vector<std::optional<Tensor<S>>>&,          \
                                           const LossConfig&);                                    \
  template Tensor<S> contrastive_group<S>(const std::vector<std::optional<Tensor<S>>>&,           \
                                          const std::vector<std::optional<Tensor<S>>>&,           \
                                          const LossConfig&);                                     \
  template Objective<S> total_loss<S>(const LossTerms<S>&, const LossFlags&);                     \
  template LossTerms<S> group_loss_terms<S>(const SaliencyMaps<S>&, const std::vector<Tensor<S>>&, \
                                            const std::vector<Tensor<S>>&, const CoSformer<S>&,   \
                                            const LossConfig&, const LossFlags&);

COSOD_INSTANTIATE(float)
COSOD_INSTANTIATE(double)

#undef COSOD_INSTANTIATE

}  // namespace cosod
