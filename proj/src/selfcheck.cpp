#include "cosod/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>

#include "cosod/gradcheck.hpp"
#include "cosod/imageio.hpp"
#include "cosod/model.hpp"
#include "cosod/rng.hpp"

namespace cosod {

namespace {

using T = Tensor<double>;

constexpr double kGradStep = 1e-5;
constexpr double kGradTol = 1e-4;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

T filled(const Shape& shape, Rng& rng, const std::function<double(Rng&)>& draw) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = draw(rng);
  return T::from_data(shape, std::move(v));
}

T uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  return filled(shape, rng, [=](Rng& r) { return r.uniform(lo, hi); });
}

// Magnitudes in [0.1, 1] with random sign: clear of kinks at zero.
T away_from_zero(const Shape& shape, Rng& rng) {
  return filled(shape, rng, [](Rng& r) { return (r.uniform01() < 0.5 ? -1 : 1) * r.uniform(0.1, 1.0); });
}

T binary(const Shape& shape, Rng& rng, bool ensure_positive = true) {
  T t = filled(shape, rng, [](Rng& r) { return r.uniform01() < 0.4 ? 1.0 : 0.0; });
  if (ensure_positive) t.mutable_data()[rng.uniform_int(0, static_cast<int>(t.numel()) - 1)] = 1.0;
  return t;
}

T leaf(T t) {
  t.set_requires_grad(true);
  return t;
}

// Contracts the output with fixed random weights so every output coordinate
// contributes a distinct amount.
T contract(const T& out, std::uint64_t seed) {
  Rng rng(seed);
  const T w = uniform(out.shape(), rng, -1.0, 1.0);
  return sum(out * w);
}

struct GradCase {
  std::function<T()> f;
  std::vector<T> params;
};

using CaseBuilder = std::function<GradCase(Rng&)>;

int rdim(Rng& rng, int lo = 2, int hi = 4) { return rng.uniform_int(lo, hi); }

// Right operand shaped like the left, like its trailing dimension, or a single element.
Shape broadcast_shape(const Shape& a, Rng& rng) {
  switch (rng.uniform_int(0, 2)) {
    case 0: return a;
    case 1: return {a.back()};
    default: return {1};
  }
}

GradCase unary(Rng& rng, const std::function<T(const T&)>& op, const std::function<T(const Shape&, Rng&)>& gen) {
  const Shape s{rdim(rng), rdim(rng)};
  const T x = leaf(gen(s, rng));
  const std::uint64_t seed = rng.next_u64();
  return {[=] { return contract(op(x), seed); }, {x}};
}

GradCase binary_case(Rng& rng, const std::function<T(const T&, const T&)>& op, bool positive_rhs) {
  const Shape s{rdim(rng), rdim(rng)};
  const T a = leaf(away_from_zero(s, rng));
  const Shape bs = broadcast_shape(s, rng);
  const T b = leaf(positive_rhs ? filled(bs, rng, [](Rng& r) { return (r.uniform01() < 0.5 ? -1 : 1) * r.uniform(0.5, 1.5); })
                                : away_from_zero(bs, rng));
  const std::uint64_t seed = rng.next_u64();
  return {[=] { return contract(op(a, b), seed); }, {a, b}};
}

std::vector<T> leaves_of(const ParameterSet<double>& params) {
  std::vector<T> out;
  for (const auto& [_, t] : params.entries()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, CaseBuilder>> primitive_cases() {
  auto any = [](const Shape& s, Rng& r) { return away_from_zero(s, r); };
  auto positive = [](const Shape& s, Rng& r) { return uniform(s, r, 0.5, 2.0); };
  std::vector<std::pair<std::string, CaseBuilder>> c;
  c.emplace_back("add", [](Rng& r) { return binary_case(r, [](const T& a, const T& b) { return a + b; }, false); });
  c.emplace_back("sub", [](Rng& r) { return binary_case(r, [](const T& a, const T& b) { return a - b; }, false); });
  c.emplace_back("mul", [](Rng& r) { return binary_case(r, [](const T& a, const T& b) { return a * b; }, false); });
  c.emplace_back("div", [](Rng& r) { return binary_case(r, [](const T& a, const T& b) { return a / b; }, true); });
  c.emplace_back("add_scalar", [=](Rng& r) { return unary(r, [](const T& x) { return add_scalar(x, 0.7); }, any); });
  c.emplace_back("mul_scalar", [=](Rng& r) { return unary(r, [](const T& x) { return mul_scalar(x, -1.3); }, any); });
  c.emplace_back("rdiv_scalar", [=](Rng& r) { return unary(r, [](const T& x) { return rdiv_scalar(2.0, x); }, positive); });
  c.emplace_back("neg", [=](Rng& r) { return unary(r, [](const T& x) { return neg(x); }, any); });
  c.emplace_back("relu", [=](Rng& r) { return unary(r, [](const T& x) { return relu(x); }, any); });
  c.emplace_back("sigmoid", [=](Rng& r) { return unary(r, [](const T& x) { return sigmoid(x); }, any); });
  c.emplace_back("exp", [=](Rng& r) { return unary(r, [](const T& x) { return exp(x); }, any); });
  c.emplace_back("log", [=](Rng& r) { return unary(r, [](const T& x) { return log(x); }, positive); });
  c.emplace_back("sqrt", [=](Rng& r) { return unary(r, [](const T& x) { return sqrt(x); }, positive); });
  c.emplace_back("square", [=](Rng& r) { return unary(r, [](const T& x) { return square(x); }, any); });
  c.emplace_back("clamp", [](Rng& r) {
    // Values kept 0.1 away from the clamp bounds at +-0.5.
    auto gen = [](const Shape& s, Rng& rr) {
      return filled(s, rr, [](Rng& q) {
        const int band = q.uniform_int(0, 2);
        return band == 0 ? q.uniform(-1.0, -0.6) : band == 1 ? q.uniform(-0.4, 0.4) : q.uniform(0.6, 1.0);
      });
    };
    return unary(r, [](const T& x) { return clamp(x, -0.5, 0.5); }, gen);
  });
  c.emplace_back("matmul", [](Rng& r) {
    const int m = rdim(r), k = rdim(r), n = rdim(r);
    const T a = leaf(uniform({m, k}, r, -1, 1)), b = leaf(uniform({k, n}, r, -1, 1));
    const auto seed = r.next_u64();
    return GradCase{[=] { return contract(matmul(a, b), seed); }, {a, b}};
  });
  c.emplace_back("transpose", [=](Rng& r) { return unary(r, [](const T& x) { return transpose(x); }, any); });
  c.emplace_back("reshape", [=](Rng& r) {
    return unary(r, [](const T& x) { return reshape(x, {static_cast<int>(x.numel())}); }, any);
  });
  c.emplace_back("concat", [](Rng& r) {
    const int axis = r.uniform_int(0, 1);
    Shape s1{rdim(r), rdim(r)}, s2 = s1;
    s2[axis] = rdim(r, 1, 3);
    const T a = leaf(uniform(s1, r, -1, 1)), b = leaf(uniform(s2, r, -1, 1));
    const auto seed = r.next_u64();
    return GradCase{[=] { return contract(concat(std::vector<T>{a, b}, axis), seed); }, {a, b}};
  });
  c.emplace_back("slice", [](Rng& r) {
    const int axis = r.uniform_int(0, 1);
    const Shape s{rdim(r, 3, 5), rdim(r, 3, 5)};
    const int start = r.uniform_int(0, 1), len = r.uniform_int(1, s[axis] - start);
    const T x = leaf(uniform(s, r, -1, 1));
    const auto seed = r.next_u64();
    return GradCase{[=] { return contract(slice(x, axis, start, len), seed); }, {x}};
  });
  c.emplace_back("sum", [=](Rng& r) { return unary(r, [](const T& x) { return sum(x); }, any); });
  c.emplace_back("mean", [=](Rng& r) { return unary(r, [](const T& x) { return mean(x); }, any); });
  c.emplace_back("sum_axis", [](Rng& r) {
    const int axis = r.uniform_int(0, 1);
    return unary(r, [axis](const T& x) { return sum(x, axis); }, [](const Shape& s, Rng& q) { return uniform(s, q, -1, 1); });
  });
  c.emplace_back("mean_axis", [](Rng& r) {
    const int axis = r.uniform_int(0, 1);
    return unary(r, [axis](const T& x) { return mean(x, axis); }, [](const Shape& s, Rng& q) { return uniform(s, q, -1, 1); });
  });
  c.emplace_back("logsumexp", [=](Rng& r) { return unary(r, [](const T& x) { return logsumexp(x); }, any); });
  c.emplace_back("softmax", [](Rng& r) {
    const int axis = r.uniform_int(0, 1);
    return unary(r, [axis](const T& x) { return softmax(x, axis); }, [](const Shape& s, Rng& q) { return uniform(s, q, -2, 2); });
  });
  c.emplace_back("layer_norm", [](Rng& r) {
    const int n = rdim(r), d = rdim(r, 3, 6);
    const T x = leaf(uniform({n, d}, r, -2, 2));
    const T g = leaf(uniform({d}, r, 0.5, 1.5)), b = leaf(uniform({d}, r, -0.5, 0.5));
    const auto seed = r.next_u64();
    return GradCase{[=] { return contract(layer_norm(x, g, b), seed); }, {x, g, b}};
  });
  c.emplace_back("l2_normalize", [](Rng& r) {
    return unary(r, [](const T& x) { return l2_normalize(x); }, [](const Shape& s, Rng& q) { return uniform(s, q, -1, 1); });
  });
  c.emplace_back("conv2d", [](Rng& r) {
    const int cin = rdim(r, 1, 3), cout = rdim(r, 1, 3), k = r.uniform_int(0, 1) ? 3 : 1;
    const int stride = r.uniform_int(1, 2), pad = k == 3 ? r.uniform_int(0, 1) : 0;
    const int h = rdim(r, 4, 6), w = rdim(r, 4, 6);
    const T x = leaf(uniform({cin, h, w}, r, -1, 1));
    const T wt = leaf(uniform({cout, cin, k, k}, r, -1, 1));
    const T b = leaf(uniform({cout}, r, -1, 1));
    const auto seed = r.next_u64();
    return GradCase{[=] { return contract(conv2d(x, wt, b, stride, pad), seed); }, {x, wt, b}};
  });
  c.emplace_back("maxpool2", [](Rng& r) {
    // Well-separated values so no window has a near tie.
    const Shape s{rdim(r, 1, 2), 2 * rdim(r, 1, 3), 2 * rdim(r, 1, 3)};
    std::vector<double> v(shape_numel(s));
    std::iota(v.begin(), v.end(), 0.0);
    r.shuffle(v);
    for (auto& x : v) x = 0.05 * x - 1.0;
    const T x = leaf(T::from_data(s, v));
    const auto seed = r.next_u64();
    return GradCase{[=] { return contract(maxpool2(x), seed); }, {x}};
  });
  c.emplace_back("upsample_bilinear", [](Rng& r) {
    const Shape s{rdim(r, 1, 2), rdim(r, 2, 4), rdim(r, 2, 4)};
    const int oh = rdim(r, 2, 9), ow = rdim(r, 2, 9);
    const T x = leaf(uniform(s, r, -1, 1));
    const auto seed = r.next_u64();
    return GradCase{[=] { return contract(upsample_bilinear(x, oh, ow), seed); }, {x}};
  });
  c.emplace_back("multi_head_attention", [](Rng& r) {
    const int d = 8, heads = r.uniform_int(0, 1) ? 2 : 4, tq = rdim(r, 2, 4), tk = rdim(r, 2, 5);
    auto params = std::make_shared<ParameterSet<double>>(r.next_u64());
    const auto w = AttentionWeights<double>::create(*params, "attn", d);
    const T q = leaf(uniform({tq, d}, r, -1, 1)), kv = leaf(uniform({tk, d}, r, -1, 1));
    const T pe_q = uniform({tq, d}, r, -0.5, 0.5), pe_k = uniform({tk, d}, r, -0.5, 0.5);
    std::vector<T> leaves = leaves_of(*params);
    leaves.push_back(q);
    leaves.push_back(kv);
    const auto seed = r.next_u64();
    return GradCase{[=] { return contract(multi_head_attention(q, kv, pe_q, pe_k, w, heads), seed); }, leaves};
  });
  c.emplace_back("transformer_layer", [](Rng& r) {
    const int d = 8, t = rdim(r, 2, 5);
    auto params = std::make_shared<ParameterSet<double>>(r.next_u64());
    const auto w = TransformerLayerWeights<double>::create(*params, "layer", d, 2);
    const T x = leaf(uniform({t, d}, r, -1, 1));
    const T pe = uniform({t, d}, r, -0.5, 0.5);
    std::vector<T> leaves = leaves_of(*params);
    leaves.push_back(x);
    const auto seed = r.next_u64();
    return GradCase{[=] { return contract(transformer_layer(x, pe, w, 2), seed); }, leaves};
  });
  c.emplace_back("projection_head", [](Rng& r) {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.proj_dim = 4;
    auto params = std::make_shared<ParameterSet<double>>(r.next_u64());
    const auto w = ProjectionWeights<double>::create(*params, cfg);
    const T v = leaf(uniform({1, 8}, r, -1, 1));
    std::vector<T> leaves = leaves_of(*params);
    leaves.push_back(v);
    const auto seed = r.next_u64();
    return GradCase{[=] { return contract(project(v, w), seed); }, leaves};
  });
  return c;
}

LossConfig small_loss_config(Rng& r) {
  LossConfig cfg;
  cfg.ssim_window = r.uniform_int(0, 1) ? 3 : 5;
  return cfg;
}

std::vector<T> maps(int n, const Shape& s, Rng& r) {
  std::vector<T> out;
  for (int i = 0; i < n; ++i) out.push_back(leaf(uniform(s, r, 0.05, 0.95)));
  return out;
}

std::vector<T> masks(int n, const Shape& s, Rng& r) {
  std::vector<T> out;
  for (int i = 0; i < n; ++i) out.push_back(binary(s, r));
  return out;
}

std::optional<T> embedding(Rng& r, int p) { return leaf(uniform({1, p}, r, -1, 1)); }

std::vector<T> present(const std::vector<std::vector<std::optional<T>>>& lists) {
  std::vector<T> out;
  for (const auto& l : lists)
    for (const auto& z : l)
      if (z) out.push_back(*z);
  return out;
}

std::vector<std::pair<std::string, CaseBuilder>> loss_cases() {
  std::vector<std::pair<std::string, CaseBuilder>> c;
  c.emplace_back("bce_loss", [](Rng& r) {
    const int n = rdim(r, 1, 2);
    const Shape s{rdim(r, 3, 5), rdim(r, 3, 5)};
    const auto m = maps(n, s, r);
    const auto t = masks(n, s, r);
    const LossConfig cfg;
    return GradCase{[=] { return bce_loss(m, t, cfg); }, m};
  });
  c.emplace_back("ssim_loss", [](Rng& r) {
    const LossConfig cfg = small_loss_config(r);
    const int n = rdim(r, 1, 2);
    const Shape s{rdim(r, cfg.ssim_window, cfg.ssim_window + 2), rdim(r, cfg.ssim_window, cfg.ssim_window + 2)};
    const auto m = maps(n, s, r);
    const auto t = masks(n, s, r);
    return GradCase{[=] { return ssim_loss(m, t, cfg); }, m};
  });
  c.emplace_back("fmeasure_loss", [](Rng& r) {
    const int n = rdim(r, 1, 2);
    const Shape s{rdim(r, 3, 5), rdim(r, 3, 5)};
    const auto m = maps(n, s, r);
    const auto t = masks(n, s, r);
    const LossConfig cfg;
    return GradCase{[=] { return fmeasure_loss(m, t, cfg); }, m};
  });
  c.emplace_back("composite_losses", [](Rng& r) {
    const LossConfig cfg = small_loss_config(r);
    const int n = rdim(r, 2, 3), k = rdim(r, 0, 2);
    const Shape s{cfg.ssim_window + 1, cfg.ssim_window + 2};
    const auto m = maps(n, s, r), m_s = maps(n, s, r), h = maps(k, s, r);
    const auto t = masks(n, s, r), t_s = masks(k, s, r);
    std::vector<T> leaves = m;
    leaves.insert(leaves.end(), m_s.begin(), m_s.end());
    leaves.insert(leaves.end(), h.begin(), h.end());
    return GradCase{[=] {
                      const auto l = composite_losses(m, m_s, h, t, t_s, cfg);
                      return l.l_c + l.l_s + l.l_ct;
                    },
                    leaves};
  });
  c.emplace_back("contrastive_single", [](Rng& r) {
    LossConfig cfg;
    cfg.tau = r.uniform(0.2, 1.0);
    cfg.paper_exact_denominator = r.uniform_int(0, 1) == 1;
    const int n = rdim(r, 1, 3), p = 4;
    std::vector<std::optional<T>> za, zp, zn;
    for (int i = 0; i < n; ++i) {
      za.push_back(embedding(r, p));
      zp.push_back(embedding(r, p));
      zn.push_back(i > 0 && r.uniform_int(0, 3) == 0 ? std::nullopt : embedding(r, p));
    }
    return GradCase{[=] { return contrastive_single(za, zp, zn, cfg); }, present({za, zp, zn})};
  });
  c.emplace_back("contrastive_group", [](Rng& r) {
    LossConfig cfg;
    cfg.tau = r.uniform(0.2, 1.0);
    cfg.paper_exact_denominator = r.uniform_int(0, 1) == 1;
    const int n = rdim(r, 2, 4), p = 4;
    std::vector<std::optional<T>> zt, zn;
    for (int i = 0; i < n; ++i) {
      zt.push_back(embedding(r, p));
      zn.push_back(i > 0 && r.uniform_int(0, 2) == 0 ? std::nullopt : embedding(r, p));
    }
    return GradCase{[=] { return contrastive_group(zt, zn, cfg); }, present({zt, zn})};
  });
  c.emplace_back("contrastive_pipeline", [](Rng& r) {
    // Token features -> masked pooling -> projection -> both contrastive terms.
    ModelConfig mc;
    mc.d = 8;
    mc.proj_dim = 4;
    auto params = std::make_shared<ParameterSet<double>>(r.next_u64());
    const auto w = ProjectionWeights<double>::create(*params, mc);
    const int n = 2, gh = 2, gw = 2;
    std::vector<T> tokens;
    for (int i = 0; i < n; ++i) tokens.push_back(leaf(uniform({gh * gw, mc.d}, r, -1, 1)));
    std::vector<BinaryMask> agree, missed, noise, gt;
    for (int i = 0; i < n; ++i) {
      // One token per region on a 4x4 mask over a 2x2 grid.
      std::vector<int> cells{0, 1, 2, 3};
      r.shuffle(cells);
      auto cell_mask = [&](std::initializer_list<int> ids) {
        BinaryMask m = BinaryMask::zeros(4, 4);
        for (int id : ids)
          for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) m.bits[((id / 2) * 2 + y) * 4 + (id % 2) * 2 + x] = 1;
        return m;
      };
      agree.push_back(cell_mask({cells[0]}));
      missed.push_back(cell_mask({cells[1]}));
      noise.push_back(cell_mask({cells[2]}));
      gt.push_back(cell_mask({cells[0], cells[1]}));
    }
    LossConfig cfg;
    cfg.tau = 0.5;
    std::vector<T> leaves = leaves_of(*params);
    leaves.insert(leaves.end(), tokens.begin(), tokens.end());
    return GradCase{[=] {
                      auto z = [&](const T& tok, const BinaryMask& m) -> std::optional<T> {
                        return project(*masked_embed(tok, m, gh, gw), w);
                      };
                      std::vector<std::optional<T>> za, zp, zn, zt;
                      for (int i = 0; i < n; ++i) {
                        za.push_back(z(tokens[i], agree[i]));
                        zp.push_back(z(tokens[i], missed[i]));
                        zn.push_back(z(tokens[i], noise[i]));
                        zt.push_back(z(tokens[i], gt[i]));
                      }
                      return contrastive_single(za, zp, zn, cfg) + contrastive_group(zt, zn, cfg);
                    },
                    leaves};
  });
  return c;
}

void record(SuiteResult& s, bool ok, const std::string& what) {
  ++s.cases;
  if (ok) return;
  ++s.failures;
  s.pass = false;
  if (s.detail.empty()) s.detail = what;
}

void finish(SuiteResult& s, const std::string& summary) {
  if (s.pass) s.detail = summary;
}

ModelConfig tiny_model(bool pe_in_tgl) {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.stage_channels = {4, 8, 8, 8};
  cfg.heads = 2;
  cfg.layers_tsir = 2;
  cfg.layers_tgl = 2;
  cfg.layers_tgf = 2;
  cfg.ffn_multiplier = 2;
  cfg.proj_dim = 8;
  cfg.pe_in_tgl = pe_in_tgl;
  return cfg;
}

std::vector<T> token_group(int n, int q, int d, Rng& r) {
  std::vector<T> s;
  for (int i = 0; i < n; ++i) s.push_back(uniform({q, d}, r, -1, 1));
  return s;
}

// Largest deviation from equivariance: rows of block k of `permuted` must
// match block perm[k] of `reference`.
double equivariance_gap(const T& reference, const T& permuted, const std::vector<int>& perm, int q) {
  const int d = reference.dim(1);
  double gap = 0;
  for (std::size_t k = 0; k < perm.size(); ++k)
    for (int i = 0; i < q * d; ++i)
      gap = std::max(gap, std::abs(permuted[k * q * d + i] - reference[perm[k] * q * d + i]));
  return gap;
}

double max_diff(const T& a, const T& b) {
  double gap = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) gap = std::max(gap, std::abs(a[i] - b[i]));
  return gap;
}

}  // namespace

SuiteResult gradient_suite(const SelfCheckOptions& opts) {
  SuiteResult s{"gradient oracle", true, 0, 0, {}};
  auto cases = primitive_cases();
  auto losses = loss_cases();
  cases.insert(cases.end(), losses.begin(), losses.end());
  double worst = 0;
  std::string worst_op;
  for (const auto& [name, build] : cases) {
    Rng rng(Rng::combine(opts.seed, Rng::hash(name)));
    for (int i = 0; i < opts.instances; ++i) {
      const GradCase c = build(rng);
      const GradCheckReport rep = finite_diff_check(c.f, c.params, kGradStep, kGradTol);
      if (rep.max_rel_err > worst) {
        worst = rep.max_rel_err;
        worst_op = name;
      }
      record(s, rep.pass,
             name + " instance " + std::to_string(i) + ": rel-err " + num(rep.max_rel_err) + " at param " +
                 std::to_string(rep.worst_param) + "[" + std::to_string(rep.worst_index) + "] analytic " +
                 num(rep.worst_analytic) + " numeric " + num(rep.worst_numeric));
    }
  }
  finish(s, std::to_string(cases.size()) + " ops x " + std::to_string(opts.instances) + " instances, worst rel-err " +
                num(worst) + " (" + worst_op + ")");
  return s;
}

SuiteResult permutation_suite(const SelfCheckOptions& opts) {
  SuiteResult s{"group order invariance", true, 0, 0, {}};
  const ModelConfig cfg = tiny_model(opts.pe_in_tgl);
  ParameterSet<double> params(opts.seed);
  const auto tgl = TglWeights<double>::create(params, cfg);
  const auto tgf = TgfWeights<double>::create(params, cfg);
  const int q = cfg.tokens();
  Rng rng(Rng::combine(opts.seed, Rng::hash("permutation")));
  double worst = 0;
  NoGradGuard guard;
  for (int trial = 0; trial < opts.instances; ++trial) {
    const int n = rng.uniform_int(2, 5);
    const auto group = token_group(n, q, cfg.d, rng);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<T> permuted;
    for (int p : perm) permuted.push_back(group[p]);
    const T g = tgl_forward(group, tgl, cfg);
    const T gp = tgl_forward(permuted, tgl, cfg);
    const double gap = equivariance_gap(g, gp, perm, q);
    const double cgap = max_diff(group_consensus(g, n, tgf), group_consensus(gp, n, tgf));
    worst = std::max({worst, gap, cgap});
    record(s, gap <= 1e-9, "group encoder not permutation-equivariant: N=" + std::to_string(n) + ", gap " + num(gap));
    record(s, cgap <= 1e-9, "group consensus depends on order: N=" + std::to_string(n) + ", gap " + num(cgap));
  }
  // End to end on a tiny model.
  const CoSformer<double> model(cfg, opts.seed);
  std::vector<T> images;
  for (int i = 0; i < 4; ++i) images.push_back(uniform({3, cfg.input_h, cfg.input_w}, rng, 0, 1));
  const auto ref = model.forward(images).m;
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<int> perm{0, 1, 2, 3};
    rng.shuffle(perm);
    std::vector<T> permuted;
    for (int p : perm) permuted.push_back(images[p]);
    const auto out = model.forward(permuted).m;
    double gap = 0;
    for (int k = 0; k < 4; ++k) gap = std::max(gap, max_diff(out[k], ref[perm[k]]));
    worst = std::max(worst, gap);
    record(s, gap <= 1e-9, "co-saliency maps change with image order: gap " + num(gap));
  }
  finish(s, std::to_string(s.cases) + " checks, worst gap " + num(worst));
  return s;
}

SuiteResult pe_counterexample_suite(const SelfCheckOptions& opts) {
  SuiteResult s{"positional-encoding counterexample", true, 0, 0, {}};
  const ModelConfig cfg = tiny_model(true);
  ParameterSet<double> params(opts.seed);
  const auto tgl = TglWeights<double>::create(params, cfg);
  Rng rng(Rng::combine(opts.seed, Rng::hash("pe")));
  NoGradGuard guard;
  const int n = 4, q = cfg.tokens();
  const auto group = token_group(n, q, cfg.d, rng);
  const T g = tgl_forward(group, tgl, cfg);
  double best = 0;
  std::vector<int> witness;
  for (int trial = 0; trial < 10 && best <= 1e-3; ++trial) {
    std::vector<int> perm{0, 1, 2, 3};
    rng.shuffle(perm);
    std::vector<T> permuted;
    for (int p : perm) permuted.push_back(group[p]);
    const double gap = equivariance_gap(g, tgl_forward(permuted, tgl, cfg), perm, q);
    if (gap > best) {
      best = gap;
      witness = perm;
    }
  }
  record(s, best > 1e-3, "no reordering changed the PE-injected group encoder by more than 1e-3 (max " + num(best) + ")");
  std::string w;
  for (int p : witness) w += std::to_string(p);
  finish(s, "order " + w + " moves the output by " + num(best));
  return s;
}

SuiteResult mask_suite(const SelfCheckOptions& opts) {
  SuiteResult s{"mask arithmetic", true, 0, 0, {}};
  auto check = [&](const BinaryMask& ms, const BinaryMask& m, const BinaryMask& t, const MaskTriple& r,
                   const std::string& where) {
    bool ok = true;
    std::string why;
    for (std::size_t i = 0; i < t.bits.size() && ok; ++i) {
      const bool a = r.agree.bits[i], p = r.missed.bits[i], n = r.noise.bits[i], g = t.bits[i];
      const bool c = ms.bits[i] != m.bits[i];
      if ((a || p) != g) why = "m_a | m_p != T";
      else if (a && p) why = "m_a & m_p not empty";
      else if (n && g) why = "m_n & T not empty";
      else if (a && n) why = "m_a & m_n not empty";
      else if (a != (c && g) || p != (g && !c) || n != (c && !g)) why = "disagrees with the pixelwise XOR oracle";
      else continue;
      ok = false;
      why += " at pixel " + std::to_string(i) + " (" + where + ")";
    }
    record(s, ok, why);
  };
  // Exhaustive over 2x2.
  for (int code = 0; code < 4096; ++code) {
    BinaryMask ms = BinaryMask::zeros(2, 2), m = ms, t = ms;
    for (int i = 0; i < 4; ++i) {
      ms.bits[i] = (code >> i) & 1;
      m.bits[i] = (code >> (4 + i)) & 1;
      t.bits[i] = (code >> (8 + i)) & 1;
    }
    check(ms, m, t, build_mask_triple(ms, m, t, opts.mask_op), "2x2 case " + std::to_string(code));
  }
  // Random continuous 8x8 maps through the binarizing entry point.
  Rng rng(Rng::combine(opts.seed, Rng::hash("masks")));
  const LossConfig cfg;
  for (int trial = 0; trial < 10000; ++trial) {
    const T ms = uniform({8, 8}, rng, 0, 1), m = uniform({8, 8}, rng, 0, 1);
    const BinaryMask t = binarize(binary({8, 8}, rng, false), 0.5);
    check(binarize(ms, 0.5), binarize(m, 0.5), t, build_mask_triple(ms, m, t, cfg, opts.mask_op),
          "8x8 trial " + std::to_string(trial));
  }
  finish(s, std::to_string(s.cases) + " triples, zero violations");
  return s;
}

SuiteResult loss_sanity_suite(const SelfCheckOptions& opts) {
  SuiteResult s{"loss sanity", true, 0, 0, {}};
  NoGradGuard guard;
  Rng rng(Rng::combine(opts.seed, Rng::hash("sanity")));
  const LossConfig cfg;
  for (int trial = 0; trial < 5; ++trial) {
    const std::vector<T> t{binary({16, 16}, rng)};
    const std::vector<T> x{uniform({16, 16}, rng, 0, 1)};
    const double bce = bce_loss(t, t, cfg).item();
    const double ssim_x = ssim_loss(x, x, cfg).item();
    const double ssim_t = ssim_loss(t, t, cfg).item();
    const double f = fmeasure_loss(t, t, cfg).item();
    record(s, bce >= 0 && bce <= 1e-6, "BCE(t, t) = " + num(bce));
    record(s, std::abs(ssim_x) <= 1e-6, "SSIM-loss(x, x) = " + num(ssim_x));
    record(s, std::abs(ssim_t) <= 1e-6, "SSIM-loss(t, t) = " + num(ssim_t));
    record(s, f >= 0 && f <= 1e-5, "F-loss(t, t) = " + num(f));
  }
  // Unit vectors with a.p = 1, a.n = -1 and tau = 1.
  const std::vector<std::optional<T>> za{T::from_data({1, 2}, {1, 0})}, zp{T::from_data({1, 2}, {1, 0})},
      zn{T::from_data({1, 2}, {-1, 0})};
  LossConfig unit = cfg;
  unit.tau = 1.0;
  unit.paper_exact_denominator = true;
  const double exact = contrastive_single(za, zp, zn, unit).item();
  unit.paper_exact_denominator = false;
  const double standard = contrastive_single(za, zp, zn, unit).item();
  record(s, std::abs(exact - (-2.0)) <= 1e-6, "paper-exact L_single = " + num(exact) + ", expected -2");
  record(s, std::abs(standard - std::log1p(std::exp(-2.0))) <= 1e-6,
         "standard L_single = " + num(standard) + ", expected 0.1269");
  // Two identical GT embeddings and one orthogonal negative.
  const std::vector<std::optional<T>> zt{T::from_data({1, 2}, {1, 0}), T::from_data({1, 2}, {1, 0})},
      zn2{T::from_data({1, 2}, {0, 1}), std::nullopt};
  const double group = contrastive_group(zt, zn2, unit).item();
  record(s, std::abs(group - 2 * std::log1p(std::exp(-1.0))) <= 1e-6,
         "standard L_group = " + num(group) + ", expected 2 x 0.3133");
  char buf[160];
  std::snprintf(buf, sizeof buf, "L_single %.6f (paper-exact) / %.6f (standard), L_group %.6f", exact, standard, group);
  finish(s, buf);
  return s;
}

std::array<PrPoint, kThresholds> brute_force_pr(const std::vector<Plane>& preds, const std::vector<Plane>& gts,
                                                double beta_sq) {
  std::array<PrPoint, kThresholds> out{};
  for (int k = 0; k < kThresholds; ++k) {
    double p_sum = 0, r_sum = 0;
    int used = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      double tp = 0, fg = 0, pos = 0;
      for (Eigen::Index j = 0; j < preds[i].size(); ++j) {
        const bool on = quantize_byte(preds[i](j)) >= k;
        const bool g = gts[i](j) != 0;
        fg += on;
        pos += g;
        tp += on && g;
      }
      if (pos == 0) continue;
      ++used;
      p_sum += tp / (fg + 1e-12);
      r_sum += tp / (pos + 1e-12);
    }
    out[k].threshold = k / 255.0;
    if (used == 0) continue;
    out[k].precision = p_sum / used;
    out[k].recall = r_sum / used;
    const double den = beta_sq * out[k].precision + out[k].recall;
    out[k].f = den > 0 ? (1 + beta_sq) * out[k].precision * out[k].recall / den : 0.0;
  }
  return out;
}

double brute_force_e_at(const Plane& pred, const Plane& gt, int threshold) {
  const double eps = std::numeric_limits<double>::epsilon();
  const Eigen::Index n = pred.size();
  Plane fm(pred.rows(), pred.cols());
  for (Eigen::Index j = 0; j < n; ++j) fm(j) = quantize_byte(pred(j)) >= threshold ? 1.0 : 0.0;
  const double gsum = gt.sum();
  Plane enh(pred.rows(), pred.cols());
  if (gsum == 0) {
    enh = 1.0 - fm;
  } else if (gsum == static_cast<double>(n)) {
    enh = fm;
  } else {
    const Plane af = fm - fm.mean();
    const Plane ag = gt - gt.mean();
    const Plane align = 2.0 * af * ag / (af.square() + ag.square() + eps);
    enh = (align + 1.0).square() / 4.0;
  }
  return enh.sum() / static_cast<double>(n);
}

SuiteResult metric_oracle_suite(const SelfCheckOptions& opts) {
  SuiteResult s{"metric oracles", true, 0, 0, {}};
  Rng rng(Rng::combine(opts.seed, Rng::hash("metrics")));
  auto random_pred = [&] {
    Plane p(8, 8);
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      // Mix of free values, exact grid levels and rounding midpoints.
      const int kind = rng.uniform_int(0, 2);
      const int k = rng.uniform_int(0, 254);
      p(j) = kind == 0 ? rng.uniform01() : kind == 1 ? k / 255.0 : (k + 0.5) / 255.0;
    }
    return p;
  };
  auto random_gt = [&](int mode) {
    Plane g(8, 8);
    for (Eigen::Index j = 0; j < g.size(); ++j) g(j) = mode == 1 ? 0.0 : mode == 2 ? 1.0 : (rng.uniform01() < 0.3);
    if (mode == 0) g(rng.uniform_int(0, 63)) = 1.0;
    return g;
  };
  double worst_e = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.uniform_int(1, 4);
    std::vector<Plane> preds, gts;
    for (int i = 0; i < n; ++i) {
      preds.push_back(random_pred());
      gts.push_back(random_gt(rng.uniform_int(0, 9) == 0 ? rng.uniform_int(1, 2) : 0));
    }
    const FCurve fc = f_curve(preds, gts);
    const auto brute = brute_force_pr(preds, gts);
    bool same = true;
    double brute_max = 0;
    for (int k = 0; k < kThresholds; ++k) {
      same = same && fc.points[k].precision == brute[k].precision && fc.points[k].recall == brute[k].recall &&
             fc.points[k].f == brute[k].f;
      brute_max = std::max(brute_max, brute[k].f);
    }
    record(s, same && fc.f_max == brute_max, "F-measure sweep differs from brute force in trial " + std::to_string(trial));
    for (int i = 0; i < n; ++i) {
      const auto curve = e_measure_curve(preds[i], gts[i]);
      double gap = 0, bmax = 0;
      for (int k = 0; k < kThresholds; ++k) {
        const double b = brute_force_e_at(preds[i], gts[i], k);
        gap = std::max(gap, std::abs(curve[k] - b));
        bmax = std::max(bmax, b);
      }
      gap = std::max(gap, std::abs(e_measure_max(preds[i], gts[i]) - bmax));
      worst_e = std::max(worst_e, gap);
      record(s, gap <= 1e-12, "E-measure sweep differs from brute force by " + num(gap) + " in trial " + std::to_string(trial));
    }
  }
  for (int trial = 0; trial < 20; ++trial) {
    const Plane gt = random_gt(trial < 2 ? trial + 1 : 0);
    const MetricsReport r = evaluate({gt}, {gt}, {"perfect"});
    const bool ok = r.mae == 0 && std::abs(r.s_alpha - 1) <= 1e-6 && std::abs(r.e_max - 1) <= 1e-6 &&
                    (trial < 2 || std::abs(r.f_max - 1) <= 1e-6);
    record(s, ok, "perfect prediction scored mae " + num(r.mae) + ", f " + num(r.f_max) + ", s " + num(r.s_alpha) +
                      ", e " + num(r.e_max));
  }
  finish(s, "F sweeps bit-identical, E sweeps within " + num(worst_e) + ", perfect prediction scores 1");
  return s;
}

std::vector<SuiteResult> run_selfcheck(const SelfCheckOptions& opts) {
  return {gradient_suite(opts),      permutation_suite(opts), pe_counterexample_suite(opts),
          mask_suite(opts),          loss_sanity_suite(opts), metric_oracle_suite(opts)};
}

}  // namespace cosod
