#include "cosod/transformer.hpp"

#include <cmath>

namespace cosod {

template <typename Scalar>
Linear<Scalar> Linear<Scalar>::create(ParameterSet<Scalar>& params, const std::string& name, int in,
                                      int out) {
  Linear l;
  l.weight = params.uniform(name + ".weight", {in, out}, in);
  l.bias = params.uniform(name + ".bias", {out}, in);
  return l;
}

template <typename Scalar>
AttentionWeights<Scalar> AttentionWeights<Scalar>::create(ParameterSet<Scalar>& params,
                                                          const std::string& name, int d) {
  return {Linear<Scalar>::create(params, name + ".query", d, d),
          Linear<Scalar>::create(params, name + ".key", d, d),
          Linear<Scalar>::create(params, name + ".value", d, d),
          Linear<Scalar>::create(params, name + ".output", d, d)};
}

template <typename Scalar>
TransformerLayerWeights<Scalar> TransformerLayerWeights<Scalar>::create(ParameterSet<Scalar>& params,
                                                                        const std::string& name,
                                                                        int d, int ffn_multiplier) {
  TransformerLayerWeights w;
  w.attention = AttentionWeights<Scalar>::create(params, name + ".attn", d);
  w.norm1_gain = params.constant(name + ".norm1.gain", {d}, Scalar(1));
  w.norm1_bias = params.constant(name + ".norm1.bias", {d}, Scalar(0));
  w.ffn_in = Linear<Scalar>::create(params, name + ".ffn_in", d, d * ffn_multiplier);
  w.ffn_out = Linear<Scalar>::create(params, name + ".ffn_out", d * ffn_multiplier, d);
  w.norm2_gain = params.constant(name + ".norm2.gain", {d}, Scalar(1));
  w.norm2_bias = params.constant(name + ".norm2.bias", {d}, Scalar(0));
  return w;
}

template <typename Scalar>
TransformerStack<Scalar> make_stack(ParameterSet<Scalar>& params, const std::string& name,
                                    int layers, int d, int ffn_multiplier) {
  TransformerStack<Scalar> stack;
  for (int i = 0; i < layers; ++i)
    stack.push_back(TransformerLayerWeights<Scalar>::create(
        params, name + ".layer" + std::to_string(i), d, ffn_multiplier));
  return stack;
}

template <typename Scalar>
Tensor<Scalar> positional_encoding_2d(int h, int w, int d) {
  if (d < 4 || d % 4 != 0) throw ConfigError("positional encoding width must be divisible by 4");
  if (h < 1 || w < 1) throw ShapeError("positional encoding grid must be non-empty");
  const int half = d / 2;
  std::vector<Scalar> table(static_cast<std::size_t>(h) * w * d);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      Scalar* row = table.data() + static_cast<std::size_t>(y * w + x) * d;
      for (int i = 0; i < half; i += 2) {
        const double freq = std::pow(10000.0, static_cast<double>(i) / half);
        row[i] = static_cast<Scalar>(std::sin(x / freq));
        row[i + 1] = static_cast<Scalar>(std::cos(x / freq));
        row[half + i] = static_cast<Scalar>(std::sin(y / freq));
        row[half + i + 1] = static_cast<Scalar>(std::cos(y / freq));
      }
    }
  return Tensor<Scalar>::from_data({h * w, d}, std::move(table));
}

template <typename Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& q_in, const Tensor<Scalar>& kv_in,
                                    const Tensor<Scalar>& pe_q, const Tensor<Scalar>& pe_k,
                                    const AttentionWeights<Scalar>& w, int heads,
                                    std::vector<Tensor<Scalar>>* attention) {
  if (q_in.rank() != 2 || kv_in.rank() != 2) throw ShapeError("attention: tokens must be [T, d]");
  const int d = q_in.dim(1);
  if (kv_in.dim(1) != d) throw ShapeError("attention: query and key widths differ");
  if (heads < 1 || d % heads != 0)
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (pe_q.defined() && pe_q.shape() != q_in.shape())
    throw ShapeError("attention: query PE shape " + shape_str(pe_q.shape()) + " vs tokens " +
                     shape_str(q_in.shape()));
  if (pe_k.defined() && pe_k.shape() != kv_in.shape())
    throw ShapeError("attention: key PE shape " + shape_str(pe_k.shape()) + " vs tokens " +
                     shape_str(kv_in.shape()));

  const Tensor<Scalar> q = w.query(pe_q.defined() ? q_in + pe_q : q_in);
  const Tensor<Scalar> k = w.key(pe_k.defined() ? kv_in + pe_k : kv_in);
  const Tensor<Scalar> v = w.value(kv_in);
  const int dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  std::vector<Tensor<Scalar>> outputs;
  outputs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    const auto qh = heads == 1 ? q : slice(q, 1, h * dh, dh);
    const auto kh = heads == 1 ? k : slice(k, 1, h * dh, dh);
    const auto vh = heads == 1 ? v : slice(v, 1, h * dh, dh);
    const auto weights = softmax(mul_scalar(matmul(qh, transpose(kh)), scale), 1);
    if (attention) attention->push_back(weights);
    outputs.push_back(matmul(weights, vh));
  }
  return w.output(heads == 1 ? outputs.front() : concat(outputs, 1));
}

template <typename Scalar>
Tensor<Scalar> transformer_layer(const Tensor<Scalar>& x, const Tensor<Scalar>& pe,
                                 const TransformerLayerWeights<Scalar>& w, int heads) {
  const auto attended = multi_head_attention(x, x, pe, pe, w.attention, heads);
  const auto x1 = layer_norm(x + attended, w.norm1_gain, w.norm1_bias);
  const auto ffn = w.ffn_out(relu(w.ffn_in(x1)));
  return layer_norm(x1 + ffn, w.norm2_gain, w.norm2_bias);
}

template <typename Scalar>
Tensor<Scalar> run_stack(const Tensor<Scalar>& x, const Tensor<Scalar>& pe,
                         const TransformerStack<Scalar>& stack, int heads) {
  Tensor<Scalar> y = x;
  for (const auto& layer : stack) y = transformer_layer(y, pe, layer, heads);
  return y;
}

template <typename Scalar>
Tensor<Scalar> tokens_to_map(const Tensor<Scalar>& tokens, int h, int w) {
  if (tokens.rank() != 2 || tokens.dim(0) != h * w)
    throw ShapeError("token count " + shape_str(tokens.shape()) + " does not match grid " +
                     std::to_string(h) + "x" + std::to_string(w));
  return reshape(transpose(tokens), {tokens.dim(1), h, w});
}

template <typename Scalar>
Tensor<Scalar> map_to_tokens(const Tensor<Scalar>& map) {
  if (map.rank() != 3) throw ShapeError("feature map must be [C, H, W]");
  return transpose(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

template <typename Scalar>
ConvLayer<Scalar> ConvLayer<Scalar>::create(ParameterSet<Scalar>& params, const std::string& name,
                                            Conv2dShape s) {
  ConvLayer c;
  const int fan_in = s.in * s.kernel * s.kernel;
  c.weight = params.uniform(name + ".weight", {s.out, s.in, s.kernel, s.kernel}, fan_in);
  c.bias = params.uniform(name + ".bias", {s.out}, fan_in);
  c.pad = s.kernel / 2;
  return c;
}

template <typename Scalar>
TsirWeights<Scalar> TsirWeights<Scalar>::create(ParameterSet<Scalar>& params, const ModelConfig& cfg) {
  TsirWeights w;
  w.proj = ConvLayer<Scalar>::create(params, "tsir.proj", {cfg.stage_channels[3], cfg.d, 1});
  if (cfg.tsir == TsirMode::kTransformer) {
    w.layers = make_stack(params, "tsir", cfg.layers_tsir, cfg.d, cfg.ffn_multiplier);
  } else {
    w.convs.push_back(ConvLayer<Scalar>::create(params, "tsir.conv0", {cfg.d, cfg.d, 3}));
    w.convs.push_back(ConvLayer<Scalar>::create(params, "tsir.conv1", {cfg.d, cfg.d, 3}));
  }
  return w;
}

template <typename Scalar>
TglWeights<Scalar> TglWeights<Scalar>::create(ParameterSet<Scalar>& params, const ModelConfig& cfg) {
  TglWeights w;
  if (cfg.tgl == TglMode::kTransformer)
    w.layers = make_stack(params, "tgl", cfg.layers_tgl, cfg.d, cfg.ffn_multiplier);
  else
    w.mix = ConvLayer<Scalar>::create(params, "tgl.mix", {cfg.group_size * cfg.d, cfg.d, 1});
  return w;
}

template <typename Scalar>
TgfWeights<Scalar> TgfWeights<Scalar>::create(ParameterSet<Scalar>& params, const ModelConfig& cfg) {
  TgfWeights w;
  w.proj = Linear<Scalar>::create(params, "tgf.proj", cfg.d, cfg.d);
  if (cfg.tgf == TgfMode::kTransformer) {
    w.layers = make_stack(params, "tgf", cfg.layers_tgf, cfg.d, cfg.ffn_multiplier);
  } else {
    w.convs.push_back(ConvLayer<Scalar>::create(params, "tgf.conv0", {2 * cfg.d, cfg.d, 3}));
    w.convs.push_back(ConvLayer<Scalar>::create(params, "tgf.conv1", {cfg.d, cfg.d, 3}));
  }
  return w;
}

template <typename Scalar>
Tensor<Scalar> tsir_forward(const Tensor<Scalar>& f6, const Tensor<Scalar>& pe,
                            const TsirWeights<Scalar>& w, const ModelConfig& cfg) {
  if (f6.rank() != 3) throw ShapeError("tsir: F6 must be [C, H, W]");
  const int h = f6.dim(1), wd = f6.dim(2);
  const auto projected = w.proj(f6);
  const auto tokens = map_to_tokens(projected);
  if (cfg.tsir == TsirMode::kTransformer) {
    if (pe.defined() && pe.dim(0) != h * wd)
      throw ShapeError("tsir: PE rows " + std::to_string(pe.dim(0)) + " vs Q = " +
                       std::to_string(h * wd));
    return run_stack(tokens, pe, w.layers, cfg.heads) + tokens;
  }
  const auto x = w.convs[1](relu(w.convs[0](projected)));
  return map_to_tokens(x) + tokens;
}

template <typename Scalar>
Tensor<Scalar> tgl_forward(const std::vector<Tensor<Scalar>>& s, const TglWeights<Scalar>& w,
                           const ModelConfig& cfg) {
  if (s.size() < 2) throw UsageError("tgl: a group needs at least two images");
  const int q = s.front().dim(0);
  for (const auto& t : s)
    if (t.shape() != s.front().shape()) throw ShapeError("tgl: token sets differ in shape");
  const int n = static_cast<int>(s.size());
  if (cfg.tgl == TglMode::kTransformer) {
    const auto g = concat(s, 0);
    Tensor<Scalar> pe;
    if (cfg.pe_in_tgl) {
      // Stack the images vertically so each image index gets its own rows.
      const int tw = q % cfg.token_w() == 0 ? cfg.token_w() : 1;
      pe = positional_encoding_2d<Scalar>(n * q / tw, tw, g.dim(1));
    }
    return run_stack(g, pe, w.layers, cfg.heads);
  }
  if (n != cfg.group_size)
    throw ShapeError("tgl baseline expects groups of exactly " + std::to_string(cfg.group_size));
  const int th = cfg.token_h(), tw = cfg.token_w();
  std::vector<Tensor<Scalar>> maps;
  for (const auto& t : s) maps.push_back(tokens_to_map(t, th, tw));
  const auto mixed = map_to_tokens(w.mix(concat(maps, 0)));
  return concat(std::vector<Tensor<Scalar>>(n, mixed), 0);
}

template <typename Scalar>
Tensor<Scalar> group_consensus(const Tensor<Scalar>& g_l, int group_size,
                               const TgfWeights<Scalar>& w) {
  if (g_l.rank() != 2 || group_size < 1 || g_l.dim(0) % group_size != 0)
    throw ShapeError("tgf: G_L " + shape_str(g_l.shape()) + " not divisible into " +
                     std::to_string(group_size) + " images");
  const int q = g_l.dim(0) / group_size, d = g_l.dim(1);
  const auto per_image = reshape(g_l, {group_size, q * d});
  return w.proj(reshape(mean(per_image, 0), {q, d}));
}

template <typename Scalar>
Tensor<Scalar> tgf_fuse(const Tensor<Scalar>& s_n, const Tensor<Scalar>& consensus,
                        const Tensor<Scalar>& pe, const TgfWeights<Scalar>& w,
                        const ModelConfig& cfg) {
  if (s_n.shape() != consensus.shape())
    throw ShapeError("tgf: S " + shape_str(s_n.shape()) + " vs consensus " +
                     shape_str(consensus.shape()));
  const int q = s_n.dim(0);
  if (cfg.tgf == TgfMode::kTransformer) {
    const auto joint = concat(std::vector<Tensor<Scalar>>{s_n, consensus}, 0);
    Tensor<Scalar> joint_pe;
    if (pe.defined()) joint_pe = concat(std::vector<Tensor<Scalar>>{pe, pe}, 0);
    return slice(run_stack(joint, joint_pe, w.layers, cfg.heads), 0, 0, q);
  }
  const int th = cfg.token_h(), tw = cfg.token_w();
  const auto joint = concat(
      std::vector<Tensor<Scalar>>{tokens_to_map(s_n, th, tw), tokens_to_map(consensus, th, tw)}, 0);
  const auto x = w.convs[1](relu(w.convs[0](joint)));
  return map_to_tokens(x) + s_n;
}

template <typename Scalar>
Tensor<Scalar> tgf_forward(const Tensor<Scalar>& s_n, const Tensor<Scalar>& g_l, int group_size,
                           const Tensor<Scalar>& pe, const TgfWeights<Scalar>& w,
                           const ModelConfig& cfg) {
  return tgf_fuse(s_n, group_consensus(g_l, group_size, w), pe, w, cfg);
}

#define COSOD_INSTANTIATE(S)                                                                        \
  template struct Linear<S>;                                                                        \
  template struct AttentionWeights<S>;                                                              \
  template struct TransformerLayerWeights<S>;                                                       \
  template struct ConvLayer<S>;                                                                     \
  template struct TsirWeights<S>;                                                                   \
  template struct TglWeights<S>;                                                                    \
  template struct TgfWeights<S>;                                                                    \
  template TransformerStack<S> make_stack<S>(ParameterSet<S>&, const std::string&, int, int, int); \
  template Tensor<S> positional_encoding_2d<S>(int, int, int);                                      \
  template Tensor<S> multi_head_attention<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,  \
                                             const Tensor<S>&, const AttentionWeights<S>&, int,      \
                                             std::vector<Tensor<S>>*);                               \
  template Tensor<S> transformer_layer<S>(const Tensor<S>&, const Tensor<S>&,                       \
                                          const TransformerLayerWeights<S>&, int);                  \
  template Tensor<S> run_stack<S>(const Tensor<S>&, const Tensor<S>&, const TransformerStack<S>&,   \
                                  int);                                                             \
  template Tensor<S> tokens_to_map<S>(const Tensor<S>&, int, int);                                  \
  template Tensor<S> map_to_tokens<S>(const Tensor<S>&);                                            \
  template Tensor<S> tsir_forward<S>(const Tensor<S>&, const Tensor<S>&, const TsirWeights<S>&,     \
                                     const ModelConfig&);                                           \
  template Tensor<S> tgl_forward<S>(const std::vector<Tensor<S>>&, const TglWeights<S>&,            \
                                    const ModelConfig&);                                            \
  template Tensor<S> group_consensus<S>(const Tensor<S>&, int, const TgfWeights<S>&);               \
  template Tensor<S> tgf_fuse<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,              \
                                 const TgfWeights<S>&, const ModelConfig&);                         \
  template Tensor<S> tgf_forward<S>(const Tensor<S>&, const Tensor<S>&, int, const Tensor<S>&,      \
                                    const TgfWeights<S>&, const ModelConfig&);

COSOD_INSTANTIATE(float)
COSOD_INSTANTIATE(double)

#undef COSOD_INSTANTIATE

}  // namespace cosod
