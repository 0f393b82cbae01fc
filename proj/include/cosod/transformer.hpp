#pragma once

#include <string>
#include <vector>

#include "cosod/model_config.hpp"
#include "cosod/params.hpp"
#include "cosod/tensor.hpp"

namespace cosod {

// Token-wise affine map: x [T, in] -> [T, out]. Weight is stored [in, out].
template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  static Linear create(ParameterSet<Scalar>& params, const std::string& name, int in, int out);
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return matmul(x, weight) + bias; }
};

template <typename Scalar>
struct AttentionWeights {
  Linear<Scalar> query, key, value, output;

  static AttentionWeights create(ParameterSet<Scalar>& params, const std::string& name, int d);
};

template <typename Scalar>
struct TransformerLayerWeights {
  AttentionWeights<Scalar> attention;
  Tensor<Scalar> norm1_gain, norm1_bias;
  Linear<Scalar> ffn_in, ffn_out;
  Tensor<Scalar> norm2_gain, norm2_bias;

  static TransformerLayerWeights create(ParameterSet<Scalar>& params, const std::string& name,
                                        int d, int ffn_multiplier);
};

template <typename Scalar>
using TransformerStack = std::vector<TransformerLayerWeights<Scalar>>;

template <typename Scalar>
TransformerStack<Scalar> make_stack(ParameterSet<Scalar>& params, const std::string& name,
                                    int layers, int d, int ffn_multiplier);

// Fixed 2-D sinusoidal table [h*w, d], row-major over (y, x). Channels
// [0, d/2) encode the column, [d/2, d) the row; inside each half even
// channels are sin(pos / 10000^(2i/(d/2))) and odd channels the matching cos.
template <typename Scalar>
Tensor<Scalar> positional_encoding_2d(int h, int w, int d);

// Scaled dot-product attention over `heads` heads. Positional tables, when
// defined, are added to the query and key inputs only. If `attention` is not
// null, the per-head weight matrices [Tq, Tk] are appended to it.
template <typename Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& q_in, const Tensor<Scalar>& kv_in,
                                    const Tensor<Scalar>& pe_q, const Tensor<Scalar>& pe_k,
                                    const AttentionWeights<Scalar>& w, int heads,
                                    std::vector<Tensor<Scalar>>* attention = nullptr);

// Post-norm layer: x' = Norm(x + MHA(x)), out = Norm(x' + FFN(x')).
template <typename Scalar>
Tensor<Scalar> transformer_layer(const Tensor<Scalar>& x, const Tensor<Scalar>& pe,
                                 const TransformerLayerWeights<Scalar>& w, int heads);

template <typename Scalar>
Tensor<Scalar> run_stack(const Tensor<Scalar>& x, const Tensor<Scalar>& pe,
                         const TransformerStack<Scalar>& stack, int heads);

// [Q, d] tokens <-> [d, h, w] feature map.
template <typename Scalar>
Tensor<Scalar> tokens_to_map(const Tensor<Scalar>& tokens, int h, int w);
template <typename Scalar>
Tensor<Scalar> map_to_tokens(const Tensor<Scalar>& map);

struct Conv2dShape {
  int in, out, kernel;
};

// Convolution parameters plus the padding that keeps "same" geometry.
template <typename Scalar>
struct ConvLayer {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
  int pad = 0;

  static ConvLayer create(ParameterSet<Scalar>& params, const std::string& name, Conv2dShape s);
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return conv2d(x, weight, bias, 1, pad); }
};

template <typename Scalar>
struct TsirWeights {
  ConvLayer<Scalar> proj;                // 1x1, C6 -> d
  TransformerStack<Scalar> layers;       // transformer form
  std::vector<ConvLayer<Scalar>> convs;  // baseline form

  static TsirWeights create(ParameterSet<Scalar>& params, const ModelConfig& cfg);
};

template <typename Scalar>
struct TglWeights {
  TransformerStack<Scalar> layers;  // transformer form
  ConvLayer<Scalar> mix;            // baseline: 1x1 over N*d concatenated channels

  static TglWeights create(ParameterSet<Scalar>& params, const ModelConfig& cfg);
};

template <typename Scalar>
struct TgfWeights {
  Linear<Scalar> proj;  // consensus d -> d
  TransformerStack<Scalar> layers;
  std::vector<ConvLayer<Scalar>> convs;

  static TgfWeights create(ParameterSet<Scalar>& params, const ModelConfig& cfg);
};

// F6 [C6, H6, W6] -> S [Q, d]: 1x1 projection, encoder layers with PE at every
// attention, then the skip fusion S = layers(F) + F.
template <typename Scalar>
Tensor<Scalar> tsir_forward(const Tensor<Scalar>& f6, const Tensor<Scalar>& pe,
                            const TsirWeights<Scalar>& w, const ModelConfig& cfg);

// Stacked per-image tokens -> G_L [N*Q, d], image-major. No positional
// encoding unless cfg.pe_in_tgl is set.
template <typename Scalar>
Tensor<Scalar> tgl_forward(const std::vector<Tensor<Scalar>>& s, const TglWeights<Scalar>& w,
                           const ModelConfig& cfg);

// Image-axis mean of G_L followed by the learned projection: [Q, d].
template <typename Scalar>
Tensor<Scalar> group_consensus(const Tensor<Scalar>& g_l, int group_size,
                               const TgfWeights<Scalar>& w);

// Fuses one image's tokens with a precomputed consensus [Q, d].
template <typename Scalar>
Tensor<Scalar> tgf_fuse(const Tensor<Scalar>& s_n, const Tensor<Scalar>& consensus,
                        const Tensor<Scalar>& pe, const TgfWeights<Scalar>& w,
                        const ModelConfig& cfg);

// S^(n) [Q, d] and G_L [N*Q, d] -> S_G^(n) [Q, d]. Runs on the token
// concatenation [S; consensus] with the PE table repeated for both halves and
// keeps the first Q outputs.
template <typename Scalar>
Tensor<Scalar> tgf_forward(const Tensor<Scalar>& s_n, const Tensor<Scalar>& g_l, int group_size,
                           const Tensor<Scalar>& pe, const TgfWeights<Scalar>& w,
                           const ModelConfig& cfg);

}  // namespace cosod
