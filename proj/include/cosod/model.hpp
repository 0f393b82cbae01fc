#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cosod/model_config.hpp"
#include "cosod/params.hpp"
#include "cosod/tensor.hpp"
#include "cosod/transformer.hpp"

namespace cosod {

// N relevant images [3, H0, W0] in [0, 1] with binary masks [H0, W0].
template <typename Scalar>
struct ImageGroup {
  std::vector<Tensor<Scalar>> images;
  std::vector<Tensor<Scalar>> gt;
  std::string group_id;

  void validate() const;
};

// Auxiliary single-image saliency samples; may be empty.
template <typename Scalar>
struct AuxBatch {
  std::vector<Tensor<Scalar>> images;
  std::vector<Tensor<Scalar>> gt;
};

// F3..F6 at strides 4, 8, 16, 32 (halved when cfg.stride_divisor is 2).
template <typename Scalar>
struct FeaturePyramid {
  std::array<Tensor<Scalar>, 4> levels;

  const Tensor<Scalar>& f3() const { return levels[0]; }
  const Tensor<Scalar>& f4() const { return levels[1]; }
  const Tensor<Scalar>& f5() const { return levels[2]; }
  const Tensor<Scalar>& f6() const { return levels[3]; }
};

template <typename Scalar>
struct SaliencyMaps {
  std::vector<Tensor<Scalar>> m;    // N final co-saliency maps [H0, W0]
  std::vector<Tensor<Scalar>> m_s;  // N early-head maps [H0, W0]
  std::vector<Tensor<Scalar>> h;    // K auxiliary maps [H0, W0]

  // Intermediates consumed by the contrastive losses.
  std::vector<Tensor<Scalar>> s;    // TSIR tokens per image [Q, d]
  Tensor<Scalar> g_l;               // TGL output [N*Q, d]
  std::vector<Tensor<Scalar>> s_g;  // TGF tokens per image [Q, d]
};

template <typename Scalar>
struct BackboneWeights {
  ConvLayer<Scalar> stem, stage3, stage4, stage5, side6;

  static BackboneWeights create(ParameterSet<Scalar>& params, const ModelConfig& cfg);
};

template <typename Scalar>
struct DecoderWeights {
  // Index 0 fuses F5, 1 fuses F4, 2 fuses F3.
  std::array<ConvLayer<Scalar>, 3> lateral;
  std::array<ConvLayer<Scalar>, 3> fuse;
  ConvLayer<Scalar> out;

  static DecoderWeights create(ParameterSet<Scalar>& params, const ModelConfig& cfg);
};

template <typename Scalar>
struct EarlyHeadWeights {
  ConvLayer<Scalar> conv3, conv1;

  static EarlyHeadWeights create(ParameterSet<Scalar>& params, const ModelConfig& cfg);
};

// Non-linear projection g(.) used by the contrastive terms.
template <typename Scalar>
struct ProjectionWeights {
  Linear<Scalar> fc1, fc2;

  static ProjectionWeights create(ParameterSet<Scalar>& params, const ModelConfig& cfg);
};

template <typename Scalar>
FeaturePyramid<Scalar> backbone_forward(const Tensor<Scalar>& image, const BackboneWeights<Scalar>& w,
                                        const ModelConfig& cfg);

// Tokens [Q, d] -> map [H0, W0] in [0, 1] through three upsample-and-fuse
// stages and a final bilinear resize, 1x1 conv and sigmoid.
template <typename Scalar>
Tensor<Scalar> decoder_forward(const Tensor<Scalar>& tokens, const FeaturePyramid<Scalar>& pyramid,
                               const DecoderWeights<Scalar>& w, const ModelConfig& cfg);

// Tokens [Q, d] -> M_S [H0, W0]: 3x3 conv + relu, 1x1 conv, sigmoid, resize.
template <typename Scalar>
Tensor<Scalar> early_saliency_head(const Tensor<Scalar>& tokens, const EarlyHeadWeights<Scalar>& w,
                                   const ModelConfig& cfg);

// Vector [1, d] (or [k, d]) -> unit-norm embedding rows [., proj_dim].
template <typename Scalar>
Tensor<Scalar> project(const Tensor<Scalar>& v, const ProjectionWeights<Scalar>& w);

template <typename Scalar>
class CoSformer {
 public:
  CoSformer(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

  const BackboneWeights<Scalar>& backbone() const { return backbone_; }
  const TsirWeights<Scalar>& tsir() const { return tsir_; }
  const TglWeights<Scalar>& tgl() const { return tgl_; }
  const TgfWeights<Scalar>& tgf() const { return tgf_; }
  const DecoderWeights<Scalar>& decoder() const { return decoder_; }
  const EarlyHeadWeights<Scalar>& early_head() const { return early_head_; }
  const ProjectionWeights<Scalar>& projection() const { return projection_; }
  const Tensor<Scalar>& positional_table() const { return pe_; }

  FeaturePyramid<Scalar> pyramid(const Tensor<Scalar>& image) const {
    return backbone_forward(image, backbone_, cfg_);
  }

  // Backbone -> TSIR -> decoder, with TGL/TGF bypassed.
  Tensor<Scalar> aux_forward(const Tensor<Scalar>& image) const;

  SaliencyMaps<Scalar> forward(const std::vector<Tensor<Scalar>>& images,
                               const std::vector<Tensor<Scalar>>& aux_images = {}) const;
  SaliencyMaps<Scalar> forward(const ImageGroup<Scalar>& group, const AuxBatch<Scalar>& aux) const {
    return forward(group.images, aux.images);
  }

 private:
  ModelConfig cfg_;
  ParameterSet<Scalar> params_;
  BackboneWeights<Scalar> backbone_;
  TsirWeights<Scalar> tsir_;
  TglWeights<Scalar> tgl_;
  TgfWeights<Scalar> tgf_;
  DecoderWeights<Scalar> decoder_;
  EarlyHeadWeights<Scalar> early_head_;
  ProjectionWeights<Scalar> projection_;
  Tensor<Scalar> pe_;
};

}  // namespace cosod
