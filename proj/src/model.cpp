#include "cosod/model.hpp"

namespace cosod {

template <typename Scalar>
void ImageGroup<Scalar>::validate() const {
  if (images.size() < 2) throw UsageError("image group needs at least two images");
  if (gt.size() != images.size()) throw ShapeError("image group: one mask per image required");
  const Shape& ref = images.front().shape();
  if (ref.size() != 3 || ref[0] != 3) throw ShapeError("images must be [3, H, W]");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != ref) throw ShapeError("image group: image sizes differ");
    if (gt[i].shape() != Shape{ref[1], ref[2]}) throw ShapeError("image group: mask size mismatch");
    for (Scalar v : gt[i].data())
      if (v != Scalar(0) && v != Scalar(1)) throw ShapeError("image group: masks must be binary");
  }
}

template <typename Scalar>
BackboneWeights<Scalar> BackboneWeights<Scalar>::create(ParameterSet<Scalar>& params,
                                                        const ModelConfig& cfg) {
  const auto& c = cfg.stage_channels;
  return {ConvLayer<Scalar>::create(params, "backbone.stem", {3, c[0], 3}),
          ConvLayer<Scalar>::create(params, "backbone.f3", {c[0], c[0], 3}),
          ConvLayer<Scalar>::create(params, "backbone.f4", {c[0], c[1], 3}),
          ConvLayer<Scalar>::create(params, "backbone.f5", {c[1], c[2], 3}),
          ConvLayer<Scalar>::create(params, "backbone.f6", {c[2], c[3], 3})};
}

template <typename Scalar>
DecoderWeights<Scalar> DecoderWeights<Scalar>::create(ParameterSet<Scalar>& params,
                                                      const ModelConfig& cfg) {
  DecoderWeights w;
  const std::array<int, 3> level{5, 4, 3};
  const std::array<int, 3> channels{cfg.stage_channels[2], cfg.stage_channels[1],
                                    cfg.stage_channels[0]};
  for (int i = 0; i < 3; ++i) {
    const std::string tag = std::to_string(level[i]);
    w.lateral[i] = ConvLayer<Scalar>::create(params, "decoder.lateral" + tag, {channels[i], cfg.d, 1});
    w.fuse[i] = ConvLayer<Scalar>::create(params, "decoder.fuse" + tag, {cfg.d, cfg.d, 3});
  }
  w.out = ConvLayer<Scalar>::create(params, "decoder.out", {cfg.d, 1, 1});
  return w;
}

template <typename Scalar>
EarlyHeadWeights<Scalar> EarlyHeadWeights<Scalar>::create(ParameterSet<Scalar>& params,
                                                          const ModelConfig& cfg) {
  return {ConvLayer<Scalar>::create(params, "head_s.conv3", {cfg.d, cfg.d, 3}),
          ConvLayer<Scalar>::create(params, "head_s.conv1", {cfg.d, 1, 1})};
}

template <typename Scalar>
ProjectionWeights<Scalar> ProjectionWeights<Scalar>::create(ParameterSet<Scalar>& params,
                                                            const ModelConfig& cfg) {
  return {Linear<Scalar>::create(params, "proj.fc1", cfg.d, cfg.d),
          Linear<Scalar>::create(params, "proj.fc2", cfg.d, cfg.proj_dim)};
}

template <typename Scalar>
FeaturePyramid<Scalar> backbone_forward(const Tensor<Scalar>& image, const BackboneWeights<Scalar>& w,
                                        const ModelConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("backbone: image must be [3, H, W], got " + shape_str(image.shape()));
  const int stride = cfg.deepest_stride();
  if (image.dim(1) % stride || image.dim(2) % stride)
    throw ShapeError("backbone: input " + shape_str(image.shape()) + " not divisible by stride " +
                     std::to_string(stride));
  FeaturePyramid<Scalar> p;
  auto x = relu(w.stem(image));
  if (cfg.stride_divisor == 1) x = maxpool2(x);
  p.levels[0] = maxpool2(relu(w.stage3(x)));
  p.levels[1] = maxpool2(relu(w.stage4(p.levels[0])));
  p.levels[2] = maxpool2(relu(w.stage5(p.levels[1])));
  // Side path after the last pooling layer.
  p.levels[3] = relu(w.side6(maxpool2(p.levels[2])));
  return p;
}

template <typename Scalar>
Tensor<Scalar> decoder_forward(const Tensor<Scalar>& tokens, const FeaturePyramid<Scalar>& pyramid,
                               const DecoderWeights<Scalar>& w, const ModelConfig& cfg) {
  const auto& f6 = pyramid.f6();
  const int h6 = f6.dim(1), w6 = f6.dim(2);
  if (tokens.rank() != 2 || tokens.dim(0) != h6 * w6)
    throw ShapeError("decoder: token count " + shape_str(tokens.shape()) + " does not match F6 grid " +
                     std::to_string(h6) + "x" + std::to_string(w6));
  Tensor<Scalar> x = tokens_to_map(tokens, h6, w6);
  const std::array<const Tensor<Scalar>*, 3> skips{&pyramid.f5(), &pyramid.f4(), &pyramid.f3()};
  for (int i = 0; i < 3; ++i) {
    const auto& skip = *skips[i];
    const auto up = upsample_bilinear(x, skip.dim(1), skip.dim(2));
    x = relu(w.fuse[i](up + w.lateral[i](skip)));
  }
  const int h0 = pyramid.f3().dim(1) * cfg.f3_stride(), w0 = pyramid.f3().dim(2) * cfg.f3_stride();
  const auto logits = w.out(upsample_bilinear(x, h0, w0));
  return reshape(sigmoid(logits), {h0, w0});
}

template <typename Scalar>
Tensor<Scalar> early_saliency_head(const Tensor<Scalar>& tokens, const EarlyHeadWeights<Scalar>& w,
                                   const ModelConfig& cfg) {
  const int th = cfg.token_h(), tw = cfg.token_w();
  if (tokens.rank() != 2 || tokens.dim(0) != th * tw)
    throw ShapeError("early head: token count " + shape_str(tokens.shape()) + " does not match grid " +
                     std::to_string(th) + "x" + std::to_string(tw));
  const auto x = relu(w.conv3(tokens_to_map(tokens, th, tw)));
  const auto m = upsample_bilinear(sigmoid(w.conv1(x)), cfg.input_h, cfg.input_w);
  return reshape(m, {cfg.input_h, cfg.input_w});
}

template <typename Scalar>
Tensor<Scalar> project(const Tensor<Scalar>& v, const ProjectionWeights<Scalar>& w) {
  return l2_normalize(w.fc2(relu(w.fc1(v))), Scalar(1e-12));
}

template <typename Scalar>
CoSformer<Scalar>::CoSformer(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(seed) {
  cfg_.validate();
  backbone_ = BackboneWeights<Scalar>::create(params_, cfg_);
  tsir_ = TsirWeights<Scalar>::create(params_, cfg_);
  tgl_ = TglWeights<Scalar>::create(params_, cfg_);
  tgf_ = TgfWeights<Scalar>::create(params_, cfg_);
  decoder_ = DecoderWeights<Scalar>::create(params_, cfg_);
  early_head_ = EarlyHeadWeights<Scalar>::create(params_, cfg_);
  projection_ = ProjectionWeights<Scalar>::create(params_, cfg_);
  pe_ = positional_encoding_2d<Scalar>(cfg_.token_h(), cfg_.token_w(), cfg_.d);
}

template <typename Scalar>
Tensor<Scalar> CoSformer<Scalar>::aux_forward(const Tensor<Scalar>& image) const {
  const auto p = pyramid(image);
  const auto s = tsir_forward(p.f6(), pe_, tsir_, cfg_);
  return decoder_forward(s, p, decoder_, cfg_);
}

template <typename Scalar>
SaliencyMaps<Scalar> CoSformer<Scalar>::forward(const std::vector<Tensor<Scalar>>& images,
                                                const std::vector<Tensor<Scalar>>& aux_images) const {
  if (images.size() < 2) throw UsageError("co-saliency needs a group of at least two images");
  SaliencyMaps<Scalar> out;
  std::vector<FeaturePyramid<Scalar>> pyramids;
  for (const auto& img : images) {
    pyramids.push_back(pyramid(img));
    out.s.push_back(tsir_forward(pyramids.back().f6(), pe_, tsir_, cfg_));
    out.m_s.push_back(early_saliency_head(out.s.back(), early_head_, cfg_));
  }
  const int n = static_cast<int>(images.size());
  out.g_l = tgl_forward(out.s, tgl_, cfg_);
  const auto consensus = group_consensus(out.g_l, n, tgf_);
  for (int i = 0; i < n; ++i) {
    out.s_g.push_back(tgf_fuse(out.s[i], consensus, pe_, tgf_, cfg_));
    out.m.push_back(decoder_forward(out.s_g.back(), pyramids[i], decoder_, cfg_));
  }
  for (const auto& img : aux_images) out.h.push_back(aux_forward(img));
  return out;
}

#define COSOD_INSTANTIATE(S)                                                                       \
  template struct ImageGroup<S>;                                                                   \
  template struct BackboneWeights<S>;                                                              \
  template struct DecoderWeights<S>;                                                               \
  template struct EarlyHeadWeights<S>;                                                             \
  template struct ProjectionWeights<S>;                                                            \
  template class CoSformer<S>;                                                                     \
  template FeaturePyramid<S> backbone_forward<S>(const Tensor<S>&, const BackboneWeights<S>&,      \
                                                 const ModelConfig&);                              \
  template Tensor<S> decoder_forward<S>(const Tensor<S>&, const FeaturePyramid<S>&,                \
                                        const DecoderWeights<S>&, const ModelConfig&);             \
  template Tensor<S> early_saliency_head<S>(const Tensor<S>&, const EarlyHeadWeights<S>&,          \
                                            const ModelConfig&);                                   \
  template Tensor<S> project<S>(const Tensor<S>&, const ProjectionWeights<S>&);

COSOD_INSTANTIATE(float)
COSOD_INSTANTIATE(double)

#undef COSOD_INSTANTIATE

}  // namespace cosod
