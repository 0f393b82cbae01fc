#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cosod/model.hpp"
#include "cosod/tensor.hpp"

namespace cosod {

struct LossConfig {
  int ssim_window = 11;
  double ssim_c1 = 0.01 * 0.01;
  double ssim_c2 = 0.03 * 0.03;
  double beta_sq = 0.3;
  double epsilon = 1e-7;
  double tau = 0.1;
  double binarize_threshold = 0.5;
  // Literal InfoNCE denominators without the positive term; may go negative.
  bool paper_exact_denominator = false;

  void validate() const;
};

// Which terms of the total objective are active.
struct LossFlags {
  bool cosal = true;        // l_c on M
  bool aux = true;          // l_s on H
  bool early = true;        // l_ct on M_S
  bool contrastive = true;  // l_single + l_group

  bool any() const { return cosal || aux || early || contrastive; }
};

struct BinaryMask {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> bits;

  static BinaryMask zeros(int h, int w) { return {h, w, std::vector<std::uint8_t>(h * w, 0)}; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  bool operator==(const BinaryMask&) const = default;
};

// Pixels >= threshold become 1.
template <typename Scalar>
BinaryMask binarize(const Tensor<Scalar>& map, double threshold);

template <typename Scalar>
Tensor<Scalar> mask_tensor(const BinaryMask& mask);

struct MaskTriple {
  BinaryMask agree;   // M_A = M_C & T
  BinaryMask missed;  // M_P = T - M_C
  BinaryMask noise;   // M_N = M_C - T
  BinaryMask diff;    // M_C
};

enum class MaskDifference { kXor, kOr };

// Binarizes M_S and M, takes their difference region M_C and splits it against
// the ground truth. The result carries no gradient. `op` exists only so the
// self-check can demonstrate that a wrong difference operator is caught.
template <typename Scalar>
MaskTriple build_mask_triple(const Tensor<Scalar>& m_s, const Tensor<Scalar>& m, const BinaryMask& t,
                             const LossConfig& cfg, MaskDifference op = MaskDifference::kXor);

MaskTriple build_mask_triple(const BinaryMask& m_s, const BinaryMask& m, const BinaryMask& t,
                             MaskDifference op = MaskDifference::kXor);

// Per-pixel BCE averaged per map, then over maps. Predictions are clamped to
// [eps, 1 - eps] first.
template <typename Scalar>
Tensor<Scalar> bce_loss(const std::vector<Tensor<Scalar>>& m, const std::vector<Tensor<Scalar>>& t,
                        const LossConfig& cfg);

// Mean over maps of 1 - mean windowed structural similarity (valid, stride 1).
template <typename Scalar>
Tensor<Scalar> ssim_loss(const std::vector<Tensor<Scalar>>& m, const std::vector<Tensor<Scalar>>& t,
                         const LossConfig& cfg);

// Mean over maps of 1 - soft F-beta.
template <typename Scalar>
Tensor<Scalar> fmeasure_loss(const std::vector<Tensor<Scalar>>& m,
                             const std::vector<Tensor<Scalar>>& t, const LossConfig& cfg);

template <typename Scalar>
struct CompositeLosses {
  Tensor<Scalar> l_c;   // BCE + SSIM + F on M
  Tensor<Scalar> l_s;   // BCE + F on H (zero when K = 0)
  Tensor<Scalar> l_ct;  // BCE + F on M_S
};

template <typename Scalar>
CompositeLosses<Scalar> composite_losses(const std::vector<Tensor<Scalar>>& m,
                                         const std::vector<Tensor<Scalar>>& m_s,
                                         const std::vector<Tensor<Scalar>>& h,
                                         const std::vector<Tensor<Scalar>>& t,
                                         const std::vector<Tensor<Scalar>>& t_s,
                                         const LossConfig& cfg);

// Area-averages the mask onto the token grid, re-binarizes at 0.5 and averages
// the selected tokens: [1, d]. Empty selections yield nullopt.
template <typename Scalar>
std::optional<Tensor<Scalar>> masked_embed(const Tensor<Scalar>& tokens, const BinaryMask& mask,
                                           int grid_h, int grid_w);

// Sum over images with all three embeddings of -log(e^{a.p/tau} / den).
template <typename Scalar>
Tensor<Scalar> contrastive_single(const std::vector<std::optional<Tensor<Scalar>>>& z_a,
                                  const std::vector<std::optional<Tensor<Scalar>>>& z_p,
                                  const std::vector<std::optional<Tensor<Scalar>>>& z_n,
                                  const LossConfig& cfg);

// Sum over ordered pairs (i, j), i != j, of GT-masked embeddings, contrasted
// against every present noise embedding in the group.
template <typename Scalar>
Tensor<Scalar> contrastive_group(const std::vector<std::optional<Tensor<Scalar>>>& z_t,
                                 const std::vector<std::optional<Tensor<Scalar>>>& z_n,
                                 const LossConfig& cfg);

struct LossReport {
  double l_c = 0, l_s = 0, l_ct = 0, l_single = 0, l_group = 0, l_cont = 0, total = 0;
  LossFlags flags;
  // Whether any contrastive pair was formed this step.
  bool contrastive_active = false;
};

template <typename Scalar>
struct LossTerms {
  Tensor<Scalar> l_c, l_s, l_ct, l_single, l_group;
  bool contrastive_active = false;
};

// L_cont = L_single + L_group; L = L_s + L_c + L_ct + L_cont over enabled terms.
LossReport total_loss(const LossReport& parts, const LossFlags& flags);

template <typename Scalar>
struct Objective {
  Tensor<Scalar> total;
  LossReport report;
};

template <typename Scalar>
Objective<Scalar> total_loss(const LossTerms<Scalar>& terms, const LossFlags& flags);

// Every term of the training objective for one group plus its aux batch.
template <typename Scalar>
LossTerms<Scalar> group_loss_terms(const SaliencyMaps<Scalar>& out,
                                   const std::vector<Tensor<Scalar>>& gt,
                                   const std::vector<Tensor<Scalar>>& aux_gt,
                                   const CoSformer<Scalar>& model, const LossConfig& cfg,
                                   const LossFlags& flags);

}  // namespace cosod
