#pragma once

#include <array>
#include <string>

#include "cosod/tensor.hpp"

namespace cosod {

// Which realization backs each encoder slot. The convolutional forms are the
// ablation baselines: TSIR -> stacked 3x3 convs, TGL -> channel concat + 1x1
// conv, TGF -> stacked 3x3 convs over [S; consensus].
enum class TsirMode { kTransformer, kConv };
enum class TglMode { kTransformer, kConcatConv };
enum class TgfMode { kTransformer, kConv };

struct ModelConfig {
  int d = 64;
  // Channel widths of F3, F4, F5, F6.
  std::array<int, 4> stage_channels{16, 32, 64, 64};
  int heads = 4;
  int layers_tsir = 4;
  int layers_tgl = 6;
  int layers_tgf = 6;
  int ffn_multiplier = 4;
  int input_h = 64;
  int input_w = 64;
  int proj_dim = 32;

  TsirMode tsir = TsirMode::kTransformer;
  TglMode tgl = TglMode::kTransformer;
  TgfMode tgf = TgfMode::kTransformer;
  // Debug switch: add positional encodings inside TGL, which makes the
  // group representation depend on image order.
  bool pe_in_tgl = false;
  // Only the concat-conv TGL baseline needs a fixed group size.
  int group_size = 4;
  // 1: F3..F6 at strides 4/8/16/32. 2: strides 2/4/8/16 (the stem skips its
  // pooling), which quadruples the token count at a given input size.
  int stride_divisor = 1;

  static constexpr int kDeepestStride = 32;

  int deepest_stride() const { return kDeepestStride / stride_divisor; }
  int f3_stride() const { return 4 / stride_divisor; }
  int token_h() const { return input_h / deepest_stride(); }
  int token_w() const { return input_w / deepest_stride(); }
  int tokens() const { return token_h() * token_w(); }

  void validate() const {
    if (d < 4 || d % 4 != 0) throw ConfigError("model.d must be a positive multiple of 4");
    if (heads < 1 || d % heads != 0) throw ConfigError("model.d must be divisible by model.heads");
    for (int c : stage_channels)
      if (c < 1) throw ConfigError("model.stage_channels must be positive");
    if (layers_tsir < 1 || layers_tgl < 1 || layers_tgf < 1)
      throw ConfigError("transformer layer counts must be >= 1");
    if (ffn_multiplier < 1) throw ConfigError("model.ffn_multiplier must be >= 1");
    if (input_h < kDeepestStride || input_w < kDeepestStride || input_h % kDeepestStride ||
        input_w % kDeepestStride)
      throw ConfigError("input size must be a positive multiple of " +
                        std::to_string(kDeepestStride));
    if (proj_dim < 1) throw ConfigError("model.proj_dim must be >= 1");
    if (stride_divisor != 1 && stride_divisor != 2) throw ConfigError("model.stride_divisor must be 1 or 2");
    if (group_size < 2) throw ConfigError("group size must be >= 2");
  }
};

}  // namespace cosod
