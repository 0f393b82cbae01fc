#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cosod/imageio.hpp"
#include "cosod/losses.hpp"

namespace cosod {

struct SynthSpec {
  std::uint64_t seed = 0;
  int n_groups = 100;
  int n_val_groups = 20;
  int n_aux = 100;
  int group_size = 4;
  int image_h = 64;
  int image_w = 64;
  int n_shape_classes = 10;
  int distractors_min = 0;
  int distractors_max = 3;
  // Amplitude of per-pixel background noise as a fraction of full scale.
  double noise_level = 0.1;

  void validate() const;
};

// The held-out split: same generator, seed derived from the training seed.
SynthSpec validation_spec(const SynthSpec& spec);

// A class fixes the outline family and base color; instances jitter the rest.
struct ShapeClass {
  int vertices = 0;           // 3..6 for polygons, 0 for an ellipse
  int eccentricity_pct = 100;  // minor / major axis of an ellipse, in percent
  std::array<std::uint8_t, 3> color{};
};

constexpr int kMaxShapeClasses = 40;
ShapeClass shape_class(int index);

// Rotation is in steps of 3 degrees.
struct ShapeInstance {
  int cls = 0;
  int cx = 0, cy = 0;
  int radius = 0;
  int rotation = 0;
  std::array<std::uint8_t, 3> color{};
};

// Pixel-center inside test in 16.16 fixed point.
BinaryMask rasterize(const ShapeInstance& shape, int h, int w);

struct SynthImage {
  ByteImage image;  // RGB
  ByteImage mask;   // 0 / 255
  // shapes[0] is the salient (or common) object; the rest are distractors.
  std::vector<ShapeInstance> shapes;
};

struct SynthGroup {
  int index = 0;
  int common_class = 0;
  std::vector<SynthImage> images;
};

SynthGroup synth_group(const SynthSpec& spec, int group_index);
SynthImage synth_aux(const SynthSpec& spec, int index);

std::string group_dir_name(int index);
std::string item_stem(int index);

struct SynthSummary {
  int groups = 0;
  int images = 0;
  int aux = 0;
};

// root/group_<id>/{img,gt} and, when n_aux > 0, root/aux/{img,gt}.
SynthSummary write_dataset(const SynthSpec& spec, const std::filesystem::path& root,
                           bool with_aux = true);

}  // namespace cosod
