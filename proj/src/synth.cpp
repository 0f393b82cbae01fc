#include "cosod/synth.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "cosod/rng.hpp"

namespace cosod {

namespace {

// round(cos(3 deg * i) * 65536).
constexpr std::array<std::int64_t, 120> kCosQ16{
    65536,  65446,  65177,  64729,  64104,  63303,  62328,  61183,  59870,  58393,  56756,  54963,
    53020,  50931,  48703,  46341,  43852,  41243,  38521,  35693,  32768,  29753,  26656,  23486,
    20252,  16962,  13626,  10252,  6850,   3430,   0,      -3430,  -6850,  -10252, -13626, -16962,
    -20252, -23486, -26656, -29753, -32768, -35693, -38521, -41243, -43852, -46341, -48703, -50931,
    -53020, -54963, -56756, -58393, -59870, -61183, -62328, -63303, -64104, -64729, -65177, -65446,
    -65536, -65446, -65177, -64729, -64104, -63303, -62328, -61183, -59870, -58393, -56756, -54963,
    -53020, -50931, -48703, -46341, -43852, -41243, -38521, -35693, -32768, -29753, -26656, -23486,
    -20252, -16962, -13626, -10252, -6850,  -3430,  0,      3430,   6850,   10252,  13626,  16962,
    20252,  23486,  26656,  29753,  32768,  35693,  38521,  41243,  43852,  46341,  48703,  50931,
    53020,  54963,  56756,  58393,  59870,  61183,  62328,  63303,  64104,  64729,  65177,  65446,
};

constexpr int kSteps = 120;
constexpr int kEllipseVertices = 40;

std::int64_t cos_q16(int step) { return kCosQ16[((step % kSteps) + kSteps) % kSteps]; }
std::int64_t sin_q16(int step) { return cos_q16(step - kSteps / 4); }

constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette{{
    {220, 40, 40},
    {40, 190, 60},
    {50, 80, 230},
    {235, 215, 40},
    {210, 50, 200},
    {40, 200, 210},
    {245, 140, 30},
    {130, 60, 190},
}};

struct Point {
  std::int64_t x, y;
};

std::vector<Point> outline(const ShapeInstance& s) {
  const ShapeClass cls = shape_class(s.cls);
  const std::int64_t cx = (static_cast<std::int64_t>(s.cx) << 16) + (1 << 15);
  const std::int64_t cy = (static_cast<std::int64_t>(s.cy) << 16) + (1 << 15);
  std::vector<Point> pts;
  if (cls.vertices > 0) {
    const int step = kSteps / cls.vertices;
    for (int i = 0; i < cls.vertices; ++i) {
      const int a = s.rotation + i * step;
      pts.push_back({cx + s.radius * cos_q16(a), cy + s.radius * sin_q16(a)});
    }
  } else {
    const std::int64_t major = static_cast<std::int64_t>(s.radius) << 16;
    const std::int64_t minor = major * cls.eccentricity_pct / 100;
    const int step = kSteps / kEllipseVertices;
    for (int i = 0; i < kEllipseVertices; ++i) {
      const std::int64_t ex = (major * cos_q16(i * step)) >> 16;
      const std::int64_t ey = (minor * sin_q16(i * step)) >> 16;
      const std::int64_t rx = (ex * cos_q16(s.rotation) - ey * sin_q16(s.rotation)) >> 16;
      const std::int64_t ry = (ex * sin_q16(s.rotation) + ey * cos_q16(s.rotation)) >> 16;
      pts.push_back({cx + rx, cy + ry});
    }
  }
  return pts;
}

bool disjoint(const BinaryMask& a, const BinaryMask& b, int margin) {
  for (int y = 0; y < a.h; ++y)
    for (int x = 0; x < a.w; ++x) {
      if (!a.bits[y * a.w + x]) continue;
      for (int dy = -margin; dy <= margin; ++dy)
        for (int dx = -margin; dx <= margin; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < b.h && xx >= 0 && xx < b.w && b.bits[yy * b.w + xx]) return false;
        }
    }
  return true;
}

std::uint8_t clamp_byte(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

int scaled(int v, const SynthSpec& spec) { return std::max(2, v * std::min(spec.image_h, spec.image_w) / 64); }

// Low-saturation base color, 8x8 block texture, per-pixel noise.
ByteImage background(const SynthSpec& spec, Rng& rng) {
  ByteImage img = ByteImage::blank(spec.image_h, spec.image_w, 3);
  const int gray = rng.uniform_int(60, 180);
  std::array<int, 3> base;
  for (auto& b : base) b = gray + rng.uniform_int(-20, 20);
  const int bh = (spec.image_h + 7) / 8, bw = (spec.image_w + 7) / 8;
  std::vector<int> blocks(static_cast<std::size_t>(bh) * bw);
  for (auto& b : blocks) b = rng.uniform_int(-24, 24);
  const int amp = static_cast<int>(spec.noise_level * 255.0 + 0.5);
  for (int y = 0; y < spec.image_h; ++y)
    for (int x = 0; x < spec.image_w; ++x) {
      const int t = blocks[(y / 8) * bw + x / 8];
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = clamp_byte(base[c] + t + (amp ? rng.uniform_int(-amp, amp) : 0));
    }
  return img;
}

void paint(ByteImage& img, const BinaryMask& raster, const ShapeInstance& s, const SynthSpec& spec,
           Rng& rng) {
  const int amp = static_cast<int>(spec.noise_level * 127.5 + 0.5);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      if (!raster.bits[y * img.w + x]) continue;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = clamp_byte(s.color[c] + (amp ? rng.uniform_int(-amp, amp) : 0));
    }
}

ShapeInstance place(int cls, int r_lo, int r_hi, const SynthSpec& spec, Rng& rng) {
  ShapeInstance s;
  s.cls = cls;
  s.radius = rng.uniform_int(r_lo, r_hi);
  s.cx = rng.uniform_int(s.radius + 1, spec.image_w - s.radius - 2);
  s.cy = rng.uniform_int(s.radius + 1, spec.image_h - s.radius - 2);
  s.rotation = rng.uniform_int(0, kSteps - 1);
  const auto base = shape_class(cls).color;
  for (int c = 0; c < 3; ++c) s.color[c] = clamp_byte(base[c] + rng.uniform_int(-16, 16));
  return s;
}

ByteImage mask_bytes(const BinaryMask& m) {
  ByteImage img = ByteImage::blank(m.h, m.w, 1);
  for (std::size_t i = 0; i < m.bits.size(); ++i) img.data[i] = m.bits[i] ? 255 : 0;
  return img;
}

SynthImage render(const SynthSpec& spec, int common_class, const std::vector<int>& distractor_classes,
                  Rng& rng) {
  SynthImage out;
  out.image = background(spec, rng);
  const ShapeInstance main = place(common_class, scaled(10, spec), scaled(17, spec), spec, rng);
  const BinaryMask main_raster = rasterize(main, spec.image_h, spec.image_w);
  paint(out.image, main_raster, main, spec, rng);
  out.shapes.push_back(main);
  for (int cls : distractor_classes) {
    for (int attempt = 0; attempt < 30; ++attempt) {
      const ShapeInstance d = place(cls, scaled(6, spec), scaled(12, spec), spec, rng);
      const BinaryMask r = rasterize(d, spec.image_h, spec.image_w);
      if (!disjoint(r, main_raster, 1)) continue;
      paint(out.image, r, d, spec, rng);
      out.shapes.push_back(d);
      break;
    }
  }
  out.mask = mask_bytes(main_raster);
  return out;
}

}  // namespace

void SynthSpec::validate() const {
  if (group_size < 2) throw ConfigError("synth.group_size must be >= 2");
  if (n_groups < 0 || n_val_groups < 0 || n_aux < 0) throw ConfigError("synth counts must be >= 0");
  if (image_h < 32 || image_w < 32 || image_h % 32 || image_w % 32)
    throw ConfigError("synth image size must be a positive multiple of 32");
  if (n_shape_classes < 2 || n_shape_classes > kMaxShapeClasses)
    throw ConfigError("synth.n_shape_classes must lie in [2, " + std::to_string(kMaxShapeClasses) + "]");
  if (distractors_min < 0 || distractors_max > 3 || distractors_min > distractors_max)
    throw ConfigError("synth distractor range must lie within [0, 3]");
  if (!(noise_level >= 0 && noise_level <= 0.5)) throw ConfigError("synth.noise_level must lie in [0, 0.5]");
}

SynthSpec validation_spec(const SynthSpec& spec) {
  SynthSpec v = spec;
  v.seed = Rng::combine(spec.seed, Rng::hash("validation"));
  v.n_groups = spec.n_val_groups;
  v.n_val_groups = 0;
  v.n_aux = 0;
  return v;
}

ShapeClass shape_class(int index) {
  if (index < 0 || index >= kMaxShapeClasses) throw ConfigError("shape class out of range");
  ShapeClass c;
  const int family = index % 5;
  c.vertices = family < 4 ? family + 3 : 0;
  c.eccentricity_pct = family < 4 ? 100 : 55;
  c.color = kPalette[index % kPalette.size()];
  return c;
}

BinaryMask rasterize(const ShapeInstance& shape, int h, int w) {
  const auto pts = outline(shape);
  BinaryMask m = BinaryMask::zeros(h, w);
  std::int64_t area2 = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& a = pts[i];
    const auto& b = pts[(i + 1) % pts.size()];
    area2 += a.x * b.y - b.x * a.y;
  }
  const int orient = area2 >= 0 ? 1 : -1;
  const int y0 = std::max(0, shape.cy - shape.radius - 1), y1 = std::min(h - 1, shape.cy + shape.radius + 1);
  const int x0 = std::max(0, shape.cx - shape.radius - 1), x1 = std::min(w - 1, shape.cx + shape.radius + 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const std::int64_t px = (static_cast<std::int64_t>(x) << 16) + (1 << 15);
      const std::int64_t py = (static_cast<std::int64_t>(y) << 16) + (1 << 15);
      bool inside = true;
      for (std::size_t i = 0; i < pts.size() && inside; ++i) {
        const auto& a = pts[i];
        const auto& b = pts[(i + 1) % pts.size()];
        const std::int64_t cross = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
        inside = cross * orient >= 0;
      }
      m.bits[y * w + x] = inside;
    }
  return m;
}

SynthGroup synth_group(const SynthSpec& spec, int group_index) {
  spec.validate();
  if (group_index < 0 || group_index >= spec.n_groups)
    throw UsageError("group index " + std::to_string(group_index) + " outside [0, " +
                     std::to_string(spec.n_groups) + ")");
  Rng rng(Rng::combine(Rng::combine(spec.seed, Rng::hash("group")), static_cast<std::uint64_t>(group_index)));
  SynthGroup g;
  g.index = group_index;
  g.common_class = rng.uniform_int(0, spec.n_shape_classes - 1);
  // Classes seen in every image so far; the last image may not use them.
  std::set<int> in_all;
  for (int i = 0; i < spec.group_size; ++i) {
    std::vector<int> pool;
    for (int c = 0; c < spec.n_shape_classes; ++c)
      if (c != g.common_class && !(i == spec.group_size - 1 && in_all.count(c))) pool.push_back(c);
    rng.shuffle(pool);
    const int n = std::min<int>(rng.uniform_int(spec.distractors_min, spec.distractors_max), pool.size());
    std::vector<int> chosen(pool.begin(), pool.begin() + n);
    g.images.push_back(render(spec, g.common_class, chosen, rng));
    std::set<int> drawn;
    for (std::size_t s = 1; s < g.images.back().shapes.size(); ++s) drawn.insert(g.images.back().shapes[s].cls);
    if (i == 0) {
      in_all = drawn;
    } else {
      std::set<int> keep;
      for (int c : in_all)
        if (drawn.count(c)) keep.insert(c);
      in_all = keep;
    }
  }
  return g;
}

SynthImage synth_aux(const SynthSpec& spec, int index) {
  spec.validate();
  if (index < 0 || index >= spec.n_aux)
    throw UsageError("aux index " + std::to_string(index) + " outside [0, " + std::to_string(spec.n_aux) + ")");
  Rng rng(Rng::combine(Rng::combine(spec.seed, Rng::hash("aux")), static_cast<std::uint64_t>(index)));
  const int cls = rng.uniform_int(0, spec.n_shape_classes - 1);
  return render(spec, cls, {}, rng);
}

std::string group_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "group_%04d", index);
  return buf;
}

std::string item_stem(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%02d", index);
  return buf;
}

namespace {

void write_item(const std::filesystem::path& dir, const std::string& stem, const SynthImage& item) {
  std::filesystem::create_directories(dir / "img");
  std::filesystem::create_directories(dir / "gt");
  write_pnm(dir / "img" / (stem + ".ppm"), item.image);
  write_pnm(dir / "gt" / (stem + ".pgm"), item.mask);
}

}  // namespace

SynthSummary write_dataset(const SynthSpec& spec, const std::filesystem::path& root, bool with_aux) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  SynthSummary summary;
  try {
    for (int g = 0; g < spec.n_groups; ++g) {
      const SynthGroup group = synth_group(spec, g);
      for (std::size_t i = 0; i < group.images.size(); ++i)
        write_item(root / group_dir_name(g), item_stem(static_cast<int>(i)), group.images[i]);
      ++summary.groups;
      summary.images += static_cast<int>(group.images.size());
    }
    if (with_aux)
      for (int k = 0; k < spec.n_aux; ++k) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "aux_%04d", k);
        write_item(root / "aux", stem, synth_aux(spec, k));
        ++summary.aux;
      }
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(e.what());
  }
  return summary;
}

}  // namespace cosod
