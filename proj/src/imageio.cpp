#include "cosod/imageio.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cosod {

std::uint8_t quantize_byte(double v) {
  if (!(v > 0)) return 0;
  const double q = std::floor(255.0 * v + 0.5);
  return q >= 255 ? 255 : static_cast<std::uint8_t>(q);
}

std::string encode_pnm(const ByteImage& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ShapeError("pnm: only 1 or 3 channels, got " + std::to_string(img.channels));
  if (img.data.size() != static_cast<std::size_t>(img.h) * img.w * img.channels)
    throw ShapeError("pnm: payload size does not match header");
  std::string out = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.w) + " " +
                    std::to_string(img.h) + "\n255\n";
  out.append(img.data.begin(), img.data.end());
  return out;
}

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  int number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (1 << 24)) throw ParseError("pnm: " + std::string(what) + " too large at byte " + std::to_string(start));
      ++pos_;
    }
    if (pos_ == start)
      throw ParseError("pnm: expected " + std::string(what) + " at byte " + std::to_string(start));
    return static_cast<int>(v);
  }

  // Exactly one whitespace byte separates maxval from the raster.
  void single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_])))
      throw ParseError("pnm: expected whitespace after maxval at byte " + std::to_string(pos_));
    ++pos_;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

ByteImage decode_pnm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw ParseError("pnm: bad magic at byte 0");
  ByteImage img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  HeaderReader r(bytes.substr(2));
  img.w = r.number("width");
  img.h = r.number("height");
  const std::size_t maxval_at = r.pos() + 2;
  const int maxval = r.number("maxval");
  if (maxval != 255) throw ParseError("pnm: maxval must be 255 at byte " + std::to_string(maxval_at));
  if (img.w <= 0 || img.h <= 0) throw ParseError("pnm: empty raster at byte 2");
  r.single_space();
  const std::size_t offset = r.pos() + 2;
  const std::size_t need = static_cast<std::size_t>(img.h) * img.w * img.channels;
  if (bytes.size() - offset < need)
    throw ParseError("pnm: truncated payload at byte " + std::to_string(bytes.size()) + ", expected " +
                     std::to_string(offset + need) + " bytes");
  if (bytes.size() - offset > need)
    throw ParseError("pnm: trailing data at byte " + std::to_string(offset + need));
  img.data.assign(bytes.begin() + offset, bytes.begin() + offset + need);
  return img;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_pnm(const std::filesystem::path& path, const ByteImage& img) {
  write_file(path, encode_pnm(img));
}

ByteImage read_pnm(const std::filesystem::path& path) {
  try {
    return decode_pnm(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

template <typename Scalar>
Tensor<Scalar> image_tensor(const ByteImage& rgb) {
  if (rgb.channels != 3) throw ShapeError("image_tensor: expected 3 channels");
  std::vector<Scalar> data(rgb.data.size());
  const std::size_t plane = static_cast<std::size_t>(rgb.h) * rgb.w;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) data[c * plane + p] = static_cast<Scalar>(rgb.data[p * 3 + c]) / Scalar(255);
  return Tensor<Scalar>::from_data({3, rgb.h, rgb.w}, std::move(data));
}

template <typename Scalar>
Tensor<Scalar> gray_tensor(const ByteImage& gray) {
  if (gray.channels != 1) throw ShapeError("gray_tensor: expected 1 channel");
  std::vector<Scalar> data(gray.data.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<Scalar>(gray.data[i]) / Scalar(255);
  return Tensor<Scalar>::from_data({gray.h, gray.w}, std::move(data));
}

template <typename Scalar>
Tensor<Scalar> mask_from_gray(const ByteImage& gray) {
  if (gray.channels != 1) throw ShapeError("mask_from_gray: expected 1 channel");
  std::vector<Scalar> data(gray.data.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = gray.data[i] >= 128 ? Scalar(1) : Scalar(0);
  return Tensor<Scalar>::from_data({gray.h, gray.w}, std::move(data));
}

template <typename Scalar>
ByteImage quantize_map(const Tensor<Scalar>& map) {
  if (map.rank() != 2) throw ShapeError("quantize_map: expected [H, W], got " + shape_str(map.shape()));
  ByteImage img = ByteImage::blank(map.dim(0), map.dim(1), 1);
  const auto v = map.data();
  for (std::size_t i = 0; i < v.size(); ++i) img.data[i] = quantize_byte(static_cast<double>(v[i]));
  return img;
}

#define COSOD_INSTANTIATE(S)                                 \
  template Tensor<S> image_tensor<S>(const ByteImage&);      \
  template Tensor<S> gray_tensor<S>(const ByteImage&);       \
  template Tensor<S> mask_from_gray<S>(const ByteImage&);    \
  template ByteImage quantize_map<S>(const Tensor<S>&);

COSOD_INSTANTIATE(float)
COSOD_INSTANTIATE(double)

#undef COSOD_INSTANTIATE

}  // namespace cosod
