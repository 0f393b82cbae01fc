#include "cosod/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cosod {

namespace {

constexpr std::string_view kMagic = "COSF1\n";

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw ParseError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                       std::to_string(pos_));
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out(kMagic);
  put_le<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw UsageError("checkpoint: tensor name too long: " + name);
    if (t.rank() > 0xFF) throw UsageError("checkpoint: rank too large for " + name);
    put_le<std::uint16_t>(out, name.size());
    out += name;
    put_le<std::uint8_t>(out, t.rank());
    for (int d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(kMagic.size(), "magic") != kMagic) throw ParseError("checkpoint: bad magic at byte 0");
  const auto count = r.get_le<std::uint64_t>("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = r.get_le<std::uint16_t>("name length");
    std::string name(r.take(len, "name"));
    const auto rank = r.get_le<std::uint8_t>("rank");
    if (rank == 0) throw ParseError("checkpoint: zero rank for " + name + " at byte " + std::to_string(r.pos()));
    Shape shape;
    for (int i = 0; i < rank; ++i) {
      const auto d = r.get_le<std::uint32_t>("dimension");
      if (d == 0 || d > 0x7FFFFFFF)
        throw ParseError("checkpoint: invalid dimension for " + name + " at byte " +
                         std::to_string(r.pos() - 4));
      shape.push_back(static_cast<int>(d));
    }
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) v = std::bit_cast<float>(r.get_le<std::uint32_t>("tensor data"));
    out.push_back({std::move(name), Tensor<float>::from_data(shape, std::move(data))});
  }
  if (!r.done())
    throw ParseError("checkpoint: trailing bytes at byte " + std::to_string(r.pos()));
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  const std::string bytes = encode_checkpoint(tensors);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace cosod
