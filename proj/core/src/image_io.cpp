#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "arcd/data.hpp"
#include "arcd/error.hpp"
#include "arcd/tensor_io.hpp"

namespace arcd {

namespace {

struct PnmHeader {
  int width = 0, height = 0;
  std::size_t raster = 0;  // byte offset of the first pixel
};

class HeaderReader {
 public:
  explicit HeaderReader(const std::string& bytes) : b_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = start_ = pos_;
    long v = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > 1'000'000) throw ParseError(std::string("header ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ParseError(std::string("expected ") + what + " in header", start);
    return v;
  }

  std::size_t pos() const { return pos_; }
  std::size_t last_start() const { return start_; }  // offset of the most recent number
  void advance() { ++pos_; }
  bool at_space() const { return pos_ < b_.size() && std::isspace(static_cast<unsigned char>(b_[pos_])); }

 private:
  const std::string& b_;
  std::size_t pos_ = 2;
  std::size_t start_ = 2;
};

PnmHeader parse_header(const std::string& bytes, char kind, int channels) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != kind)
    throw ParseError(std::string("bad magic, expected P") + kind, 0);
  HeaderReader r(bytes);
  PnmHeader h;
  h.width = static_cast<int>(r.number("width"));
  if (h.width == 0) throw ParseError("zero width", r.last_start());
  h.height = static_cast<int>(r.number("height"));
  if (h.height == 0) throw ParseError("zero height", r.last_start());
  const long maxval = r.number("maxval");
  if (maxval != 255) throw ParseError("maxval must be 255, got " + std::to_string(maxval), r.last_start());
  if (!r.at_space()) throw ParseError("expected whitespace after maxval", r.pos());
  r.advance();
  h.raster = r.pos();
  const std::size_t need = static_cast<std::size_t>(h.width) * h.height * channels;
  if (bytes.size() - h.raster < need) throw ParseError("truncated raster", bytes.size());
  return h;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint8_t quantize(float v) {
  const float c = std::min(1.f, std::max(0.f, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.f));
}

}  // namespace

Image decode_ppm(const std::string& bytes) {
  const auto h = parse_header(bytes, '6', 3);
  Image img(3, h.height, h.width);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + h.raster;
  for (int y = 0; y < h.height; ++y)
    for (int x = 0; x < h.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(*p++) / 255.f;
  return img;
}

Mask decode_pgm(const std::string& bytes) {
  const auto h = parse_header(bytes, '5', 1);
  Mask m(h.height, h.width);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + h.raster;
  for (auto& v : m.data) v = *p++ >= 128 ? 1 : 0;
  return m;
}

std::string encode_ppm(const Image& image) {
  if (image.channels != 3) throw DimensionError("encode_ppm: expected 3 channels, got " + std::to_string(image.channels));
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.data.size());
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(quantize(image.at(c, y, x))));
  return out;
}

std::string encode_pgm(int height, int width, const std::vector<std::uint8_t>& values) {
  if (values.size() != static_cast<std::size_t>(height) * width) throw DimensionError("encode_pgm: size mismatch");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(values.begin(), values.end());
  return out;
}

Image read_image(const std::filesystem::path& path) { return decode_ppm(slurp(path)); }
Mask read_mask(const std::filesystem::path& path) { return decode_pgm(slurp(path)); }

void write_image(const std::filesystem::path& path, const Image& image) { write_file_atomic(path, encode_ppm(image)); }

void write_mask(const std::filesystem::path& path, const Mask& mask) {
  std::vector<std::uint8_t> v(mask.data.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask.data[i] ? 255 : 0;
  write_file_atomic(path, encode_pgm(mask.height, mask.width, v));
}

void write_gray(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& values) {
  write_file_atomic(path, encode_pgm(height, width, values));
}

}  // namespace arcd
