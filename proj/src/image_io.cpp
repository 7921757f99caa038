#include "dcn2/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace dcn2 {

namespace {

// Header tokenizer for the netpbm formats: whitespace separated, '#' starts
// a comment that runs to the end of the line.
class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t number(const char* what) {
    skip_space();
    if (pos_ >= bytes_.size()) throw FormatError(std::string("missing ") + what, pos_);
    if (!std::isdigit(bytes_[pos_])) throw FormatError(std::string("expected ") + what, pos_);
    std::uint64_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (1u << 30)) throw FormatError(std::string(what) + " is too large", pos_);
      ++pos_;
    }
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) throw FormatError("missing raster separator", pos_);
    return pos_ + 1;
  }

 private:
  void skip_space() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 2;
};

std::uint8_t to_byte(float v) {
  const float c = std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

Tensor decode_pnm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("not a binary PGM/PPM file", 0);
  }
  const std::int64_t channels = bytes[1] == '5' ? 1 : 3;
  HeaderReader header(bytes);
  const auto width = static_cast<std::int64_t>(header.number("width"));
  const auto height = static_cast<std::int64_t>(header.number("height"));
  const auto maxval = header.number("maxval");
  if (maxval < 1 || maxval > 65535) throw FormatError("maxval must be in [1, 65535]", 0);
  const std::size_t start = header.raster_start();
  const std::size_t sample_bytes = maxval > 255 ? 2 : 1;
  const std::size_t need = static_cast<std::size_t>(width * height * channels) * sample_bytes;
  if (bytes.size() - start < need) throw FormatError("truncated raster", bytes.size());

  Tensor t(Dims{1, channels, height, width});
  const double scale = 1.0 / static_cast<double>(maxval);
  std::size_t at = start;
  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      for (std::int64_t c = 0; c < channels; ++c) {
        std::uint32_t v = bytes[at++];
        if (sample_bytes == 2) v = (v << 8) | bytes[at++];
        t(0, c, y, x) = static_cast<float>(std::min<double>(v * scale, 1.0));
      }
    }
  }
  return t;
}

Tensor load_image(const std::string& path) { return decode_pnm(read_file(path)); }

std::vector<std::uint8_t> encode_pnm(const Tensor& image) {
  const Dims d = image.dims();
  if (d.n != 1 || (d.c != 1 && d.c != 3)) throw ShapeError("image must be (1, 1|3, H, W), got " + d.str());
  const std::string header =
      std::string(d.c == 1 ? "P5" : "P6") + "\n" + std::to_string(d.w) + " " + std::to_string(d.h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + static_cast<std::size_t>(image.size()));
  for (std::int64_t y = 0; y < d.h; ++y) {
    for (std::int64_t x = 0; x < d.w; ++x) {
      for (std::int64_t c = 0; c < d.c; ++c) out.push_back(to_byte(image(0, c, y, x)));
    }
  }
  return out;
}

void save_image(const std::string& path, const Tensor& image) { write_file(path, encode_pnm(image)); }

std::vector<std::uint8_t> encode_mask_pgm(std::span<const std::uint8_t> mask, std::int64_t height,
                                          std::int64_t width) {
  if (static_cast<std::int64_t>(mask.size()) != height * width) throw ShapeError("mask size does not match extents");
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (std::uint8_t m : mask) out.push_back(m ? 255 : 0);
  return out;
}

void save_mask_pgm(const std::string& path, std::span<const std::uint8_t> mask, std::int64_t height,
                   std::int64_t width) {
  write_file(path, encode_mask_pgm(mask, height, width));
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace dcn2
