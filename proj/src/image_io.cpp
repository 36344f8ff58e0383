#include "sgm/image_io.hpp"

#include <cctype>
#include <string_view>

#include "sgm/errors.hpp"
#include "sgm/io.hpp"

namespace sgm {

namespace {

std::vector<std::uint8_t> header(std::string_view magic, std::size_t w, std::size_t h) {
  const std::string text = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  return {text.begin(), text.end()};
}

// Parses "Px W H MAXVAL" followed by one whitespace byte; '#' comments allowed
// between tokens. Returns the payload offset.
std::size_t parse_header(const std::vector<std::uint8_t>& bytes, std::string_view magic, const std::string& source,
                         std::size_t& width, std::size_t& height) {
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1])
    throw DataError(source + ": not a " + std::string(magic) + " image");
  std::size_t pos = 2;
  auto next_number = [&](const char* what) -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos]))
      throw DataError(source + ": malformed header (" + what + ")");
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (value > (1u << 20)) throw DataError(source + ": header value too large (" + what + ")");
      ++pos;
    }
    return value;
  };
  width = next_number("width");
  height = next_number("height");
  const std::size_t maxval = next_number("maxval");
  if (maxval != 255) throw DataError(source + ": only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DataError(source + ": malformed header end");
  return pos + 1;
}

}  // namespace

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
  if (image.rgb.size() != image.width * image.height * 3) throw ArgumentError("encode_ppm: pixel buffer size mismatch");
  auto out = header("P6", image.width, image.height);
  out.insert(out.end(), image.rgb.begin(), image.rgb.end());
  return out;
}

RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  std::size_t w = 0, h = 0;
  const std::size_t off = parse_header(bytes, "P6", source, w, h);
  const std::size_t need = w * h * 3;
  if (bytes.size() - off != need)
    throw DataError(source + ": expected " + std::to_string(need) + " pixel bytes, found " +
                    std::to_string(bytes.size() - off));
  RgbImage img(w, h);
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end(), img.rgb.begin());
  return img;
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) throw ArgumentError("encode_pgm: pixel buffer size mismatch");
  auto out = header("P5", image.width, image.height);
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

GrayImage decode_pgm(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  GrayImage img;
  const std::size_t off = parse_header(bytes, "P5", source, img.width, img.height);
  const std::size_t need = img.width * img.height;
  if (bytes.size() - off != need)
    throw DataError(source + ": expected " + std::to_string(need) + " pixel bytes, found " +
                    std::to_string(bytes.size() - off));
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
  return img;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) { write_file_atomic(path, encode_ppm(image)); }

RgbImage read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path), path.string()); }

void write_pgm(const std::filesystem::path& path, const GrayImage& image) { write_file_atomic(path, encode_pgm(image)); }

GrayImage read_pgm(const std::filesystem::path& path) { return decode_pgm(read_file(path), path.string()); }

Tensor image_to_tensor(const RgbImage& image) {
  Tensor t({3, image.height, image.width});
  const std::size_t plane = image.width * image.height;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) t[c * plane + i] = static_cast<float>(image.rgb[i * 3 + c]) / 255.0f;
  return t;
}

}  // namespace sgm
