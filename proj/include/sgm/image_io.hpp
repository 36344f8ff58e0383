#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sgm/tensor.hpp"

namespace sgm {

// 8-bit interleaved RGB raster.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}
  std::uint8_t* at(std::size_t x, std::size_t y) { return rgb.data() + (y * width + x) * 3; }
  const std::uint8_t* at(std::size_t x, std::size_t y) const { return rgb.data() + (y * width + x) * 3; }
  bool operator==(const RgbImage&) const = default;
};

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
  bool operator==(const GrayImage&) const = default;
};

// Binary PPM (P6) and PGM (P5), maxval 255.
std::vector<std::uint8_t> encode_ppm(const RgbImage& image);
RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");
std::vector<std::uint8_t> encode_pgm(const GrayImage& image);
GrayImage decode_pgm(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");

void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);

// 3 x H x W tensor with channel values byte / 255.
Tensor image_to_tensor(const RgbImage& image);

}  // namespace sgm
