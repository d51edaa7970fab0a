#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cloak/tensor.hpp"

namespace cloak {

struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // interleaved, row-major
};

void write_png_rgb8(const std::string& path, const ImageU8& img);
ImageU8 read_png_rgb8(const std::string& path);

/// Decodes a PNG into a normalized (1, 3, h, w) batch.
Tensor png_to_batch(const std::string& path);

/// Writes the first image of a normalized batch as PNG.
void batch_to_png(const Tensor& batch, int index, const std::string& path);

}  // namespace cloak
