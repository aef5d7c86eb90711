#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dadet/tensor.hpp"

namespace dadet {

// 8-bit RGB image, row-major, 3 bytes per pixel.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // height*width*3
};

// IoError on any file or decode problem.
ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& img);

// [0,1] float planes <-> bytes with round-to-nearest. Quantization is the
// only lossy step in the dataset pipeline.
ImageU8 tensor_to_u8(const Tensor& img);
Tensor u8_to_tensor(const ImageU8& img);

}  // namespace dadet
