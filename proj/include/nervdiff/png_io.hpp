#pragma once

#include "nervdiff/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace nervdiff {

struct ImageU8 {
    Index height = 0;
    Index width = 0;
    std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel
};

ImageU8 read_png_rgb8(const std::string& path);
void write_png_rgb8(const std::string& path, const ImageU8& img);

}  // namespace nervdiff
