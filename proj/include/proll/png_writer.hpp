#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace proll {

// Minimal 8-bit RGB PNG encoder (zlib-deflated, no interlace).
// `rgb` is row-major, 3 bytes per pixel, top row first.
void write_png_rgb(const std::string& path, int width, int height, const std::vector<uint8_t>& rgb);

}  // namespace proll
