#pragma once

#include <string>

#include "pxun/mat.hpp"

namespace pxun {

// Binary PGM (P5), maxval 255 or 65535. Pixel <-> real mapping is v/maxval.
Image read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Image& img, int maxval = 255);

// Grayscale PNG, 8- or 16-bit. Reading converts color inputs to luminance
// with BT.601 weights (0.299 R + 0.587 G + 0.114 B).
Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img, int bit_depth = 8);

// Dispatches on extension (.pgm / .png).
Image read_image(const std::string& path);
void write_image(const std::string& path, const Image& img);

}  // namespace pxun
