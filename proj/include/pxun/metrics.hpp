#pragma once

#include "pxun/mat.hpp"

namespace pxun {

// PSNR in dB with peak value 1.0. Identical images (mse == 0) and anything
// above the cap report 99 dB so CSV output stays finite.
inline constexpr double kPsnrCap = 99.0;

double psnr(const Image& a, const Image& b);

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// dynamic range 1. Windows are evaluated where they fit entirely inside the
// image; images smaller than the window fall back to one full-image window.
double ssim(const Image& a, const Image& b);

// Isotropic total variation with forward differences and Neumann boundary.
double total_variation(const Image& x);

}  // namespace pxun
