#pragma once

#include "deblurkit/tensor.hpp"

namespace dbk::metrics {

// PSNR in dB against unit dynamic range; identical images cap at 100 dB.
double psnr(const Tensor& a, const Tensor& b);

// Windowed SSIM, Gaussian 11x11 sigma 1.5, K1=0.01 K2=0.03, dynamic range 1.
// Computed on the valid region per channel, then averaged over channels.
double ssim(const Tensor& a, const Tensor& b);

double mae(const Tensor& a, const Tensor& b);

}  // namespace dbk::metrics
