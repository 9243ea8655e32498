#pragma once

#include "depthlab/tensor.hpp"

// Small plain image filters shared by the simulator, feature detection, and
// the loss terms. Both handle borders without zero padding, so constant
// images stay constant.

namespace depthlab {

// Separable Gaussian, kernel truncated at 3 sigma and renormalized at the
// border.
Image gaussian_blur(const Image& in, double sigma);

// Median over a (2*radius+1)^2 window with edge-replicated borders.
Image median_filter(const Image& in, int radius);

}  // namespace depthlab
