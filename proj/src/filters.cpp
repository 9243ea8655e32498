#include "depthlab/filters.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace depthlab {

Image gaussian_blur(const Image& in, double sigma) {
  if (in.shape.size() != 2) throw std::invalid_argument("gaussian_blur: need a 2D image");
  if (!(sigma > 0)) throw std::invalid_argument("gaussian_blur: sigma must be positive");
  const int64_t r = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<size_t>(2 * r + 1));
  for (int64_t i = -r; i <= r; ++i)
    k[static_cast<size_t>(i + r)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  const int64_t h = in.rows(), w = in.cols();
  Image tmp = Tensor::zeros({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double s = 0, ksum = 0;
      for (int64_t i = -r; i <= r; ++i) {
        const int64_t xx = x + i;
        if (xx < 0 || xx >= w) continue;
        s += k[static_cast<size_t>(i + r)] * in.at(y, xx);
        ksum += k[static_cast<size_t>(i + r)];
      }
      tmp.at(y, x) = s / ksum;
    }
  Image out = Tensor::zeros({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double s = 0, ksum = 0;
      for (int64_t i = -r; i <= r; ++i) {
        const int64_t yy = y + i;
        if (yy < 0 || yy >= h) continue;
        s += k[static_cast<size_t>(i + r)] * tmp.at(yy, x);
        ksum += k[static_cast<size_t>(i + r)];
      }
      out.at(y, x) = s / ksum;
    }
  return out;
}

Image median_filter(const Image& in, int radius) {
  if (in.shape.size() != 2) throw std::invalid_argument("median_filter: need a 2D image");
  if (radius < 1) throw std::invalid_argument("median_filter: radius must be >= 1");
  const int64_t h = in.rows(), w = in.cols();
  Image out = Tensor::zeros({h, w});
  // Edge-replicated sampling keeps the window size odd everywhere, so the
  // median is always the exact middle element.
  std::vector<double> window(static_cast<size_t>((2 * radius + 1) * (2 * radius + 1)));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      size_t i = 0;
      for (int64_t wy = y - radius; wy <= y + radius; ++wy)
        for (int64_t wx = x - radius; wx <= x + radius; ++wx)
          window[i++] = in.at(std::clamp<int64_t>(wy, 0, h - 1), std::clamp<int64_t>(wx, 0, w - 1));
      const size_t mid = window.size() / 2;
      std::nth_element(window.begin(), window.begin() + mid, window.end());
      out.at(y, x) = window[mid];
    }
  return out;
}

}  // namespace depthlab
