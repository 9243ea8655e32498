#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "depthlab/geometry.hpp"
#include "depthlab/tensor.hpp"

// Raster file formats: grayscale PFM for exact float payloads and grayscale
// or indexed PNG for viewable dumps.

namespace depthlab {

// PFM, grayscale "Pf" only. Header is "Pf\n<w> <h>\n<scale>\n"; a negative
// scale marks a little-endian payload, rows run bottom-to-top. Values are
// cast to float32 on write (the round trip is bit-exact for float values)
// and the writer always emits little-endian with scale -1. Readers accept
// either endianness and reject NaN payloads, malformed headers, and
// truncated or oversized files.
void write_pfm(const std::string& path, const Image& img);
Image read_pfm(const std::string& path);

// Depth-map convention over PFM: invalid pixels store 0. On read, a pixel is
// valid when its value is finite and > 0.
void write_depth_pfm(const std::string& path, const DepthMap& d);
DepthMap read_depth_pfm(const std::string& path);

// Grayscale PNG. Writers clamp to [0, 1] and quantize to the full code
// range; the reader maps either bit depth back into [0, 1].
void write_png8(const std::string& path, const Image& img);
void write_png16(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// Indexed-color PNG for label rasters: every pixel of `codes` must be an
// integer in [0, palette.size()).
struct PaletteColor {
  uint8_t r = 0, g = 0, b = 0;
};
void write_png_indexed(const std::string& path, const Tensor& codes,
                       const std::vector<PaletteColor>& palette);

}  // namespace depthlab
