#include "depthlab/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace depthlab {

namespace {

void store_f32_le(float v, unsigned char* p) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  p[0] = static_cast<unsigned char>(bits);
  p[1] = static_cast<unsigned char>(bits >> 8);
  p[2] = static_cast<unsigned char>(bits >> 16);
  p[3] = static_cast<unsigned char>(bits >> 24);
}

float load_f32(const unsigned char* p, bool little) {
  const uint32_t bits = little ? (static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
                                  static_cast<uint32_t>(p[2]) << 16 |
                                  static_cast<uint32_t>(p[3]) << 24)
                               : (static_cast<uint32_t>(p[3]) | static_cast<uint32_t>(p[2]) << 8 |
                                  static_cast<uint32_t>(p[1]) << 16 |
                                  static_cast<uint32_t>(p[0]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

[[noreturn]] void pfm_fail(const std::string& path, const char* what) {
  throw std::runtime_error("pfm: " + std::string(what) + " in " + path);
}

// Whitespace-delimited header tokens; PFM has no comment syntax.
std::string next_token(const std::string& buf, size_t& pos, const std::string& path) {
  while (pos < buf.size() && std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
  const size_t start = pos;
  while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
  if (start == pos) pfm_fail(path, "truncated header");
  return buf.substr(start, pos - start);
}

double clamp01(double v) { return std::fmin(1.0, std::fmax(0.0, v)); }

struct PngWriter {
  FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;

  ~PngWriter() {
    if (png != nullptr) png_destroy_write_struct(&png, &info);
    if (fp != nullptr) std::fclose(fp);
  }
};

struct PngReader {
  FILE* fp = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;

  ~PngReader() {
    if (png != nullptr) png_destroy_read_struct(&png, &info, nullptr);
    if (fp != nullptr) std::fclose(fp);
  }
};

// Row-pointer plumbing shared by the grayscale and indexed writers. All
// C++ objects live outside the setjmp scope, so a libpng longjmp unwinds
// into a plain error return.
bool write_png_rows(PngWriter& ctx, int64_t h, int64_t w, int bit_depth, int color_type,
                    const std::vector<PaletteColor>* palette,
                    std::vector<png_bytep>& row_ptrs) {
  // Everything with a destructor is built before setjmp: a libpng longjmp
  // must only ever skip plain C calls.
  std::vector<png_color> pal;
  if (palette != nullptr) {
    pal.reserve(palette->size());
    for (const PaletteColor& c : *palette) pal.push_back(png_color{c.r, c.g, c.b});
  }
  if (setjmp(png_jmpbuf(ctx.png))) return false;
  png_init_io(ctx.png, ctx.fp);
  png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  if (palette != nullptr) png_set_PLTE(ctx.png, ctx.info, pal.data(), static_cast<int>(pal.size()));
  png_write_info(ctx.png, ctx.info);
  png_write_image(ctx.png, row_ptrs.data());
  png_write_end(ctx.png, nullptr);
  return true;
}

void write_png_gray(const std::string& path, const Image& img, int bit_depth) {
  if (img.shape.size() != 2) throw std::invalid_argument("png: image must be {H, W}");
  const int64_t h = img.rows(), w = img.cols();
  const int64_t stride = bit_depth == 16 ? 2 * w : w;
  std::vector<unsigned char> bytes(static_cast<size_t>(h * stride));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double v = clamp01(img.at(y, x));
      unsigned char* p = bytes.data() + y * stride;
      if (bit_depth == 16) {
        const uint16_t q = static_cast<uint16_t>(std::lround(v * 65535.0));
        p[2 * x] = static_cast<unsigned char>(q >> 8);  // PNG is big-endian
        p[2 * x + 1] = static_cast<unsigned char>(q);
      } else {
        p[x] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = bytes.data() + y * stride;

  PngWriter ctx;
  ctx.fp = std::fopen(path.c_str(), "wb");
  if (ctx.fp == nullptr) throw std::runtime_error("png: cannot write " + path);
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (ctx.png == nullptr) throw std::runtime_error("png: writer allocation failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (ctx.info == nullptr) throw std::runtime_error("png: info allocation failed");
  if (!write_png_rows(ctx, h, w, bit_depth, PNG_COLOR_TYPE_GRAY, nullptr, rows))
    throw std::runtime_error("png: write failed for " + path);
}

}  // namespace

void write_pfm(const std::string& path, const Image& img) {
  if (img.shape.size() != 2) throw std::invalid_argument("pfm: image must be {H, W}");
  const int64_t h = img.rows(), w = img.cols();
  for (int64_t i = 0; i < img.size(); ++i)
    if (std::isnan(img[i])) throw std::runtime_error("pfm: refusing to write NaN to " + path);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("pfm: cannot write " + path);
  out << "Pf\n" << w << " " << h << "\n-1\n";
  std::vector<unsigned char> row(static_cast<size_t>(4 * w));
  for (int64_t y = h - 1; y >= 0; --y) {
    for (int64_t x = 0; x < w; ++x)
      store_f32_le(static_cast<float>(img.at(y, x)), row.data() + 4 * x);
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("pfm: write failed for " + path);
}

Image read_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pfm: cannot read " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < 2 || buf[0] != 'P') pfm_fail(path, "bad magic");
  if (buf[1] == 'F') pfm_fail(path, "color PFM unsupported");
  if (buf[1] != 'f') pfm_fail(path, "bad magic");

  size_t pos = 2;
  int64_t w = 0, h = 0;
  double scale = 0;
  try {
    w = std::stoll(next_token(buf, pos, path));
    h = std::stoll(next_token(buf, pos, path));
    scale = std::stod(next_token(buf, pos, path));
  } catch (const std::logic_error&) {
    pfm_fail(path, "malformed header");
  }
  if (w <= 0 || h <= 0) pfm_fail(path, "non-positive dimensions");
  if (scale == 0.0 || std::isnan(scale)) pfm_fail(path, "bad scale");
  if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos])))
    pfm_fail(path, "malformed header");
  ++pos;  // exactly one whitespace byte separates header and payload

  const size_t need = static_cast<size_t>(w) * static_cast<size_t>(h) * 4;
  if (buf.size() - pos < need) pfm_fail(path, "truncated payload");
  if (buf.size() - pos > need) pfm_fail(path, "trailing bytes after payload");

  const bool little = scale < 0;
  Image img = Tensor::zeros({h, w});
  const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data()) + pos;
  for (int64_t fy = 0; fy < h; ++fy)
    for (int64_t x = 0; x < w; ++x, p += 4) {
      const float v = load_f32(p, little);
      if (std::isnan(v)) pfm_fail(path, "NaN payload");
      img.at(h - 1 - fy, x) = v;  // file rows run bottom-to-top
    }
  return img;
}

void write_depth_pfm(const std::string& path, const DepthMap& d) {
  d.validate();
  write_pfm(path, d.depth);
}

DepthMap read_depth_pfm(const std::string& path) {
  DepthMap d;
  d.depth = read_pfm(path);
  d.valid = Tensor::zeros(d.depth.shape);
  for (int64_t i = 0; i < d.depth.size(); ++i) {
    if (d.depth[i] > 0.0 && std::isfinite(d.depth[i]))
      d.valid[i] = 1.0;
    else
      d.depth[i] = 0.0;
  }
  return d;
}

void write_png8(const std::string& path, const Image& img) { write_png_gray(path, img, 8); }
void write_png16(const std::string& path, const Image& img) { write_png_gray(path, img, 16); }

Image read_png(const std::string& path) {
  PngReader ctx;
  ctx.fp = std::fopen(path.c_str(), "rb");
  if (ctx.fp == nullptr) throw std::runtime_error("png: cannot read " + path);
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (ctx.png == nullptr) throw std::runtime_error("png: reader allocation failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (ctx.info == nullptr) throw std::runtime_error("png: info allocation failed");

  // Volatile staging keeps the values well defined across a libpng longjmp;
  // buffers are sized between the two guarded sections.
  volatile int64_t w_v = 0, h_v = 0;
  volatile int depth_v = 0;
  std::vector<unsigned char> bytes;
  std::vector<png_bytep> rows;
  {
    if (setjmp(png_jmpbuf(ctx.png))) throw std::runtime_error("png: read failed for " + path);
    png_init_io(ctx.png, ctx.fp);
    png_read_info(ctx.png, ctx.info);
    w_v = png_get_image_width(ctx.png, ctx.info);
    h_v = png_get_image_height(ctx.png, ctx.info);
    depth_v = png_get_bit_depth(ctx.png, ctx.info);
    if (png_get_color_type(ctx.png, ctx.info) != PNG_COLOR_TYPE_GRAY)
      throw std::runtime_error("png: expected grayscale in " + path);
    if (depth_v < 8) {
      png_set_expand_gray_1_2_4_to_8(ctx.png);
      depth_v = 8;
    }
  }
  const int64_t w = w_v, h = h_v;
  const int bit_depth = depth_v;
  const int64_t stride = bit_depth == 16 ? 2 * w : w;
  bytes.assign(static_cast<size_t>(h * stride), 0);
  rows.resize(static_cast<size_t>(h));
  for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = bytes.data() + y * stride;
  {
    if (setjmp(png_jmpbuf(ctx.png))) throw std::runtime_error("png: read failed for " + path);
    png_read_image(ctx.png, rows.data());
  }

  Image img = Tensor::zeros({h, w});
  for (int64_t y = 0; y < h; ++y) {
    const unsigned char* p = bytes.data() + y * stride;
    for (int64_t x = 0; x < w; ++x) {
      if (bit_depth == 16) {
        const uint16_t q = static_cast<uint16_t>(p[2 * x] << 8 | p[2 * x + 1]);
        img.at(y, x) = q / 65535.0;
      } else {
        img.at(y, x) = p[x] / 255.0;
      }
    }
  }
  return img;
}

void write_png_indexed(const std::string& path, const Tensor& codes,
                       const std::vector<PaletteColor>& palette) {
  if (codes.shape.size() != 2) throw std::invalid_argument("png: codes must be {H, W}");
  if (palette.empty() || palette.size() > 256)
    throw std::invalid_argument("png: palette must hold 1..256 colors");
  const int64_t h = codes.rows(), w = codes.cols();
  std::vector<unsigned char> bytes(static_cast<size_t>(h * w));
  for (int64_t i = 0; i < codes.size(); ++i) {
    const double v = codes[i];
    if (v != std::floor(v) || v < 0 || v >= static_cast<double>(palette.size()))
      throw std::invalid_argument("png: code outside the palette");
    bytes[static_cast<size_t>(i)] = static_cast<unsigned char>(v);
  }
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = bytes.data() + y * w;

  PngWriter ctx;
  ctx.fp = std::fopen(path.c_str(), "wb");
  if (ctx.fp == nullptr) throw std::runtime_error("png: cannot write " + path);
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (ctx.png == nullptr) throw std::runtime_error("png: writer allocation failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (ctx.info == nullptr) throw std::runtime_error("png: info allocation failed");
  if (!write_png_rows(ctx, h, w, 8, PNG_COLOR_TYPE_PALETTE, &palette, rows))
    throw std::runtime_error("png: write failed for " + path);
}

}  // namespace depthlab
