#include "deblurkit/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

#include "deblurkit/common.hpp"

namespace dbk::img {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

void open_reader(PngReader& r, std::FILE* f, const std::filesystem::path& path) {
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("not a PNG file: " + path.string());
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!r.png) throw IoError("libpng init failed");
  r.info = png_create_info_struct(r.png);
  if (!r.info) throw IoError("libpng init failed");
  if (setjmp(png_jmpbuf(r.png))) throw IoError("undecodable PNG: " + path.string());
  png_init_io(r.png, f);
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);
}

}  // namespace

std::pair<int, int> png_size(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw IoError("cannot open image: " + path.string());
  PngReader r;
  open_reader(r, f.get(), path);
  return {static_cast<int>(png_get_image_width(r.png, r.info)),
          static_cast<int>(png_get_image_height(r.png, r.info))};
}

Tensor read_png(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw IoError("cannot open image: " + path.string());
  PngReader r;
  open_reader(r, f.get(), path);
  if (setjmp(png_jmpbuf(r.png))) throw IoError("undecodable PNG: " + path.string());

  png_set_palette_to_rgb(r.png);
  png_set_expand_gray_1_2_4_to_8(r.png);
  if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
  png_set_strip_alpha(r.png);
  png_set_gray_to_rgb(r.png);
  png_read_update_info(r.png, r.info);

  const int w = static_cast<int>(png_get_image_width(r.png, r.info));
  const int h = static_cast<int>(png_get_image_height(r.png, r.info));
  const int depth = png_get_bit_depth(r.png, r.info);
  const size_t rowbytes = png_get_rowbytes(r.png, r.info);
  std::vector<unsigned char> buffer(rowbytes * static_cast<size_t>(h));
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = buffer.data() + rowbytes * static_cast<size_t>(y);
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);

  Tensor out({3, h, w});
  double* op = out.data();
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    const unsigned char* row = rows[static_cast<size_t>(y)];
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v;
        if (depth == 16) {
          const size_t i = (static_cast<size_t>(x) * 3 + static_cast<size_t>(c)) * 2;
          v = static_cast<double>((row[i] << 8) | row[i + 1]) / 65535.0;  // PNG is big-endian
        } else {
          v = static_cast<double>(row[static_cast<size_t>(x) * 3 + static_cast<size_t>(c)]) / 255.0;
        }
        op[c * plane + static_cast<std::int64_t>(y) * w + x] = v;
      }
    }
  }
  return out;
}

void write_png16(const std::filesystem::path& path, const Tensor& image) {
  if (image.ndim() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw IoError("write_png16 expects 1 x H x W or 3 x H x W, got " + shape_str(image));
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  FilePtr f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw IoError("cannot write image: " + path.string());
  PngWriter wr;
  wr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!wr.png) throw IoError("libpng init failed");
  wr.info = png_create_info_struct(wr.png);
  if (!wr.info) throw IoError("libpng init failed");
  if (setjmp(png_jmpbuf(wr.png))) throw IoError("PNG write failed: " + path.string());
  png_init_io(wr.png, f.get());
  png_set_compression_level(wr.png, 6);  // fixed so outputs are byte-stable
  png_set_IHDR(wr.png, wr.info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 16,
               C == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(wr.png, wr.info);

  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const double* ip = image.data();
  std::vector<unsigned char> row(static_cast<size_t>(W) * static_cast<size_t>(C) * 2);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < C; ++c) {
        const double v = std::clamp(ip[c * plane + static_cast<std::int64_t>(y) * W + x], 0.0, 1.0);
        const unsigned q = static_cast<unsigned>(v * 65535.0 + 0.5);
        row[(static_cast<size_t>(x) * static_cast<size_t>(C) + static_cast<size_t>(c)) * 2] =
            static_cast<unsigned char>(q >> 8);
        row[(static_cast<size_t>(x) * static_cast<size_t>(C) + static_cast<size_t>(c)) * 2 + 1] =
            static_cast<unsigned char>(q & 0xff);
      }
    }
    png_write_row(wr.png, row.data());
  }
  png_write_end(wr.png, nullptr);
}

void write_grid_png(const std::filesystem::path& path, const Tensor& grid) {
  if (grid.ndim() != 2) throw IoError("write_grid_png expects a 2-d grid, got " + shape_str(grid));
  const double lo = grid.min(), hi = grid.max();
  const double scale = hi > lo ? 1.0 / (hi - lo) : 0.0;
  Tensor norm({1, grid.dim(0), grid.dim(1)});
  for (std::int64_t i = 0; i < grid.size(); ++i) norm[i] = (grid[i] - lo) * scale;
  write_png16(path, norm);
}

}  // namespace dbk::img
