#include "deblurkit/data_toolkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "deblurkit/common.hpp"
#include "deblurkit/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dbk::data {

std::vector<PairRecord> load_pair_dataset(const fs::path& root) {
  const fs::path source_dir = root / "source";
  const fs::path target_dir = root / "target";
  if (!fs::is_directory(source_dir) || !fs::is_directory(target_dir))
    throw IoError("dataset root must contain source/ and target/ directories: " + root.string());

  std::map<std::string, std::string> split_of;
  const fs::path splits_path = root / "splits.json";
  if (fs::exists(splits_path)) {
    std::ifstream in(splits_path);
    json j = json::parse(in);
    for (const auto& split : {"train", "test", "val"})
      if (j.contains(split))
        for (const auto& id : j[split]) split_of[id.get<std::string>()] = split;
  }

  std::vector<PairRecord> records;
  std::set<std::string> seen;
  for (const auto& entry : fs::directory_iterator(source_dir)) {
    if (!entry.is_regular_file()) continue;
    PairRecord rec;
    rec.blurry_path = entry.path();
    rec.identifier = entry.path().stem().string();
    rec.sharp_path = target_dir / entry.path().filename();
    if (!fs::exists(rec.sharp_path))
      throw IoError("blurry image without sharp counterpart: " + rec.blurry_path.string() + " (expected " +
                    rec.sharp_path.string() + ")");
    auto [bw, bh] = img::png_size(rec.blurry_path);
    auto [sw, sh] = img::png_size(rec.sharp_path);
    if (bw != sw || bh != sh)
      throw IoError("pair extent mismatch for id '" + rec.identifier + "': " + std::to_string(bw) + "x" +
                    std::to_string(bh) + " vs " + std::to_string(sw) + "x" + std::to_string(sh));
    if (auto it = split_of.find(rec.identifier); it != split_of.end()) rec.split = it->second;
    seen.insert(rec.identifier);
    records.push_back(std::move(rec));
  }
  for (const auto& entry : fs::directory_iterator(target_dir)) {
    if (!entry.is_regular_file()) continue;
    if (!seen.count(entry.path().stem().string()))
      throw IoError("sharp image without blurry counterpart: " + entry.path().string());
  }
  std::sort(records.begin(), records.end(),
            [](const PairRecord& a, const PairRecord& b) { return a.identifier < b.identifier; });
  return records;
}

MisalignmentTransform MisalignmentTransform::shift(double dx, double dy) {
  MisalignmentTransform t;
  t.kind = Kind::kShift;
  t.dx = dx;
  t.dy = dy;
  t.validate();
  return t;
}

MisalignmentTransform MisalignmentTransform::zoom(double scale) {
  MisalignmentTransform t;
  t.kind = Kind::kZoom;
  t.scale = scale;
  t.validate();
  return t;
}

MisalignmentTransform MisalignmentTransform::compose(double dx, double dy, double scale) {
  MisalignmentTransform t;
  t.kind = Kind::kCompose;
  t.dx = dx;
  t.dy = dy;
  t.scale = scale;
  t.validate();
  return t;
}

void MisalignmentTransform::validate() const {
  if (std::abs(dx) > 16.0 || std::abs(dy) > 16.0)
    throw ConfigError("misalignment shift exceeds the 16 px sanity bound: (" + std::to_string(dx) + "," +
                      std::to_string(dy) + ")");
  if (scale < 0.9 || scale > 1.1)
    throw ConfigError("misalignment zoom outside [0.9, 1.1]: " + std::to_string(scale));
}

Tensor apply_misalignment(const Tensor& image, const MisalignmentTransform& t) {
  t.validate();
  if (image.ndim() != 3) throw ShapeError("apply_misalignment expects C x H x W");
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const double cy = 0.5 * (H - 1), cx = 0.5 * (W - 1);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor out({C, H, W});
  const double* ip = image.data();
  double* op = out.data();
  const bool zooms = t.kind != MisalignmentTransform::Kind::kShift;
  const bool shifts = t.kind != MisalignmentTransform::Kind::kZoom;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      // Sample position: optional scaling about the center, then the shift
      // offset. A pure shift samples at (x + dx, y + dy).
      double xs = x, ys = y;
      if (zooms) {
        xs = cx + (x - cx) / t.scale;
        ys = cy + (y - cy) / t.scale;
      }
      if (shifts) {
        xs += t.dx;
        ys += t.dy;
      }
      xs = std::clamp(xs, 0.0, static_cast<double>(W - 1));
      ys = std::clamp(ys, 0.0, static_cast<double>(H - 1));
      const int x0 = static_cast<int>(xs), y0 = static_cast<int>(ys);
      const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const double ax = xs - x0, ay = ys - y0;
      for (int c = 0; c < C; ++c) {
        const double* pl = ip + c * plane;
        const double top = pl[static_cast<std::int64_t>(y0) * W + x0] * (1 - ax) + pl[static_cast<std::int64_t>(y0) * W + x1] * ax;
        const double bot = pl[static_cast<std::int64_t>(y1) * W + x0] * (1 - ax) + pl[static_cast<std::int64_t>(y1) * W + x1] * ax;
        op[c * plane + static_cast<std::int64_t>(y) * W + x] = top * (1 - ay) + bot * ay;
      }
    }
  }
  return out;
}

namespace {

// Offsets of the integer disc {(dx,dy): dx^2+dy^2 <= r^2}, cached per radius.
const std::vector<std::pair<int, int>>& disc_offsets(int r) {
  static std::map<int, std::vector<std::pair<int, int>>> cache;
  auto it = cache.find(r);
  if (it != cache.end()) return it->second;
  std::vector<std::pair<int, int>> offs;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= r * r) offs.emplace_back(dy, dx);
  return cache.emplace(r, std::move(offs)).first->second;
}

}  // namespace

Tensor disc_blur(const Tensor& image, const Tensor& radius_map) {
  if (image.ndim() != 3 || radius_map.ndim() != 2 || radius_map.dim(0) != image.dim(1) ||
      radius_map.dim(1) != image.dim(2))
    throw ShapeError("disc_blur: radius map " + shape_str(radius_map) + " vs image " + shape_str(image));
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor out({C, H, W});
  const double* ip = image.data();
  const double* rp = radius_map.data();
  double* op = out.data();
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double rv = rp[static_cast<std::int64_t>(y) * W + x];
      if (rv < -0.5 || rv > 7.5 || !std::isfinite(rv))
        throw ConfigError("blur radius out of range [0,7] at (" + std::to_string(y) + "," + std::to_string(x) +
                          "): " + std::to_string(rv));
      const int r = static_cast<int>(std::lround(rv));
      const auto& offs = disc_offsets(r);
      const double inv = 1.0 / static_cast<double>(offs.size());
      for (int c = 0; c < C; ++c) {
        const double* pl = ip + c * plane;
        double acc = 0.0;
        for (const auto& [dy, dx] : offs)
          acc += pl[static_cast<std::int64_t>(std::clamp(y + dy, 0, H - 1)) * W + std::clamp(x + dx, 0, W - 1)];
        op[c * plane + static_cast<std::int64_t>(y) * W + x] = acc * inv;
      }
    }
  }
  return out;
}

std::pair<Tensor, Tensor> synthesize_defocus_pair(const Tensor& sharp, const Tensor& radius_map) {
  return {disc_blur(sharp, radius_map), sharp};
}

std::vector<PatchPair> extract_patches(const Tensor& blurry, const Tensor& sharp, int size, int stride) {
  if (!blurry.same_shape(sharp))
    throw ShapeError("extract_patches: pair shapes differ, " + shape_str(blurry) + " vs " + shape_str(sharp));
  const int C = blurry.dim(0), H = blurry.dim(1), W = blurry.dim(2);
  if (size <= 0 || stride <= 0) throw ConfigError("patch size and stride must be positive");
  if (size > H || size > W)
    throw ConfigError("patch size " + std::to_string(size) + " exceeds image extent " + shape_str(blurry));
  std::vector<PatchPair> out;
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int y = 0; y + size <= H; y += stride) {
    for (int x = 0; x + size <= W; x += stride) {
      PatchPair p;
      p.y = y;
      p.x = x;
      p.blurry = Tensor({C, size, size});
      p.sharp = Tensor({C, size, size});
      for (int c = 0; c < C; ++c)
        for (int yy = 0; yy < size; ++yy) {
          std::copy_n(blurry.data() + c * plane + static_cast<std::int64_t>(y + yy) * W + x, size,
                      p.blurry.data() + (static_cast<std::int64_t>(c) * size + yy) * size);
          std::copy_n(sharp.data() + c * plane + static_cast<std::int64_t>(y + yy) * W + x, size,
                      p.sharp.data() + (static_cast<std::int64_t>(c) * size + yy) * size);
        }
      out.push_back(std::move(p));
    }
  }
  return out;
}

Tensor procedural_texture(int height, int width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Tensor im({3, height, width});
  const std::int64_t plane = static_cast<std::int64_t>(height) * width;
  double* p = im.data();

  // Smooth color gradient base.
  for (int c = 0; c < 3; ++c) {
    const double base = 0.3 + 0.4 * uni(rng);
    const double gx = (uni(rng) - 0.5) * 0.5;
    const double gy = (uni(rng) - 0.5) * 0.5;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        p[c * plane + static_cast<std::int64_t>(y) * width + x] =
            base + gx * (static_cast<double>(x) / width - 0.5) + gy * (static_cast<double>(y) / height - 0.5);
  }

  // Random ellipses and rectangles for edges and large structure.
  const int shapes = 8 + static_cast<int>(uni(rng) * 6);
  for (int s = 0; s < shapes; ++s) {
    const double cx = uni(rng) * width, cy = uni(rng) * height;
    const double rx = 2.0 + uni(rng) * width * 0.25, ry = 2.0 + uni(rng) * height * 0.25;
    const bool rect = uni(rng) < 0.4;
    double color[3] = {0.1 + 0.8 * uni(rng), 0.1 + 0.8 * uni(rng), 0.1 + 0.8 * uni(rng)};
    const double blend = 0.5 + 0.5 * uni(rng);
    const int y0 = std::max(0, static_cast<int>(cy - ry)), y1 = std::min(height - 1, static_cast<int>(cy + ry));
    const int x0 = std::max(0, static_cast<int>(cx - rx)), x1 = std::min(width - 1, static_cast<int>(cx + rx));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double u = (x - cx) / rx, v = (y - cy) / ry;
        if (!rect && u * u + v * v > 1.0) continue;
        for (int c = 0; c < 3; ++c) {
          double& dst = p[c * plane + static_cast<std::int64_t>(y) * width + x];
          dst = (1 - blend) * dst + blend * color[c];
        }
      }
  }

  // Fine detail so every region carries gradient energy.
  std::vector<double> noise(static_cast<size_t>(plane));
  for (int c = 0; c < 3; ++c) {
    for (auto& v : noise) v = (uni(rng) - 0.5) * 0.18;
    // 3x3 box soften, then add.
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            acc += noise[static_cast<size_t>(std::clamp(y + dy, 0, height - 1)) * static_cast<size_t>(width) +
                         static_cast<size_t>(std::clamp(x + dx, 0, width - 1))];
        p[c * plane + static_cast<std::int64_t>(y) * width + x] += acc / 9.0;
      }
  }
  for (std::int64_t i = 0; i < im.size(); ++i) p[i] = std::clamp(p[i], 0.0, 1.0);
  return im;
}

Tensor make_radius_map(const std::string& kind, int height, int width, double max_radius, std::mt19937_64& rng) {
  if (max_radius < 0.0 || max_radius > 7.0)
    throw ConfigError("radius map maximum must lie in [0,7], got " + std::to_string(max_radius));
  Tensor r({height, width});
  if (kind == "constant") {
    r.fill(std::round(max_radius));
  } else if (kind == "ramp") {
    // Left-to-right depth ramp, quantized to integer radii.
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        r[static_cast<std::int64_t>(y) * width + x] =
            std::round(max_radius * static_cast<double>(x) / std::max(1, width - 1));
  } else if (kind == "smooth") {
    // Low-frequency random field scaled to [0, max].
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const int gh = 4, gw = 4;
    std::vector<double> grid(gh * gw);
    for (auto& v : grid) v = uni(rng);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double gy = static_cast<double>(y) / (height - 1) * (gh - 1);
        const double gx = static_cast<double>(x) / (width - 1) * (gw - 1);
        const int y0 = std::min(static_cast<int>(gy), gh - 2), x0 = std::min(static_cast<int>(gx), gw - 2);
        const double ay = gy - y0, ax = gx - x0;
        const double top = grid[static_cast<size_t>(y0 * gw + x0)] * (1 - ax) + grid[static_cast<size_t>(y0 * gw + x0 + 1)] * ax;
        const double bot = grid[static_cast<size_t>((y0 + 1) * gw + x0)] * (1 - ax) + grid[static_cast<size_t>((y0 + 1) * gw + x0 + 1)] * ax;
        r[static_cast<std::int64_t>(y) * width + x] = std::round(max_radius * (top * (1 - ay) + bot * ay));
      }
  } else {
    throw ConfigError("unknown radius map kind '" + kind + "' (constant | ramp | smooth)");
  }
  return r;
}

std::vector<GeneratedPair> generate_dataset(const SynthConfig& cfg, const fs::path& out_root) {
  if (cfg.count <= 0) throw ConfigError("generator count must be positive");
  if (cfg.test_count < 0 || cfg.test_count > cfg.count) throw ConfigError("generator test_count out of range");
  fs::create_directories(out_root / "source");
  fs::create_directories(out_root / "target");

  std::vector<GeneratedPair> pairs;
  json manifest;
  manifest["pairs"] = json::array();
  json train_ids = json::array(), test_ids = json::array();

  for (int n = 0; n < cfg.count; ++n) {
    std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(n)));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    Tensor sharp = procedural_texture(cfg.height, cfg.width, rng);
    Tensor radius = make_radius_map(cfg.radius_kind, cfg.height, cfg.width, cfg.radius_max, rng);
    auto [blurry, clean] = synthesize_defocus_pair(sharp, radius);

    MisalignmentTransform t = MisalignmentTransform::shift(0, 0);
    if (cfg.misalign_kind == "shift") {
      t = MisalignmentTransform::shift(cfg.shift_dx, cfg.shift_dy);
    } else if (cfg.misalign_kind == "zoom") {
      t = MisalignmentTransform::zoom(cfg.zoom);
    } else if (cfg.misalign_kind == "compose") {
      t = MisalignmentTransform::compose(cfg.shift_dx, cfg.shift_dy, cfg.zoom);
    } else if (cfg.misalign_kind == "random_shift") {
      const double ang = uni(rng) * 2.0 * 3.14159265358979323846;
      t = MisalignmentTransform::shift(cfg.random_shift_max * std::cos(ang), cfg.random_shift_max * std::sin(ang));
    } else if (cfg.misalign_kind != "none") {
      throw ConfigError("unknown misalignment kind '" + cfg.misalign_kind + "'");
    }
    Tensor misaligned_sharp = apply_misalignment(clean, t);

    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "%04d", n);
    GeneratedPair gp{idbuf, t};
    img::write_png16(out_root / "source" / (gp.id + ".png"), blurry);
    img::write_png16(out_root / "target" / (gp.id + ".png"), misaligned_sharp);

    json jp;
    jp["id"] = gp.id;
    jp["transform"] = {{"kind", cfg.misalign_kind}, {"dx", t.dx}, {"dy", t.dy}, {"scale", t.scale}};
    jp["radius"] = {{"kind", cfg.radius_kind}, {"max", cfg.radius_max}};
    manifest["pairs"].push_back(jp);
    if (n < cfg.count - cfg.test_count)
      train_ids.push_back(gp.id);
    else
      test_ids.push_back(gp.id);
    pairs.push_back(std::move(gp));
  }

  manifest["config"] = {{"count", cfg.count},         {"test_count", cfg.test_count},
                        {"width", cfg.width},         {"height", cfg.height},
                        {"seed", cfg.seed},           {"radius_kind", cfg.radius_kind},
                        {"radius_max", cfg.radius_max}, {"misalign_kind", cfg.misalign_kind},
                        {"shift_dx", cfg.shift_dx},   {"shift_dy", cfg.shift_dy},
                        {"zoom", cfg.zoom},           {"random_shift_max", cfg.random_shift_max}};
  {
    std::ofstream mf(out_root / "manifest.json");
    mf << manifest.dump(2) << "\n";
  }
  {
    json splits;
    splits["train"] = train_ids;
    splits["test"] = test_ids;
    std::ofstream sf(out_root / "splits.json");
    sf << splits.dump(2) << "\n";
  }
  return pairs;
}

}  // namespace dbk::data
