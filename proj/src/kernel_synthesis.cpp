#include "deblurkit/kernel_synthesis.hpp"

#include <cmath>
#include <map>
#include <mutex>

#include "deblurkit/common.hpp"

namespace dbk::kernels {

int seed_channel_count(int max_radius) {
  if (max_radius < 2) throw ConfigError("maximal kernel radius index must be >= 2, got " + std::to_string(max_radius));
  return max_radius * (max_radius + 1) / 2 - 1;
}

int seed_channel_offset(int radius_index) {
  // sum_{j=2}^{i-1} j
  return radius_index * (radius_index - 1) / 2 - 1;
}

NormalizeMode normalize_mode_from_string(const std::string& name) {
  if (name == "softmax_all") return NormalizeMode::kSoftmaxAll;
  if (name == "softmax_in_disc") return NormalizeMode::kSoftmaxInDisc;
  throw ConfigError("unknown kernel normalization mode '" + name + "' (softmax_all | softmax_in_disc)");
}

std::string to_string(NormalizeMode mode) {
  return mode == NormalizeMode::kSoftmaxAll ? "softmax_all" : "softmax_in_disc";
}

namespace {

struct LevelTables {
  std::vector<CellRule> rules;
  std::vector<int> disc;
};

const LevelTables& level_tables(int radius_index) {
  static std::mutex mu;
  static std::map<int, LevelTables> cache;
  std::scoped_lock lock(mu);
  auto it = cache.find(radius_index);
  if (it != cache.end()) return it->second;
  if (radius_index < 2) throw ConfigError("kernel radius index must be >= 2, got " + std::to_string(radius_index));

  LevelTables t;
  const int i = radius_index;
  const int side = 2 * i - 1;
  t.rules.resize(static_cast<size_t>(side) * side);
  for (int ty = 0; ty < side; ++ty) {
    for (int tx = 0; tx < side; ++tx) {
      const int dy = ty - (i - 1);
      const int dx = tx - (i - 1);
      const int r2 = dx * dx + dy * dy;
      CellRule rule;
      // Integer-radius test done on r2 so no floating-point equality is needed.
      const int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(r2))));
      if (s * s == r2) {
        if (s <= i - 1) {
          rule.k0 = s;
          rule.w0 = 1.0;
          t.disc.push_back(ty * side + tx);
        }
      } else {
        const double rho = std::sqrt(static_cast<double>(r2));
        if (rho <= static_cast<double>(i - 1)) {
          const int lo = static_cast<int>(rho);
          rule.k0 = lo;
          rule.w0 = (lo + 1) - rho;
          rule.k1 = lo + 1;
          rule.w1 = rho - lo;
          t.disc.push_back(ty * side + tx);
        }
      }
      t.rules[static_cast<size_t>(ty) * side + tx] = rule;
    }
  }
  return cache.emplace(radius_index, std::move(t)).first->second;
}

Tensor seeds_to_raw_cells(const Tensor& seeds, int radius_index) {
  const int side = 2 * radius_index - 1;
  const auto& rules = level_cell_rules(radius_index);
  const std::int64_t plane = static_cast<std::int64_t>(seeds.dim(1)) * seeds.dim(2);
  Tensor raw({side * side, seeds.dim(1), seeds.dim(2)});
  const double* sp = seeds.data();
  double* rp = raw.data();
  for (size_t cell = 0; cell < rules.size(); ++cell) {
    const CellRule& r = rules[cell];
    double* out = rp + static_cast<std::int64_t>(cell) * plane;
    if (r.k0 < 0) continue;  // out of disc, stays zero
    const double* s0 = sp + static_cast<std::int64_t>(r.k0) * plane;
    if (r.k1 < 0) {
      for (std::int64_t p = 0; p < plane; ++p) out[p] = s0[p];
    } else {
      const double* s1 = sp + static_cast<std::int64_t>(r.k1) * plane;
      for (std::int64_t p = 0; p < plane; ++p) out[p] = r.w0 * s0[p] + r.w1 * s1[p];
    }
  }
  return raw;
}

}  // namespace

const std::vector<CellRule>& level_cell_rules(int radius_index) { return level_tables(radius_index).rules; }
const std::vector<int>& level_disc_cells(int radius_index) { return level_tables(radius_index).disc; }

KernelSeedVolume::KernelSeedVolume(Tensor d, int m) : data(std::move(d)), max_radius(m) {
  const int expected = seed_channel_count(m);
  if (data.ndim() != 3)
    throw ShapeError("kernel seed volume must be M x H x W, got " + shape_str(data));
  if (data.dim(0) != expected)
    throw ConfigError("kernel seed volume channel mismatch: expected M=" + std::to_string(expected) +
                      " for max radius " + std::to_string(m) + ", got " + std::to_string(data.dim(0)));
}

std::vector<Tensor> split_seed_volume(const KernelSeedVolume& volume) {
  std::vector<Tensor> levels;
  const std::int64_t plane = static_cast<std::int64_t>(volume.height()) * volume.width();
  const double* src = volume.data.data();
  for (int i = 2; i <= volume.max_radius; ++i) {
    Tensor level({i, volume.height(), volume.width()});
    const std::int64_t off = static_cast<std::int64_t>(seed_channel_offset(i)) * plane;
    std::copy(src + off, src + off + level.size(), level.data());
    levels.push_back(std::move(level));
  }
  return levels;
}

Tensor build_kernel(std::span<const double> seed) {
  if (seed.size() < 2)
    throw ConfigError("invalid kernel seed: need at least 2 radial samples, got " + std::to_string(seed.size()));
  const int i = static_cast<int>(seed.size());
  const int side = 2 * i - 1;
  const auto& rules = level_cell_rules(i);
  Tensor raw({side, side});
  double* rp = raw.data();
  for (size_t cell = 0; cell < rules.size(); ++cell) {
    const CellRule& r = rules[cell];
    if (r.k0 < 0) continue;
    rp[cell] = r.k1 < 0 ? seed[static_cast<size_t>(r.k0)]
                        : r.w0 * seed[static_cast<size_t>(r.k0)] + r.w1 * seed[static_cast<size_t>(r.k1)];
  }
  return raw;
}

Tensor normalize_kernel(const Tensor& raw, NormalizeMode mode) {
  if (raw.ndim() != 2 || raw.dim(0) != raw.dim(1) || raw.dim(0) % 2 == 0 || raw.dim(0) < 3)
    throw ShapeError("normalize_kernel expects an odd square grid, got " + shape_str(raw));
  const int side = raw.dim(0);
  const int i = (side + 1) / 2;
  if (!raw.all_finite())
    throw NumericError("non-finite raw kernel values at radius index " + std::to_string(i));
  const double* rp = raw.data();
  Tensor out({side, side});
  double* op = out.data();
  if (mode == NormalizeMode::kSoftmaxAll) {
    double mx = raw.max();
    double z = 0.0;
    for (int c = 0; c < side * side; ++c) {
      op[c] = std::exp(rp[c] - mx);
      z += op[c];
    }
    for (int c = 0; c < side * side; ++c) op[c] /= z;
  } else {
    const auto& disc = level_disc_cells(i);
    double mx = -1e300;
    for (int c : disc) mx = std::max(mx, rp[c]);
    double z = 0.0;
    for (int c : disc) z += std::exp(rp[c] - mx);
    for (int c : disc) op[c] = std::exp(rp[c] - mx) / z;
  }
  return out;
}

IsotropicKernelBank::IsotropicKernelBank(const KernelSeedVolume& volume, NormalizeMode mode)
    : seed_levels_(split_seed_volume(volume)),
      mode_(mode),
      max_radius_(volume.max_radius),
      height_(volume.height()),
      width_(volume.width()) {}

const Tensor& IsotropicKernelBank::seeds(int radius_index) const {
  if (radius_index < 2 || radius_index > max_radius_)
    throw ConfigError("radius index " + std::to_string(radius_index) + " outside [2," + std::to_string(max_radius_) + "]");
  return seed_levels_[static_cast<size_t>(radius_index - 2)];
}

Tensor IsotropicKernelBank::level_cells(int radius_index) const {
  const Tensor& s = seeds(radius_index);
  if (!s.all_finite())
    throw NumericError("non-finite kernel seeds at radius index " + std::to_string(radius_index));
  Tensor raw = seeds_to_raw_cells(s, radius_index);
  // Per-pixel softmax over the cell dimension.
  const int side = 2 * radius_index - 1;
  const int L = side * side;
  const std::int64_t P = static_cast<std::int64_t>(height_) * width_;
  double* rp = raw.data();
  if (mode_ == NormalizeMode::kSoftmaxAll) {
    for (std::int64_t p = 0; p < P; ++p) {
      double mx = -1e300;
      for (int l = 0; l < L; ++l) mx = std::max(mx, rp[l * P + p]);
      double z = 0.0;
      for (int l = 0; l < L; ++l) {
        const double e = std::exp(rp[l * P + p] - mx);
        rp[l * P + p] = e;
        z += e;
      }
      for (int l = 0; l < L; ++l) rp[l * P + p] /= z;
    }
  } else {
    const auto& disc = level_disc_cells(radius_index);
    for (std::int64_t p = 0; p < P; ++p) {
      double mx = -1e300;
      for (int l : disc) mx = std::max(mx, rp[l * P + p]);
      double z = 0.0;
      for (int l : disc) z += std::exp(rp[l * P + p] - mx);
      for (int l : disc) rp[l * P + p] = std::exp(rp[l * P + p] - mx) / z;
    }
  }
  return raw;
}

IsotropicKernel IsotropicKernelBank::kernel_at(int radius_index, int u, int v) const {
  const Tensor& s = seeds(radius_index);
  if (u < 0 || u >= height_ || v < 0 || v >= width_)
    throw ShapeError("kernel_at: pixel (" + std::to_string(u) + "," + std::to_string(v) + ") outside " +
                     std::to_string(height_) + "x" + std::to_string(width_));
  IsotropicKernel k;
  k.radius_index = radius_index;
  k.seed.resize(static_cast<size_t>(radius_index));
  const std::int64_t P = static_cast<std::int64_t>(height_) * width_;
  const std::int64_t p = static_cast<std::int64_t>(u) * width_ + v;
  for (int j = 0; j < radius_index; ++j) k.seed[static_cast<size_t>(j)] = s.data()[j * P + p];
  for (double v_ : k.seed)
    if (!std::isfinite(v_))
      throw NumericError("non-finite kernel seed at radius index " + std::to_string(radius_index) + ", pixel (" +
                         std::to_string(u) + "," + std::to_string(v) + ")");
  k.values = normalize_kernel(build_kernel(k.seed), mode_);
  return k;
}

IsotropicKernelBank synthesize_kernel_bank(const KernelSeedVolume& volume, NormalizeMode mode) {
  return IsotropicKernelBank(volume, mode);
}

Var synthesize_level_cells(const Var& level_seeds, int radius_index, NormalizeMode mode) {
  const auto& s = level_seeds->value.shape();
  if (s.size() != 3 || s[0] != radius_index)
    throw ShapeError("level seeds must be i x H x W with i=" + std::to_string(radius_index) + ", got " +
                     shape_str(level_seeds->value));
  if (!level_seeds->value.all_finite())
    throw NumericError("non-finite kernel seeds at radius index " + std::to_string(radius_index));

  const auto& rules = level_cell_rules(radius_index);
  Tensor raw = seeds_to_raw_cells(level_seeds->value, radius_index);
  const std::int64_t plane = static_cast<std::int64_t>(s[1]) * s[2];
  Var raw_var = make_op(std::move(raw), {level_seeds}, [level_seeds, radius_index, plane](Node& n) {
    if (!level_seeds->requires_grad) return;
    const auto& rules = level_cell_rules(radius_index);
    double* gs = level_seeds->ensure_grad().data();
    const double* g = n.grad.data();
    for (size_t cell = 0; cell < rules.size(); ++cell) {
      const CellRule& r = rules[cell];
      if (r.k0 < 0) continue;
      const double* gc = g + static_cast<std::int64_t>(cell) * plane;
      double* g0 = gs + static_cast<std::int64_t>(r.k0) * plane;
      if (r.k1 < 0) {
        for (std::int64_t p = 0; p < plane; ++p) g0[p] += gc[p];
      } else {
        double* g1 = gs + static_cast<std::int64_t>(r.k1) * plane;
        for (std::int64_t p = 0; p < plane; ++p) {
          g0[p] += r.w0 * gc[p];
          g1[p] += r.w1 * gc[p];
        }
      }
    }
  });
  const std::vector<int> subset =
      mode == NormalizeMode::kSoftmaxAll ? std::vector<int>{} : level_disc_cells(radius_index);
  return ops::softmax_channels(raw_var, subset);
}

std::vector<Var> synthesize_bank_cells(const Var& seed_volume, int max_radius, NormalizeMode mode) {
  const int expected = seed_channel_count(max_radius);
  if (seed_volume->value.ndim() != 3 || seed_volume->value.dim(0) != expected)
    throw ConfigError("kernel seed volume channel mismatch: expected M=" + std::to_string(expected) +
                      " for max radius " + std::to_string(max_radius) + ", got " +
                      std::to_string(seed_volume->value.dim(0)));
  std::vector<Var> levels;
  for (int i = 2; i <= max_radius; ++i) {
    Var level = ops::slice_channels(seed_volume, seed_channel_offset(i), seed_channel_offset(i) + i);
    levels.push_back(synthesize_level_cells(level, i, mode));
  }
  return levels;
}

}  // namespace dbk::kernels
