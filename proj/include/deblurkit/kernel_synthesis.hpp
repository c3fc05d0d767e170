#pragma once

#include <span>
#include <string>
#include <vector>

#include "deblurkit/autograd.hpp"
#include "deblurkit/tensor.hpp"

namespace dbk::kernels {

// Kernel seeds are radial profiles: a length-i vector [a_0 .. a_{i-1}] turns
// into a (2i-1)x(2i-1) grid by polar interpolation. Cells at integer radius
// rho <= i-1 copy a_rho, cells beyond the disc are zero, everything else is a
// linear blend of the two enclosing radii. Softmax normalization then makes
// the grid a proper kernel.

// Total seed channels for maximal radius index m: sum_{i=2..m} i.
int seed_channel_count(int max_radius);
// Channel offset of level i inside the packed volume (ascending i, contiguous).
int seed_channel_offset(int radius_index);

enum class NormalizeMode {
  kSoftmaxAll,    // softmax over every cell of the grid; all cells end up > 0
  kSoftmaxInDisc  // softmax over cells with rho <= i-1; the rest stay exactly 0
};
NormalizeMode normalize_mode_from_string(const std::string& name);
std::string to_string(NormalizeMode mode);

struct KernelSeedVolume {
  Tensor data;     // M x H x W
  int max_radius;  // m >= 2

  KernelSeedVolume(Tensor data, int max_radius);  // validates the channel count
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

struct IsotropicKernel {
  int radius_index = 0;
  Tensor values;             // (2i-1) x (2i-1), normalized
  std::vector<double> seed;  // [a_0 .. a_{i-1}]
  int side() const { return 2 * radius_index - 1; }
};

// Per-cell interpolation rule: value = w0 * seed[k0] + w1 * seed[k1].
// k0 < 0 marks an out-of-disc cell (raw value 0). k1 < 0 marks a single-tap
// (integer radius) cell.
struct CellRule {
  int k0 = -1;
  double w0 = 0.0;
  int k1 = -1;
  double w1 = 0.0;
};

// Cached per radius index; cells are listed row-major over dy,dx offsets.
const std::vector<CellRule>& level_cell_rules(int radius_index);
// Indices of cells inside the disc (rho <= i-1).
const std::vector<int>& level_disc_cells(int radius_index);

// Splits the packed volume into per-level seed maps (level i: i x H x W).
std::vector<Tensor> split_seed_volume(const KernelSeedVolume& volume);

// Raw (pre-normalization) kernel grid from one seed; radius index = seed size.
Tensor build_kernel(std::span<const double> seed);

Tensor normalize_kernel(const Tensor& raw, NormalizeMode mode);

// Per-pixel kernels for every level, materialized lazily per level so a full
// training-resolution volume never has to hold all grids at once.
class IsotropicKernelBank {
 public:
  IsotropicKernelBank(const KernelSeedVolume& volume, NormalizeMode mode);

  int max_radius() const { return max_radius_; }
  int height() const { return height_; }
  int width() const { return width_; }
  NormalizeMode mode() const { return mode_; }

  const Tensor& seeds(int radius_index) const;
  // Normalized cells for one level, (2i-1)^2 x H x W.
  Tensor level_cells(int radius_index) const;
  IsotropicKernel kernel_at(int radius_index, int u, int v) const;

 private:
  std::vector<Tensor> seed_levels_;  // index 0 -> radius index 2
  NormalizeMode mode_;
  int max_radius_;
  int height_;
  int width_;
};

IsotropicKernelBank synthesize_kernel_bank(const KernelSeedVolume& volume, NormalizeMode mode);

// Differentiable path used by training: seeds (i x H x W) -> normalized cells.
Var synthesize_level_cells(const Var& level_seeds, int radius_index, NormalizeMode mode);
// All levels from a packed M x H x W seed volume.
std::vector<Var> synthesize_bank_cells(const Var& seed_volume, int max_radius, NormalizeMode mode);

}  // namespace dbk::kernels
