#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "deblurkit/tensor.hpp"

namespace dbk::data {

struct PairRecord {
  std::filesystem::path blurry_path;
  std::filesystem::path sharp_path;
  std::string identifier;
  std::string split = "train";  // train | test | val
};

// Loads a paired directory: root/source (blurry) and root/target (sharp) with
// matching filenames, plus an optional root/splits.json manifest of the form
// {"train": [ids], "test": [ids], "val": [ids]}. Records are sorted by id and
// validated (both files exist, headers decode, extents match).
std::vector<PairRecord> load_pair_dataset(const std::filesystem::path& root);

struct MisalignmentTransform {
  enum class Kind { kShift, kZoom, kCompose };
  Kind kind = Kind::kShift;
  double dx = 0.0, dy = 0.0;  // resampling offset in pixels
  double scale = 1.0;         // zoom factor about the image center

  static MisalignmentTransform shift(double dx, double dy);
  static MisalignmentTransform zoom(double scale);
  static MisalignmentTransform compose(double dx, double dy, double scale);
  void validate() const;  // |dx|,|dy| <= 16, scale in [0.9, 1.1]
};

// Bilinear resampling under the transform, replicate fill. For a pure shift
// this equals warping with the constant flow (dx, dy), so the transform is
// directly the ground-truth flow of the generated pair.
Tensor apply_misalignment(const Tensor& image, const MisalignmentTransform& t);

// Per-pixel normalized-disc blur; radius_map values must lie in [0, 7] and
// are rounded to the nearest integer radius. Gather semantics with replicate
// padding. Returns (blurry, sharp).
std::pair<Tensor, Tensor> synthesize_defocus_pair(const Tensor& sharp, const Tensor& radius_map);
Tensor disc_blur(const Tensor& image, const Tensor& radius_map);

struct PatchPair {
  Tensor blurry, sharp;
  int y = 0, x = 0;
};
std::vector<PatchPair> extract_patches(const Tensor& blurry, const Tensor& sharp, int size, int stride);

// Procedural texture with both structure (shapes, gradients) and fine detail,
// suitable for flow estimation tests.
Tensor procedural_texture(int height, int width, std::mt19937_64& rng);

Tensor make_radius_map(const std::string& kind, int height, int width, double max_radius, std::mt19937_64& rng);

struct SynthConfig {
  int count = 50;
  int test_count = 0;  // last test_count pairs go to the test split
  int width = 64;
  int height = 64;
  std::uint64_t seed = 1;
  std::string radius_kind = "ramp";  // constant | ramp | smooth
  double radius_max = 2.0;
  std::string misalign_kind = "shift";  // shift | zoom | compose | random_shift | none
  double shift_dx = 4.0, shift_dy = 0.0;
  double zoom = 1.0;
  double random_shift_max = 4.0;
};

struct GeneratedPair {
  std::string id;
  MisalignmentTransform transform;
};

// Writes source/ (blurry), target/ (misaligned sharp), splits.json and
// manifest.json under out_root. Per-image seeding makes the output
// byte-identical across reruns with the same config.
std::vector<GeneratedPair> generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_root);

}  // namespace dbk::data
