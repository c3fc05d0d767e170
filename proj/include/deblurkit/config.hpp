#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace dbk {

struct AblationFlags {
  bool no_deform = false;     // replace the deformation loss with plain Charbonnier
  bool no_cycle = false;      // drop the reverse deformation term
  bool no_mask = false;       // disable the calibration mask
  bool no_reblur = false;     // drop the reblur branch entirely
  bool no_isotropic = false;  // predict free-form per-level kernels instead
  bool no_wpn = false;        // reblur with the largest kernel level only
};

struct TrainingConfig {
  double alpha = 0.5;    // reblur loss trade-off
  double lambda = 0.35;  // calibration band half-width
  double epsilon = 1e-3;
  int m = 8;  // maximal kernel radius index
  int init_epochs = 15;
  int epochs = 100;
  double lr = 2e-5;
  int lr_halve_every = 60;
  int batch_size = 2;
  int patch_size = 512;
  std::uint64_t seed = 1;

  std::string model = "unet";
  int model_base_width = 64;
  int model_depth = 4;
  double dropout = 0.4;
  int kpn_width = 64;
  int wpn_width = 64;

  std::string estimator = "pyramidal";
  std::string normalization = "softmax_all";       // softmax_all | softmax_in_disc
  std::string reblur_reduction = "element_mean";   // element_mean | global
  AblationFlags ablations;

  std::string data_root;
  std::string out_dir = "runs/default";
  int checkpoint_every = 10;
  bool deterministic = true;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainingConfig from_json(const nlohmann::json& j);
  static TrainingConfig load(const std::filesystem::path& path);
  std::uint64_t hash() const;       // stable across processes
  std::string hash_hex() const;
};

}  // namespace dbk
