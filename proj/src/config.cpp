#include "deblurkit/config.hpp"

#include <fstream>

#include "deblurkit/common.hpp"

using nlohmann::json;

namespace dbk {

void TrainingConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string("config: ") + name + " must be positive");
  };
  positive(alpha + 1.0, "alpha (>= 0 required)");  // alpha may be zero
  if (alpha < 0.0) throw ConfigError("config: alpha must be >= 0");
  if (lambda <= 0.0 || lambda >= 1.0) throw ConfigError("config: lambda must lie in (0,1)");
  positive(epsilon, "epsilon");
  if (m < 2) throw ConfigError("config: m must be >= 2");
  if (init_epochs < 0) throw ConfigError("config: init_epochs must be >= 0");
  if (epochs <= 0) throw ConfigError("config: epochs must be positive");
  positive(lr, "lr");
  if (lr_halve_every <= 0) throw ConfigError("config: lr_halve_every must be positive");
  if (batch_size <= 0) throw ConfigError("config: batch_size must be positive");
  if (patch_size <= 0) throw ConfigError("config: patch_size must be positive");
  if (model_base_width <= 0 || model_depth <= 0) throw ConfigError("config: model dimensions must be positive");
  if (kpn_width <= 0 || wpn_width <= 0) throw ConfigError("config: prediction body widths must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("config: dropout must lie in [0,1)");
  if (checkpoint_every <= 0) throw ConfigError("config: checkpoint_every must be positive");
}

json TrainingConfig::to_json() const {
  json j;
  j["alpha"] = alpha;
  j["lambda"] = lambda;
  j["epsilon"] = epsilon;
  j["m"] = m;
  j["init_epochs"] = init_epochs;
  j["epochs"] = epochs;
  j["lr"] = lr;
  j["lr_halve_every"] = lr_halve_every;
  j["batch_size"] = batch_size;
  j["patch_size"] = patch_size;
  j["seed"] = seed;
  j["model"] = model;
  j["model_base_width"] = model_base_width;
  j["model_depth"] = model_depth;
  j["dropout"] = dropout;
  j["kpn_width"] = kpn_width;
  j["wpn_width"] = wpn_width;
  j["estimator"] = estimator;
  j["normalization"] = normalization;
  j["reblur_reduction"] = reblur_reduction;
  j["ablations"] = {{"no_deform", ablations.no_deform}, {"no_cycle", ablations.no_cycle},
                    {"no_mask", ablations.no_mask},     {"no_reblur", ablations.no_reblur},
                    {"no_isotropic", ablations.no_isotropic}, {"no_wpn", ablations.no_wpn}};
  j["data_root"] = data_root;
  j["out_dir"] = out_dir;
  j["checkpoint_every"] = checkpoint_every;
  j["deterministic"] = deterministic;
  return j;
}

TrainingConfig TrainingConfig::from_json(const json& j) {
  TrainingConfig c;
  auto get = [&j](const char* key, auto& dst) {
    if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
  };
  get("alpha", c.alpha);
  get("lambda", c.lambda);
  get("epsilon", c.epsilon);
  get("m", c.m);
  get("init_epochs", c.init_epochs);
  get("epochs", c.epochs);
  get("lr", c.lr);
  get("lr_halve_every", c.lr_halve_every);
  get("batch_size", c.batch_size);
  get("patch_size", c.patch_size);
  get("seed", c.seed);
  get("model", c.model);
  get("model_base_width", c.model_base_width);
  get("model_depth", c.model_depth);
  get("dropout", c.dropout);
  get("kpn_width", c.kpn_width);
  get("wpn_width", c.wpn_width);
  get("estimator", c.estimator);
  get("normalization", c.normalization);
  get("reblur_reduction", c.reblur_reduction);
  if (j.contains("ablations")) {
    const json& a = j.at("ablations");
    auto getf = [&a](const char* key, bool& dst) {
      if (a.contains(key)) dst = a.at(key).get<bool>();
    };
    getf("no_deform", c.ablations.no_deform);
    getf("no_cycle", c.ablations.no_cycle);
    getf("no_mask", c.ablations.no_mask);
    getf("no_reblur", c.ablations.no_reblur);
    getf("no_isotropic", c.ablations.no_isotropic);
    getf("no_wpn", c.ablations.no_wpn);
  }
  get("data_root", c.data_root);
  get("out_dir", c.out_dir);
  get("checkpoint_every", c.checkpoint_every);
  get("deterministic", c.deterministic);
  c.validate();
  return c;
}

TrainingConfig TrainingConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::uint64_t TrainingConfig::hash() const { return fnv1a(to_json().dump()); }

std::string TrainingConfig::hash_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash()));
  return buf;
}

}  // namespace dbk
