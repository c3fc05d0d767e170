#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "deblurkit/config.hpp"
#include "deblurkit/data_toolkit.hpp"
#include "deblurkit/deformation.hpp"
#include "deblurkit/flow.hpp"
#include "deblurkit/kernel_synthesis.hpp"
#include "deblurkit/networks.hpp"
#include "deblurkit/reblur.hpp"

namespace dbk::train {

double lr_schedule(int epoch, double initial_lr, int halve_every);

// Which pair the flows are estimated between: (sharp, blurry) during the
// warm-up epochs while the prediction is still uninformative, then
// (sharp, prediction).
enum class FlowInputs { kSharpAndBlurry, kSharpAndDeblurred };
FlowInputs flow_source_policy(int epoch, int init_epochs);

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  // Applies one update from the accumulated gradients, then zeroes them.
  void step(const std::vector<nets::ParamRef>& params, double lr);
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::map<std::string, std::pair<Tensor, Tensor>>& state() { return state_; }

 private:
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> state_;  // name -> (m, v)
};

void zero_grads(const std::vector<nets::ParamRef>& params);

struct Sample {
  Tensor blurry;
  Tensor sharp;
  std::string id;
  bool cacheable = false;  // whole-image sample; init-stage flows may be cached
};

struct StepLosses {
  double deblur = 0.0;
  double reblur = 0.0;
  double total = 0.0;
  double deform_forward = 0.0;
  double deform_backward = 0.0;
};

struct EpochLog {
  int epoch = 0;
  double deblur = 0.0;
  double reblur = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

class Trainer {
 public:
  explicit Trainer(TrainingConfig cfg);

  // Builds the batch graph, backpropagates, and leaves gradients in place.
  StepLosses forward_backward(const std::vector<Sample>& batch, int epoch, std::uint64_t step_index);
  // Optimizer update (and gradient reset) at the scheduled learning rate.
  void apply_update(int epoch);
  StepLosses train_step(const std::vector<Sample>& batch, int epoch, std::uint64_t step_index);

  // Full loop over cfg.data_root; writes loss_log.csv, config.json and
  // checkpoints under cfg.out_dir. Returns the per-epoch log.
  std::vector<EpochLog> train();

  Tensor infer(const Tensor& blurry);

  void save_checkpoint(const std::filesystem::path& path, int next_epoch);
  // Restores parameters and optimizer state; refuses a config-hash mismatch
  // unless force. Returns the epoch to resume from.
  int load_checkpoint(const std::filesystem::path& path, bool force = false);

  const TrainingConfig& config() const { return cfg_; }
  nets::DeblurNetwork& model() { return *model_; }
  const nets::PredictionBody& kpn() const { return kpn_; }
  const nets::PredictionBody& wpn() const { return wpn_; }
  std::vector<nets::ParamRef> model_parameters() const { return model_->parameters(); }
  std::vector<nets::ParamRef> kpn_parameters() const { return kpn_.parameters("kpn"); }
  std::vector<nets::ParamRef> wpn_parameters() const { return wpn_.parameters("wpn"); }
  std::vector<nets::ParamRef> trainable_parameters() const;
  flow::FlowEstimator& estimator() { return *estimator_; }

  // Reblur branch on explicit inputs; exposed for inspection and tooling.
  Var reblur_branch(const Var& prediction, const Var& blurry, Var* reblurred_out = nullptr);

 private:
  friend struct TrainerTestAccess;
  std::pair<deform::FlowField, deform::FlowField> flows_for(const Sample& sample, const Tensor& prediction,
                                                            int epoch);

  TrainingConfig cfg_;
  kernels::NormalizeMode normalize_mode_;
  reblur::LossReduction reduction_;
  std::unique_ptr<nets::DeblurNetwork> model_;
  nets::PredictionBody kpn_, wpn_;
  std::unique_ptr<flow::FlowEstimator> estimator_;
  Adam opt_;
  std::map<std::string, std::pair<deform::FlowField, deform::FlowField>> init_flow_cache_;
  int start_epoch_ = 0;
};

// Single forward pass in eval mode.
Tensor infer_image(nets::DeblurNetwork& model, const Tensor& blurry);

// Tiled inference for images that exceed the memory budget. Each tile's outer
// `margin` is discarded (except where it touches the image border), so with
// margin at least the network's receptive-field radius the result matches
// whole-image inference on interior pixels.
Tensor infer_tiled(nets::DeblurNetwork& model, const Tensor& blurry, int tile, int margin);

}  // namespace dbk::train
