#include "deblurkit/reblur.hpp"

#include "deblurkit/common.hpp"

namespace dbk::reblur {

LossReduction loss_reduction_from_string(const std::string& name) {
  if (name == "element_mean") return LossReduction::kElementMean;
  if (name == "global") return LossReduction::kGlobal;
  throw ConfigError("unknown reblur loss reduction '" + name + "' (element_mean | global)");
}

std::string to_string(LossReduction mode) {
  return mode == LossReduction::kElementMean ? "element_mean" : "global";
}

Var apply_kernel_level(const Var& image, const Var& cells, int radius_index) {
  return ops::apply_cells(image, cells, radius_index);
}

Tensor apply_kernel_level(const Tensor& image, const Tensor& cells, int radius_index) {
  return ops::apply_cells(constant(image), constant(cells), radius_index)->value;
}

std::vector<Var> assemble_reblur_stack(const Var& deblurred, const std::vector<Var>& bank_cells) {
  std::vector<Var> stack;
  stack.push_back(deblurred);  // level 1 is the prediction itself
  int radius_index = 2;
  for (const auto& cells : bank_cells) {
    stack.push_back(apply_kernel_level(deblurred, cells, radius_index));
    ++radius_index;
  }
  return stack;
}

ReblurStack assemble_reblur_stack(const Tensor& deblurred, const kernels::IsotropicKernelBank& bank) {
  if (bank.height() != deblurred.dim(1) || bank.width() != deblurred.dim(2))
    throw ShapeError("reblur: kernel bank extent " + std::to_string(bank.height()) + "x" +
                     std::to_string(bank.width()) + " does not match image " + shape_str(deblurred));
  ReblurStack stack;
  stack.levels.push_back(deblurred);  // shallow: shares storage with the input
  for (int i = 2; i <= bank.max_radius(); ++i)
    stack.levels.push_back(apply_kernel_level(deblurred, bank.level_cells(i), i));
  return stack;
}

Var normalize_weights(const Var& raw) {
  if (!raw->value.all_finite()) throw NumericError("non-finite raw weight map");
  return ops::softmax_channels(raw);
}

WeightVolume normalize_weights(const Tensor& raw) {
  return WeightVolume{normalize_weights(constant(raw))->value};
}

Var combine(const std::vector<Var>& stack, const Var& weights) { return ops::combine_levels(stack, weights); }

Tensor combine(const ReblurStack& stack, const WeightVolume& weights) {
  std::vector<Var> vars;
  vars.reserve(stack.levels.size());
  for (const auto& t : stack.levels) vars.push_back(constant(t));
  return ops::combine_levels(vars, constant(weights.data))->value;
}

Var reblur_loss(const Var& reblurred, const Var& blurry, double eps, LossReduction mode) {
  if (!reblurred->value.same_shape(blurry->value))
    throw ShapeError("reblur_loss: " + shape_str(reblurred->value) + " vs " + shape_str(blurry->value));
  if (eps <= 0.0) throw ConfigError("reblur_loss: eps must be positive");
  Var r = ops::sub(reblurred, blurry);
  return mode == LossReduction::kElementMean ? ops::charbonnier_mean(r, eps, Tensor())
                                             : ops::charbonnier_global(r, eps);
}

double reblur_loss(const Tensor& reblurred, const Tensor& blurry, double eps, LossReduction mode) {
  return reblur_loss(constant(reblurred), constant(blurry), eps, mode)->value[0];
}

}  // namespace dbk::reblur
