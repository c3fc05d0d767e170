#pragma once

#include <string>
#include <vector>

#include "deblurkit/autograd.hpp"
#include "deblurkit/kernel_synthesis.hpp"
#include "deblurkit/tensor.hpp"

namespace dbk::reblur {

// The reblur operator: the prediction is blurred once per kernel level and
// the stack is collapsed with per-pixel weights, yielding an image that can
// be compared against the blurry input.

// levels[0] is the unblurred prediction itself (shared storage, not a copy);
// level k >= 1 is the prediction blurred with the radius-(k+1) kernels.
struct ReblurStack {
  std::vector<Tensor> levels;
};

struct WeightVolume {
  Tensor data;  // m x H x W, per-pixel rows sum to 1
};

enum class LossReduction {
  kElementMean,  // mean of per-element sqrt(r^2 + eps^2)
  kGlobal        // single scalar sqrt(sum r^2 + eps^2)
};
LossReduction loss_reduction_from_string(const std::string& name);
std::string to_string(LossReduction mode);

// Plain (inference/debug) path.
Tensor apply_kernel_level(const Tensor& image, const Tensor& cells, int radius_index);
ReblurStack assemble_reblur_stack(const Tensor& deblurred, const kernels::IsotropicKernelBank& bank);
WeightVolume normalize_weights(const Tensor& raw);
Tensor combine(const ReblurStack& stack, const WeightVolume& weights);
double reblur_loss(const Tensor& reblurred, const Tensor& blurry, double eps, LossReduction mode);

// Differentiable path used by training.
Var apply_kernel_level(const Var& image, const Var& cells, int radius_index);
std::vector<Var> assemble_reblur_stack(const Var& deblurred, const std::vector<Var>& bank_cells);
Var normalize_weights(const Var& raw);
Var combine(const std::vector<Var>& stack, const Var& weights);
Var reblur_loss(const Var& reblurred, const Var& blurry, double eps, LossReduction mode);

}  // namespace dbk::reblur
