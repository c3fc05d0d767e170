#pragma once

#include "deblurkit/autograd.hpp"
#include "deblurkit/tensor.hpp"

namespace dbk::deform {

// Dense displacement field on the target grid: channel 0 is dx, channel 1 dy,
// in pixels. warp(image, flow)(u,v) samples image at (v + dx, u + dy), so a
// flow estimated from (source, target) satisfies warp(source, flow) ~ target.
struct FlowField {
  Tensor data;  // 2 x H x W

  FlowField() = default;
  explicit FlowField(Tensor d);
  static FlowField zeros(int height, int width);
  static FlowField constant(int height, int width, double dx, double dy);

  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
  Tensor magnitude() const;  // H x W map of per-pixel L2 norms
  double mean_magnitude() const;
};

// Binary band mask over the flow magnitude: 1 where the magnitude lies
// strictly inside ((1-lambda), (1+lambda)) times the mean magnitude.
struct CalibrationMask {
  Tensor data;  // 1 x H x W, values in {0,1}
  double lambda = 0.0;

  std::int64_t count() const;
};

// Mean magnitudes below this are treated as "already aligned": the band test
// would be empty or meaningless, so the mask degenerates to all ones.
inline constexpr double kAlignedFlowThreshold = 0.05;

CalibrationMask calibration_mask(const FlowField& flow, double lambda);

// Backward bilinear warp with border clamp; differentiable form plus a plain
// convenience wrapper.
Var warp(const Var& image, const Var& flow);
Tensor warp(const Tensor& image, const FlowField& flow);

struct AdaptiveLossParts {
  double forward_term = 0.0;
  double backward_term = 0.0;
  bool cycle_active = false;
};

// Masked Charbonnier between the deformed ground truth and the prediction,
// plus (optionally) the reverse-direction term. Gradients reach only the
// prediction; ground truth and flows are inputs. An all-zero mask degrades
// that term to the constant eps with a logged warning.
Var adaptive_deblur_loss(const Var& deblurred, const Tensor& sharp_gt, const FlowField& flow_fwd,
                         const FlowField& flow_bwd, double lambda, double eps, bool cycle, bool use_mask,
                         AdaptiveLossParts* parts = nullptr);

}  // namespace dbk::deform
