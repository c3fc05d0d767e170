#include "deblurkit/deformation.hpp"

#include <cmath>
#include <iostream>

#include "deblurkit/common.hpp"

namespace dbk::deform {

FlowField::FlowField(Tensor d) : data(std::move(d)) {
  if (data.ndim() != 3 || data.dim(0) != 2)
    throw ShapeError("flow field must be 2 x H x W, got " + shape_str(data));
  if (!data.all_finite()) throw NumericError("flow field contains non-finite values");
}

FlowField FlowField::zeros(int height, int width) { return FlowField(Tensor({2, height, width})); }

FlowField FlowField::constant(int height, int width, double dx, double dy) {
  Tensor t({2, height, width});
  const std::int64_t plane = static_cast<std::int64_t>(height) * width;
  double* p = t.data();
  std::fill(p, p + plane, dx);
  std::fill(p + plane, p + 2 * plane, dy);
  return FlowField(std::move(t));
}

Tensor FlowField::magnitude() const {
  const std::int64_t plane = static_cast<std::int64_t>(height()) * width();
  Tensor m({height(), width()});
  const double* p = data.data();
  double* mp = m.data();
  for (std::int64_t i = 0; i < plane; ++i) mp[i] = std::hypot(p[i], p[plane + i]);
  return m;
}

double FlowField::mean_magnitude() const {
  Tensor m = magnitude();
  return m.sum() / static_cast<double>(m.size());
}

std::int64_t CalibrationMask::count() const {
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < data.size(); ++i) n += data[i] != 0.0 ? 1 : 0;
  return n;
}

CalibrationMask calibration_mask(const FlowField& flow, double lambda) {
  if (lambda <= 0.0 || lambda >= 1.0)
    throw ConfigError("calibration band half-width must lie in (0,1), got " + std::to_string(lambda));
  CalibrationMask mask;
  mask.lambda = lambda;
  mask.data = Tensor({1, flow.height(), flow.width()});
  Tensor mag = flow.magnitude();
  const double mean = mag.sum() / static_cast<double>(mag.size());
  double* mp = mask.data.data();
  if (mean < kAlignedFlowThreshold) {
    mask.data.fill(1.0);  // effectively aligned pair
    return mask;
  }
  const double lo = (1.0 - lambda) * mean;
  const double hi = (1.0 + lambda) * mean;
  const double* gp = mag.data();
  for (std::int64_t i = 0; i < mag.size(); ++i) mp[i] = (gp[i] > lo && gp[i] < hi) ? 1.0 : 0.0;
  return mask;
}

Var warp(const Var& image, const Var& flow) { return ops::warp_bilinear(image, flow); }

Tensor warp(const Tensor& image, const FlowField& flow) {
  return ops::warp_bilinear(constant(image), constant(flow.data))->value;
}

Var adaptive_deblur_loss(const Var& deblurred, const Tensor& sharp_gt, const FlowField& flow_fwd,
                         const FlowField& flow_bwd, double lambda, double eps, bool cycle, bool use_mask,
                         AdaptiveLossParts* parts) {
  if (!deblurred->value.same_shape(sharp_gt))
    throw ShapeError("adaptive_deblur_loss: prediction " + shape_str(deblurred->value) + " vs ground truth " +
                     shape_str(sharp_gt));
  const int h = deblurred->value.dim(1), w = deblurred->value.dim(2);
  if (flow_fwd.height() != h || flow_fwd.width() != w)
    throw ShapeError("adaptive_deblur_loss: forward flow extent mismatch");

  auto band_mask = [&](const FlowField& f) -> Tensor {
    if (!use_mask) return Tensor();  // undefined -> unmasked reduction
    CalibrationMask m = calibration_mask(f, lambda);
    if (m.count() == 0)
      std::cerr << "[deblurkit] warning: calibration mask is empty; deformation term degrades to its floor\n";
    return m.data;
  };

  // Ground truth deformed toward the prediction; constant w.r.t. the graph.
  Tensor warped_gt = warp(sharp_gt, flow_fwd);
  Var fwd = ops::charbonnier_mean(ops::sub(constant(warped_gt), deblurred), eps, band_mask(flow_fwd));
  if (parts) {
    parts->forward_term = fwd->value[0];
    parts->backward_term = 0.0;
    parts->cycle_active = cycle;
  }
  if (!cycle) return fwd;

  if (flow_bwd.height() != h || flow_bwd.width() != w)
    throw ShapeError("adaptive_deblur_loss: backward flow extent mismatch");
  // Reverse direction: prediction deformed toward the ground truth. The warp
  // is differentiable in the image argument, so gradients still reach the
  // prediction.
  Var warped_pred = warp(deblurred, constant(flow_bwd.data));
  Var bwd = ops::charbonnier_mean(ops::sub(warped_pred, constant(sharp_gt)), eps, band_mask(flow_bwd));
  if (parts) parts->backward_term = bwd->value[0];
  return ops::add(fwd, bwd);
}

}  // namespace dbk::deform
