#include "deblurkit/flow.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

#include "deblurkit/common.hpp"

namespace dbk::flow {

namespace {

std::mutex g_registry_mutex;
std::map<std::string, EstimatorFactory>& registry() {
  static std::map<std::string, EstimatorFactory> r = {
      {"pyramidal", [] { return std::make_unique<PyramidalFlowEstimator>(); }},
      {"zero", [] { return std::make_unique<ZeroFlowEstimator>(); }},
  };
  return r;
}

}  // namespace

void register_estimator(const std::string& name, EstimatorFactory factory) {
  std::scoped_lock lock(g_registry_mutex);
  registry()[name] = std::move(factory);
}

std::unique_ptr<FlowEstimator> make_estimator(const std::string& name) {
  std::scoped_lock lock(g_registry_mutex);
  auto it = registry().find(name);
  if (it == registry().end()) {
    std::string known;
    for (const auto& [k, _] : registry()) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("unknown flow estimator '" + name + "' (registered: " + known + ")");
  }
  return it->second();
}

std::vector<std::string> registered_estimators() {
  std::scoped_lock lock(g_registry_mutex);
  std::vector<std::string> names;
  for (const auto& [k, _] : registry()) names.push_back(k);
  return names;
}

deform::FlowField estimate_flow(const Tensor& source, const Tensor& target, FlowEstimator& estimator) {
  if (!source.same_shape(target))
    throw ShapeError("estimate_flow: source " + shape_str(source) + " vs target " + shape_str(target));
  try {
    deform::FlowField f = estimator.estimate(source, target);
    if (f.height() != source.dim(1) || f.width() != source.dim(2))
      throw FlowEstimationError("estimator returned wrong extent");
    return f;
  } catch (const FlowEstimationError&) {
    throw;
  } catch (const std::exception& e) {
    throw FlowEstimationError("flow estimator '" + estimator.name() + "' failed: " + e.what());
  }
}

Tensor luminance(const Tensor& image) {
  if (image.ndim() != 3) throw ShapeError("luminance expects C x H x W, got " + shape_str(image));
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor gray({H, W});
  const double* ip = image.data();
  double* gp = gray.data();
  if (C == 1) {
    std::copy(ip, ip + plane, gp);
  } else if (C == 3) {
    for (std::int64_t i = 0; i < plane; ++i)
      gp[i] = 0.299 * ip[i] + 0.587 * ip[plane + i] + 0.114 * ip[2 * plane + i];
  } else {
    throw ShapeError("luminance expects 1 or 3 channels, got " + std::to_string(C));
  }
  return gray;
}

Tensor downsample2(const Tensor& gray) {
  const int H = gray.dim(0), W = gray.dim(1), h = H / 2, w = W / 2;
  Tensor out({h, w});
  const double* g = gray.data();
  double* o = out.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      o[static_cast<std::int64_t>(y) * w + x] =
          0.25 * (g[static_cast<std::int64_t>(2 * y) * W + 2 * x] + g[static_cast<std::int64_t>(2 * y) * W + 2 * x + 1] +
                  g[static_cast<std::int64_t>(2 * y + 1) * W + 2 * x] +
                  g[static_cast<std::int64_t>(2 * y + 1) * W + 2 * x + 1]);
  return out;
}

namespace {

// Separable filter with replicate borders; taps must be odd-length.
Tensor separable(const Tensor& src, const std::vector<double>& taps) {
  const int H = src.dim(0), W = src.dim(1);
  const int r = static_cast<int>(taps.size()) / 2;
  Tensor tmp({H, W}), out({H, W});
  const double* s = src.data();
  double* t = tmp.data();
  for (int y = 0; y < H; ++y) {
    const double* row = s + static_cast<std::int64_t>(y) * W;
    double* trow = t + static_cast<std::int64_t>(y) * W;
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k) acc += taps[static_cast<size_t>(k + r)] * row[std::clamp(x + k, 0, W - 1)];
      trow[x] = acc;
    }
  }
  double* o = out.data();
  for (int y = 0; y < H; ++y) {
    double* orow = o + static_cast<std::int64_t>(y) * W;
    for (int x = 0; x < W; ++x) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k)
        acc += taps[static_cast<size_t>(k + r)] * t[static_cast<std::int64_t>(std::clamp(y + k, 0, H - 1)) * W + x];
      orow[x] = acc;
    }
  }
  return out;
}

// Box sum over a (2r+1)^2 window with replicate-style edge handling via
// clamped prefix sums.
Tensor box_sum(const Tensor& src, int r) {
  const int H = src.dim(0), W = src.dim(1);
  Tensor row_acc({H, W}), out({H, W});
  const double* s = src.data();
  double* ra = row_acc.data();
  for (int y = 0; y < H; ++y) {
    const double* row = s + static_cast<std::int64_t>(y) * W;
    double* arow = ra + static_cast<std::int64_t>(y) * W;
    double acc = 0.0;
    for (int x = -r; x <= r; ++x) acc += row[std::clamp(x, 0, W - 1)];
    arow[0] = acc;
    for (int x = 1; x < W; ++x) {
      acc += row[std::clamp(x + r, 0, W - 1)] - row[std::clamp(x - r - 1, 0, W - 1)];
      arow[x] = acc;
    }
  }
  double* o = out.data();
  for (int x = 0; x < W; ++x) {
    double acc = 0.0;
    for (int y = -r; y <= r; ++y) acc += ra[static_cast<std::int64_t>(std::clamp(y, 0, H - 1)) * W + x];
    o[x] = acc;
    for (int y = 1; y < H; ++y) {
      acc += ra[static_cast<std::int64_t>(std::clamp(y + r, 0, H - 1)) * W + x] -
             ra[static_cast<std::int64_t>(std::clamp(y - r - 1, 0, H - 1)) * W + x];
      o[static_cast<std::int64_t>(y) * W + x] = acc;
    }
  }
  return out;
}

Tensor bilinear_sample_gray(const Tensor& src, const Tensor& fx, const Tensor& fy) {
  const int H = src.dim(0), W = src.dim(1);
  Tensor out({H, W});
  const double* s = src.data();
  const double* fxp = fx.data();
  const double* fyp = fy.data();
  double* o = out.data();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::int64_t p = static_cast<std::int64_t>(y) * W + x;
      const double xs = std::clamp(x + fxp[p], 0.0, static_cast<double>(W - 1));
      const double ys = std::clamp(y + fyp[p], 0.0, static_cast<double>(H - 1));
      const int x0 = static_cast<int>(xs), y0 = static_cast<int>(ys);
      const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const double ax = xs - x0, ay = ys - y0;
      const double top = s[static_cast<std::int64_t>(y0) * W + x0] * (1 - ax) + s[static_cast<std::int64_t>(y0) * W + x1] * ax;
      const double bot = s[static_cast<std::int64_t>(y1) * W + x0] * (1 - ax) + s[static_cast<std::int64_t>(y1) * W + x1] * ax;
      o[p] = top * (1 - ay) + bot * ay;
    }
  return out;
}

void central_gradients(const Tensor& g, Tensor& gx, Tensor& gy) {
  const int H = g.dim(0), W = g.dim(1);
  const double* s = g.data();
  double* px = gx.data();
  double* py = gy.data();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::int64_t p = static_cast<std::int64_t>(y) * W + x;
      px[p] = 0.5 * (s[static_cast<std::int64_t>(y) * W + std::min(x + 1, W - 1)] -
                     s[static_cast<std::int64_t>(y) * W + std::max(x - 1, 0)]);
      py[p] = 0.5 * (s[static_cast<std::int64_t>(std::min(y + 1, H - 1)) * W + x] -
                     s[static_cast<std::int64_t>(std::max(y - 1, 0)) * W + x]);
    }
}

// Bilinear upsample of one flow component to (H, W), scaling values by the
// extent ratio.
Tensor upsample_component(const Tensor& c, int H, int W, double value_scale) {
  const int h = c.dim(0), w = c.dim(1);
  Tensor out({H, W});
  const double* s = c.data();
  double* o = out.data();
  const double sy = static_cast<double>(h) / H;
  const double sx = static_cast<double>(w) / W;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double yc = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
      const double xc = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(xc), y0 = static_cast<int>(yc);
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double ax = xc - x0, ay = yc - y0;
      const double top = s[static_cast<std::int64_t>(y0) * w + x0] * (1 - ax) + s[static_cast<std::int64_t>(y0) * w + x1] * ax;
      const double bot = s[static_cast<std::int64_t>(y1) * w + x0] * (1 - ax) + s[static_cast<std::int64_t>(y1) * w + x1] * ax;
      o[static_cast<std::int64_t>(y) * W + x] = value_scale * (top * (1 - ay) + bot * ay);
    }
  return out;
}

}  // namespace

Tensor gaussian5(const Tensor& gray) { return separable(gray, {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16}); }

deform::FlowField ZeroFlowEstimator::estimate(const Tensor& source, const Tensor& target) {
  (void)target;
  return deform::FlowField::zeros(source.dim(1), source.dim(2));
}

deform::FlowField PyramidalFlowEstimator::estimate(const Tensor& source, const Tensor& target) {
  if (!source.same_shape(target))
    throw ShapeError("flow: source " + shape_str(source) + " vs target " + shape_str(target));

  std::vector<Tensor> src_pyr{gaussian5(luminance(source))};
  std::vector<Tensor> tgt_pyr{gaussian5(luminance(target))};
  while (static_cast<int>(src_pyr.size()) < opts_.max_levels) {
    const Tensor& prev = src_pyr.back();
    if (std::min(prev.dim(0), prev.dim(1)) / 2 < opts_.min_extent) break;
    src_pyr.push_back(gaussian5(downsample2(prev)));
    tgt_pyr.push_back(gaussian5(downsample2(tgt_pyr.back())));
  }

  const int coarsest = static_cast<int>(src_pyr.size()) - 1;
  Tensor fx({src_pyr[coarsest].dim(0), src_pyr[coarsest].dim(1)});
  Tensor fy(fx.shape());

  const std::vector<double> flow_taps = {0.25, 0.5, 0.25};
  for (int level = coarsest; level >= 0; --level) {
    const Tensor& src = src_pyr[static_cast<size_t>(level)];
    const Tensor& tgt = tgt_pyr[static_cast<size_t>(level)];
    const int H = src.dim(0), W = src.dim(1);
    if (level != coarsest) {
      fx = upsample_component(fx, H, W, static_cast<double>(W) / src_pyr[static_cast<size_t>(level + 1)].dim(1));
      fy = upsample_component(fy, H, W, static_cast<double>(H) / src_pyr[static_cast<size_t>(level + 1)].dim(0));
    }
    Tensor gx({H, W}), gy({H, W}), tgx({H, W}), tgy({H, W});
    central_gradients(tgt, tgx, tgy);
    for (int it = 0; it < opts_.iterations; ++it) {
      Tensor warped = bilinear_sample_gray(src, fx, fy);
      central_gradients(warped, gx, gy);
      // Averaged gradients stabilize the solve when the two images differ in
      // sharpness (blurry vs. deblurred inputs).
      Tensor ix({H, W}), iy({H, W}), it_({H, W});
      Tensor ixx({H, W}), ixy({H, W}), iyy({H, W}), ixt({H, W}), iyt({H, W});
      for (std::int64_t p = 0; p < ix.size(); ++p) {
        const double vx = 0.5 * (gx[p] + tgx[p]);
        const double vy = 0.5 * (gy[p] + tgy[p]);
        const double vt = warped[p] - tgt[p];
        ix[p] = vx;
        iy[p] = vy;
        it_[p] = vt;
        ixx[p] = vx * vx;
        ixy[p] = vx * vy;
        iyy[p] = vy * vy;
        ixt[p] = vx * vt;
        iyt[p] = vy * vt;
      }
      Tensor a11 = box_sum(ixx, opts_.window_radius);
      Tensor a12 = box_sum(ixy, opts_.window_radius);
      Tensor a22 = box_sum(iyy, opts_.window_radius);
      Tensor b1 = box_sum(ixt, opts_.window_radius);
      Tensor b2 = box_sum(iyt, opts_.window_radius);
      const double reg = opts_.regularization * (2 * opts_.window_radius + 1) * (2 * opts_.window_radius + 1);
      for (std::int64_t p = 0; p < a11.size(); ++p) {
        const double m11 = a11[p] + reg, m22 = a22[p] + reg, m12 = a12[p];
        const double det = m11 * m22 - m12 * m12;
        double dx = -(m22 * b1[p] - m12 * b2[p]) / det;
        double dy = -(m11 * b2[p] - m12 * b1[p]) / det;
        dx = std::clamp(dx, -opts_.step_clamp, opts_.step_clamp);
        dy = std::clamp(dy, -opts_.step_clamp, opts_.step_clamp);
        fx[p] += dx;
        fy[p] += dy;
      }
      fx = separable(fx, flow_taps);
      fy = separable(fy, flow_taps);
    }
  }

  Tensor out({2, source.dim(1), source.dim(2)});
  const std::int64_t plane = static_cast<std::int64_t>(source.dim(1)) * source.dim(2);
  std::copy(fx.data(), fx.data() + plane, out.data());
  std::copy(fy.data(), fy.data() + plane, out.data() + plane);
  return deform::FlowField(std::move(out));
}

}  // namespace dbk::flow
