#pragma once

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "deblurkit/tensor.hpp"

namespace dbk {

// Minimal reverse-mode autodiff over Tensor. A Var owns its value, a lazily
// allocated gradient of the same shape, and a backward closure that scatters
// the node's gradient into its parents. Graphs are built dynamically and
// freed when the root Var goes out of scope. Double precision throughout so
// finite-difference checks are meaningful.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first use, same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents

  Tensor& ensure_grad();
  void accumulate(const Tensor& g);
};

Var make_var(Tensor value, bool requires_grad);
inline Var leaf(Tensor value) { return make_var(std::move(value), true); }
inline Var constant(Tensor value) { return make_var(std::move(value), false); }

// Builds an op node. requires_grad is inherited from the parents; the
// backward closure runs only when some parent needs a gradient.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Backpropagates from a scalar root (seed gradient 1). Idempotent per graph
// only if gradients are zeroed between calls.
void backward(const Var& root);

namespace ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);          // elementwise, same shape
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var sum(const Var& a);                        // -> scalar
Var mean(const Var& a);                       // -> scalar
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var concat_channels(const Var& a, const Var& b);     // CHW along C
Var slice_channels(const Var& a, int from, int to);  // [from, to)

// 2-d convolution, stride 1, zero padding. x: Cin x H x W, w: Cout x Cin x K x K.
Var conv2d(const Var& x, const Var& w, const Var& b, int pad);

Var maxpool2(const Var& x);            // 2x2 stride 2; H and W must be even
Var upsample2_nearest(const Var& x);   // nearest-neighbor x2

// Inverted dropout; draws the keep mask from rng at construction time.
Var dropout(const Var& x, double p, std::mt19937_64& rng);

// Replicate-pad a CHW tensor, and the matching crop.
Var pad_replicate(const Var& x, int top, int bottom, int left, int right);
Var crop(const Var& x, int top, int left, int height, int width);

// Softmax over the leading (channel) dimension of an L x H x W tensor,
// independently per spatial position. With `subset` non-empty the softmax is
// restricted to those channel indices and the rest are exactly zero.
Var softmax_channels(const Var& x, const std::vector<int>& subset = {});

// Mean of sqrt(r^2 + eps^2) over the elements of `r` selected by `mask`
// (1 x H x W, broadcast over channels; pass an undefined Tensor for no mask).
// An empty selection yields the constant eps.
Var charbonnier_mean(const Var& r, double eps, const Tensor& mask);
// Single-scalar form sqrt(sum r^2 + eps^2).
Var charbonnier_global(const Var& r, double eps);

// Backward bilinear warp with border clamp. image: C x H x W, flow: 2 x H x W
// holding (dx, dy); out(c,u,v) = image(c, u + dy(u,v), v + dx(u,v)).
// Differentiable in both arguments.
Var warp_bilinear(const Var& image, const Var& flow);

// Per-pixel spatially variant correlation, gather semantics with replicate
// padding. cells: L x H x W where L = (2i-1)^2 listing kernel taps row-major
// over offsets dy,dx in [-(i-1), i-1]. Differentiable in image and cells.
Var apply_cells(const Var& image, const Var& cells, int radius_index);

// out(c,u,v) = sum_i weights(i,u,v) * levels[i](c,u,v).
Var combine_levels(const std::vector<Var>& levels, const Var& weights);

}  // namespace ops

}  // namespace dbk
