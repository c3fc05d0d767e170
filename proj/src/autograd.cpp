#include "deblurkit/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "deblurkit/common.hpp"

namespace dbk {

Tensor& Node::ensure_grad() {
  if (!grad.defined()) grad = Tensor::zeros(value.shape());
  return grad;
}

void Node::accumulate(const Tensor& g) {
  ensure_grad();
  grad.axpy(1.0, g);
}

Var make_var(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool req = false;
  for (const auto& p : parents) req = req || p->requires_grad;
  n->requires_grad = req;
  if (req) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->value) + " vs " + shape_str(b->value));
}

}  // namespace

void backward(const Var& root) {
  if (root->value.size() != 1) throw ShapeError("backward expects a scalar root, got " + shape_str(root->value));
  // Iterative post-order DFS; reverse gives a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    size_t next;
  };
  std::vector<Frame> stack;
  if (visited.insert(root.get()).second) stack.push_back({root.get(), 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  root->ensure_grad().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
  }
}

namespace ops {

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor v = a->value.clone();
  v.axpy(1.0, b->value);
  return make_op(std::move(v), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad);
    if (b->requires_grad) b->accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor v = a->value.clone();
  v.axpy(-1.0, b->value);
  return make_op(std::move(v), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad);
    if (b->requires_grad) b->ensure_grad().axpy(-1.0, n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor v = a->value.clone();
  {
    double* vp = v.data();
    const double* bp = b->value.data();
    for (std::int64_t i = 0; i < v.size(); ++i) vp[i] *= bp[i];
  }
  return make_op(std::move(v), {a, b}, [a, b](Node& n) {
    const double* g = n.grad.data();
    if (a->requires_grad) {
      double* ga = a->ensure_grad().data();
      const double* bv = b->value.data();
      for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b->requires_grad) {
      double* gb = b->ensure_grad().data();
      const double* av = a->value.data();
      for (std::int64_t i = 0; i < n.grad.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor v = a->value.clone();
  double* vp = v.data();
  for (std::int64_t i = 0; i < v.size(); ++i) vp[i] *= s;
  return make_op(std::move(v), {a}, [a, s](Node& n) {
    if (a->requires_grad) a->ensure_grad().axpy(s, n.grad);
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor v = a->value.clone();
  double* vp = v.data();
  for (std::int64_t i = 0; i < v.size(); ++i) vp[i] += s;
  return make_op(std::move(v), {a}, [a](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad);
  });
}

Var sum(const Var& a) {
  Tensor v = Tensor::scalar(a->value.sum());
  return make_op(std::move(v), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    double g = n.grad[0];
    double* ga = a->ensure_grad().data();
    for (std::int64_t i = 0; i < a->value.size(); ++i) ga[i] += g;
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a->value.size())); }

Var relu(const Var& a) {
  Tensor v = a->value.clone();
  double* vp = v.data();
  for (std::int64_t i = 0; i < v.size(); ++i) vp[i] = vp[i] > 0.0 ? vp[i] : 0.0;
  return make_op(std::move(v), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    double* ga = a->ensure_grad().data();
    const double* g = n.grad.data();
    const double* av = a->value.data();
    for (std::int64_t i = 0; i < n.grad.size(); ++i)
      if (av[i] > 0.0) ga[i] += g[i];
  });
}

Var sigmoid(const Var& a) {
  Tensor v = a->value.clone();
  double* vp = v.data();
  for (std::int64_t i = 0; i < v.size(); ++i) vp[i] = 1.0 / (1.0 + std::exp(-vp[i]));
  Tensor saved = v;  // shallow
  return make_op(std::move(v), {a}, [a, saved](Node& n) {
    if (!a->requires_grad) return;
    double* ga = a->ensure_grad().data();
    const double* g = n.grad.data();
    const double* s = saved.data();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += g[i] * s[i] * (1.0 - s[i]);
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[1] != sb[1] || sa[2] != sb[2])
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(a->value) + " vs " + shape_str(b->value));
  Tensor v({sa[0] + sb[0], sa[1], sa[2]});
  std::copy(a->value.data(), a->value.data() + a->value.size(), v.data());
  std::copy(b->value.data(), b->value.data() + b->value.size(), v.data() + a->value.size());
  return make_op(std::move(v), {a, b}, [a, b](Node& n) {
    const double* g = n.grad.data();
    if (a->requires_grad) {
      double* ga = a->ensure_grad().data();
      for (std::int64_t i = 0; i < a->value.size(); ++i) ga[i] += g[i];
    }
    if (b->requires_grad) {
      double* gb = b->ensure_grad().data();
      const double* gs = g + a->value.size();
      for (std::int64_t i = 0; i < b->value.size(); ++i) gb[i] += gs[i];
    }
  });
}

Var slice_channels(const Var& a, int from, int to) {
  const auto& s = a->value.shape();
  if (s.size() != 3 || from < 0 || to > s[0] || from >= to)
    throw ShapeError("slice_channels: bad range [" + std::to_string(from) + "," + std::to_string(to) + ") for " +
                     shape_str(a->value));
  const std::int64_t plane = static_cast<std::int64_t>(s[1]) * s[2];
  Tensor v({to - from, s[1], s[2]});
  std::copy(a->value.data() + from * plane, a->value.data() + to * plane, v.data());
  return make_op(std::move(v), {a}, [a, from, plane](Node& n) {
    if (!a->requires_grad) return;
    double* ga = a->ensure_grad().data() + from * plane;
    const double* g = n.grad.data();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) ga[i] += g[i];
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int pad) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0])
    throw ShapeError("conv2d: incompatible input " + shape_str(x->value) + " and weight " + shape_str(w->value));
  if (b->value.size() != ws[0]) throw ShapeError("conv2d: bias size mismatch");
  const int C = xs[0], H = xs[1], W = xs[2], O = ws[0], K = ws[2];
  const int OH = H + 2 * pad - K + 1, OW = W + 2 * pad - K + 1;
  if (OH <= 0 || OW <= 0) throw ShapeError("conv2d: output would be empty");

  Tensor out({O, OH, OW});
  {
    double* op = out.data();
    const double* bp = b->value.data();
    for (int o = 0; o < O; ++o)
      std::fill(op + static_cast<std::int64_t>(o) * OH * OW, op + static_cast<std::int64_t>(o + 1) * OH * OW, bp[o]);
    const double* xp = x->value.data();
    const double* wp = w->value.data();
    for (int o = 0; o < O; ++o) {
      for (int c = 0; c < C; ++c) {
        const double* xplane = xp + static_cast<std::int64_t>(c) * H * W;
        const double* wbase = wp + (static_cast<std::int64_t>(o) * C + c) * K * K;
        for (int ky = 0; ky < K; ++ky) {
          for (int kx = 0; kx < K; ++kx) {
            const double wv = wbase[ky * K + kx];
            if (wv == 0.0) continue;
            const int dy = ky - pad, dx = kx - pad;
            const int y0 = std::max(0, -dy), y1 = std::min(OH, H - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(OW, W - dx);
            for (int y = y0; y < y1; ++y) {
              double* orow = op + (static_cast<std::int64_t>(o) * OH + y) * OW;
              const double* irow = xplane + static_cast<std::int64_t>(y + dy) * W + dx;
              for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx];
            }
          }
        }
      }
    }
  }

  return make_op(std::move(out), {x, w, b}, [x, w, b, pad, C, H, W, O, K, OH, OW](Node& n) {
    const double* g = n.grad.data();
    const double* xp = x->value.data();
    const double* wp = w->value.data();
    if (b->requires_grad) {
      double* gb = b->ensure_grad().data();
      for (int o = 0; o < O; ++o) {
        double s = 0.0;
        const double* gp = g + static_cast<std::int64_t>(o) * OH * OW;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) s += gp[i];
        gb[o] += s;
      }
    }
    double* gx = x->requires_grad ? x->ensure_grad().data() : nullptr;
    double* gw = w->requires_grad ? w->ensure_grad().data() : nullptr;
    for (int o = 0; o < O; ++o) {
      for (int c = 0; c < C; ++c) {
        const double* xplane = xp + static_cast<std::int64_t>(c) * H * W;
        const double* wbase = wp + (static_cast<std::int64_t>(o) * C + c) * K * K;
        double* gxplane = gx ? gx + static_cast<std::int64_t>(c) * H * W : nullptr;
        double* gwbase = gw ? gw + (static_cast<std::int64_t>(o) * C + c) * K * K : nullptr;
        for (int ky = 0; ky < K; ++ky) {
          for (int kx = 0; kx < K; ++kx) {
            const int dy = ky - pad, dx = kx - pad;
            const int y0 = std::max(0, -dy), y1 = std::min(OH, H - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(OW, W - dx);
            const double wv = wbase[ky * K + kx];
            double wsum = 0.0;
            for (int y = y0; y < y1; ++y) {
              const double* grow = g + (static_cast<std::int64_t>(o) * OH + y) * OW;
              const double* irow = xplane + static_cast<std::int64_t>(y + dy) * W + dx;
              if (gxplane) {
                double* gxrow = gxplane + static_cast<std::int64_t>(y + dy) * W + dx;
                for (int xx = x0; xx < x1; ++xx) gxrow[xx] += wv * grow[xx];
              }
              if (gwbase) {
                double s = 0.0;
                for (int xx = x0; xx < x1; ++xx) s += grow[xx] * irow[xx];
                wsum += s;
              }
            }
            if (gwbase) gwbase[ky * K + kx] += wsum;
          }
        }
      }
    }
  });
}

Var maxpool2(const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0)
    throw ShapeError("maxpool2 expects even CHW extents, got " + shape_str(x->value));
  const int C = s[0], H = s[1], W = s[2], OH = H / 2, OW = W / 2;
  Tensor out({C, OH, OW});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(out.size()));
  const double* xp = x->value.data();
  double* op = out.data();
  std::int64_t oi = 0;
  for (int c = 0; c < C; ++c) {
    const double* plane = xp + static_cast<std::int64_t>(c) * H * W;
    for (int y = 0; y < OH; ++y) {
      for (int xx = 0; xx < OW; ++xx, ++oi) {
        std::int64_t base = static_cast<std::int64_t>(2 * y) * W + 2 * xx;
        std::int64_t best = base;
        double bv = plane[base];
        for (std::int64_t cand : {base + 1, base + W, base + W + 1}) {
          if (plane[cand] > bv) {
            bv = plane[cand];
            best = cand;
          }
        }
        op[oi] = bv;
        (*argmax)[static_cast<size_t>(oi)] = static_cast<std::int64_t>(c) * H * W + best;
      }
    }
  }
  return make_op(std::move(out), {x}, [x, argmax](Node& n) {
    if (!x->requires_grad) return;
    double* gx = x->ensure_grad().data();
    const double* g = n.grad.data();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) gx[(*argmax)[static_cast<size_t>(i)]] += g[i];
  });
}

Var upsample2_nearest(const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() != 3) throw ShapeError("upsample2_nearest expects CHW");
  const int C = s[0], H = s[1], W = s[2];
  Tensor out({C, H * 2, W * 2});
  const double* xp = x->value.data();
  double* op = out.data();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < 2 * H; ++y) {
      const double* irow = xp + (static_cast<std::int64_t>(c) * H + y / 2) * W;
      double* orow = op + (static_cast<std::int64_t>(c) * 2 * H + y) * 2 * W;
      for (int xx = 0; xx < 2 * W; ++xx) orow[xx] = irow[xx / 2];
    }
  return make_op(std::move(out), {x}, [x, C, H, W](Node& n) {
    if (!x->requires_grad) return;
    double* gx = x->ensure_grad().data();
    const double* g = n.grad.data();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < 2 * H; ++y) {
        double* grow = gx + (static_cast<std::int64_t>(c) * H + y / 2) * W;
        const double* orow = g + (static_cast<std::int64_t>(c) * 2 * H + y) * 2 * W;
        for (int xx = 0; xx < 2 * W; ++xx) grow[xx / 2] += orow[xx];
      }
  });
}

Var dropout(const Var& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  const double keep = 1.0 - p;
  Tensor mask(x->value.shape());
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  double* mp = mask.data();
  for (std::int64_t i = 0; i < mask.size(); ++i) mp[i] = uni(rng) < keep ? 1.0 / keep : 0.0;
  Tensor v = x->value.clone();
  double* vp = v.data();
  for (std::int64_t i = 0; i < v.size(); ++i) vp[i] *= mp[i];
  return make_op(std::move(v), {x}, [x, mask](Node& n) {
    if (!x->requires_grad) return;
    double* gx = x->ensure_grad().data();
    const double* g = n.grad.data();
    const double* mp = mask.data();
    for (std::int64_t i = 0; i < n.grad.size(); ++i) gx[i] += g[i] * mp[i];
  });
}

Var pad_replicate(const Var& x, int top, int bottom, int left, int right) {
  const auto& s = x->value.shape();
  if (s.size() != 3) throw ShapeError("pad_replicate expects CHW");
  const int C = s[0], H = s[1], W = s[2], OH = H + top + bottom, OW = W + left + right;
  Tensor out({C, OH, OW});
  const double* xp = x->value.data();
  double* op = out.data();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < OH; ++y) {
      const int sy = std::clamp(y - top, 0, H - 1);
      const double* irow = xp + (static_cast<std::int64_t>(c) * H + sy) * W;
      double* orow = op + (static_cast<std::int64_t>(c) * OH + y) * OW;
      for (int xx = 0; xx < OW; ++xx) orow[xx] = irow[std::clamp(xx - left, 0, W - 1)];
    }
  return make_op(std::move(out), {x}, [x, top, left, C, H, W, OH, OW](Node& n) {
    if (!x->requires_grad) return;
    double* gx = x->ensure_grad().data();
    const double* g = n.grad.data();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < OH; ++y) {
        const int sy = std::clamp(y - top, 0, H - 1);
        double* grow = gx + (static_cast<std::int64_t>(c) * H + sy) * W;
        const double* orow = g + (static_cast<std::int64_t>(c) * OH + y) * OW;
        for (int xx = 0; xx < OW; ++xx) grow[std::clamp(xx - left, 0, W - 1)] += orow[xx];
      }
  });
}

Var crop(const Var& x, int top, int left, int height, int width) {
  const auto& s = x->value.shape();
  if (s.size() != 3 || top + height > s[1] || left + width > s[2] || top < 0 || left < 0)
    throw ShapeError("crop out of range for " + shape_str(x->value));
  const int C = s[0], H = s[1], W = s[2];
  Tensor out({C, height, width});
  const double* xp = x->value.data();
  double* op = out.data();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < height; ++y)
      std::copy_n(xp + (static_cast<std::int64_t>(c) * H + top + y) * W + left, width,
                  op + (static_cast<std::int64_t>(c) * height + y) * width);
  return make_op(std::move(out), {x}, [x, top, left, height, width, C, H, W](Node& n) {
    if (!x->requires_grad) return;
    double* gx = x->ensure_grad().data();
    const double* g = n.grad.data();
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < height; ++y) {
        double* grow = gx + (static_cast<std::int64_t>(c) * H + top + y) * W + left;
        const double* orow = g + (static_cast<std::int64_t>(c) * height + y) * width;
        for (int xx = 0; xx < width; ++xx) grow[xx] += orow[xx];
      }
  });
}

Var softmax_channels(const Var& x, const std::vector<int>& subset) {
  const auto& s = x->value.shape();
  if (s.size() != 3) throw ShapeError("softmax_channels expects L x H x W");
  const int L = s[0];
  const std::int64_t P = static_cast<std::int64_t>(s[1]) * s[2];
  std::vector<int> idx = subset;
  if (idx.empty()) {
    idx.resize(static_cast<size_t>(L));
    for (int i = 0; i < L; ++i) idx[static_cast<size_t>(i)] = i;
  }
  Tensor out(x->value.shape());
  const double* xp = x->value.data();
  double* op = out.data();
  for (std::int64_t p = 0; p < P; ++p) {
    double mx = -1e300;
    for (int l : idx) mx = std::max(mx, xp[l * P + p]);
    double z = 0.0;
    for (int l : idx) {
      const double e = std::exp(xp[l * P + p] - mx);
      op[l * P + p] = e;
      z += e;
    }
    const double inv = 1.0 / z;
    for (int l : idx) op[l * P + p] *= inv;
  }
  Tensor saved = out;  // shallow
  auto subset_idx = std::make_shared<std::vector<int>>(std::move(idx));
  return make_op(std::move(out), {x}, [x, saved, subset_idx, P](Node& n) {
    if (!x->requires_grad) return;
    double* gx = x->ensure_grad().data();
    const double* g = n.grad.data();
    const double* y = saved.data();
    for (std::int64_t p = 0; p < P; ++p) {
      double dot = 0.0;
      for (int l : *subset_idx) dot += g[l * P + p] * y[l * P + p];
      for (int l : *subset_idx) gx[l * P + p] += y[l * P + p] * (g[l * P + p] - dot);
    }
  });
}

Var charbonnier_mean(const Var& r, double eps, const Tensor& mask) {
  const auto& s = r->value.shape();
  std::int64_t count = 0;
  double total = 0.0;
  const double e2 = eps * eps;
  const double* rp = r->value.data();
  if (mask.defined()) {
    if (s.size() != 3 || mask.ndim() != 3 || mask.dim(1) != s[1] || mask.dim(2) != s[2] || mask.dim(0) != 1)
      throw ShapeError("charbonnier_mean: mask must be 1 x H x W matching " + shape_str(r->value));
    const std::int64_t P = static_cast<std::int64_t>(s[1]) * s[2];
    const double* mp = mask.data();
    for (int c = 0; c < s[0]; ++c)
      for (std::int64_t p = 0; p < P; ++p)
        if (mp[p] != 0.0) {
          const double v = rp[c * P + p];
          total += std::sqrt(v * v + e2);
          ++count;
        }
  } else {
    count = r->value.size();
    for (std::int64_t i = 0; i < count; ++i) total += std::sqrt(rp[i] * rp[i] + e2);
  }
  if (count == 0) return constant(Tensor::scalar(eps));  // degenerate empty selection
  const double inv = 1.0 / static_cast<double>(count);
  Tensor v = Tensor::scalar(total * inv);
  return make_op(std::move(v), {r}, [r, eps, mask, inv](Node& n) {
    if (!r->requires_grad) return;
    const double g = n.grad[0];
    const double e2 = eps * eps;
    double* gr = r->ensure_grad().data();
    const double* rp = r->value.data();
    const auto& s = r->value.shape();
    if (mask.defined()) {
      const std::int64_t P = static_cast<std::int64_t>(s[1]) * s[2];
      const double* mp = mask.data();
      for (int c = 0; c < s[0]; ++c)
        for (std::int64_t p = 0; p < P; ++p)
          if (mp[p] != 0.0) {
            const double v = rp[c * P + p];
            gr[c * P + p] += g * inv * v / std::sqrt(v * v + e2);
          }
    } else {
      for (std::int64_t i = 0; i < r->value.size(); ++i)
        gr[i] += g * inv * rp[i] / std::sqrt(rp[i] * rp[i] + e2);
    }
  });
}

Var charbonnier_global(const Var& r, double eps) {
  const double* rp = r->value.data();
  double ss = 0.0;
  for (std::int64_t i = 0; i < r->value.size(); ++i) ss += rp[i] * rp[i];
  const double v = std::sqrt(ss + eps * eps);
  return make_op(Tensor::scalar(v), {r}, [r, v](Node& n) {
    if (!r->requires_grad) return;
    const double g = n.grad[0] / v;
    double* gr = r->ensure_grad().data();
    const double* rp = r->value.data();
    for (std::int64_t i = 0; i < r->value.size(); ++i) gr[i] += g * rp[i];
  });
}

Var warp_bilinear(const Var& image, const Var& flow) {
  const auto& is = image->value.shape();
  const auto& fs = flow->value.shape();
  if (is.size() != 3 || fs.size() != 3 || fs[0] != 2 || fs[1] != is[1] || fs[2] != is[2])
    throw ShapeError("warp_bilinear: image " + shape_str(image->value) + " vs flow " + shape_str(flow->value));
  const int C = is[0], H = is[1], W = is[2];
  const std::int64_t P = static_cast<std::int64_t>(H) * W;
  Tensor out({C, H, W});
  const double* ip = image->value.data();
  const double* fp = flow->value.data();
  double* op = out.data();
  for (int u = 0; u < H; ++u) {
    for (int v = 0; v < W; ++v) {
      const std::int64_t p = static_cast<std::int64_t>(u) * W + v;
      double xs = v + fp[p];       // dx channel
      double ys = u + fp[P + p];   // dy channel
      xs = std::clamp(xs, 0.0, static_cast<double>(W - 1));
      ys = std::clamp(ys, 0.0, static_cast<double>(H - 1));
      const int x0 = static_cast<int>(xs);
      const int y0 = static_cast<int>(ys);
      const int x1 = std::min(x0 + 1, W - 1);
      const int y1 = std::min(y0 + 1, H - 1);
      const double fx = xs - x0, fy = ys - y0;
      for (int c = 0; c < C; ++c) {
        const double* pl = ip + c * P;
        const double top = pl[static_cast<std::int64_t>(y0) * W + x0] * (1 - fx) + pl[static_cast<std::int64_t>(y0) * W + x1] * fx;
        const double bot = pl[static_cast<std::int64_t>(y1) * W + x0] * (1 - fx) + pl[static_cast<std::int64_t>(y1) * W + x1] * fx;
        op[c * P + p] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return make_op(std::move(out), {image, flow}, [image, flow, C, H, W, P](Node& n) {
    const double* g = n.grad.data();
    const double* ip = image->value.data();
    const double* fp = flow->value.data();
    double* gi = image->requires_grad ? image->ensure_grad().data() : nullptr;
    double* gf = flow->requires_grad ? flow->ensure_grad().data() : nullptr;
    for (int u = 0; u < H; ++u) {
      for (int v = 0; v < W; ++v) {
        const std::int64_t p = static_cast<std::int64_t>(u) * W + v;
        const double rx = v + fp[p], ry = u + fp[P + p];
        const bool in_x = rx > 0.0 && rx < W - 1;  // clamped samples have zero flow gradient
        const bool in_y = ry > 0.0 && ry < H - 1;
        const double xs = std::clamp(rx, 0.0, static_cast<double>(W - 1));
        const double ys = std::clamp(ry, 0.0, static_cast<double>(H - 1));
        const int x0 = static_cast<int>(xs);
        const int y0 = static_cast<int>(ys);
        const int x1 = std::min(x0 + 1, W - 1);
        const int y1 = std::min(y0 + 1, H - 1);
        const double fx = xs - x0, fy = ys - y0;
        double ddx = 0.0, ddy = 0.0;
        for (int c = 0; c < C; ++c) {
          const double go = g[c * P + p];
          if (go == 0.0) continue;
          const double* pl = ip + c * P;
          const double v00 = pl[static_cast<std::int64_t>(y0) * W + x0];
          const double v01 = pl[static_cast<std::int64_t>(y0) * W + x1];
          const double v10 = pl[static_cast<std::int64_t>(y1) * W + x0];
          const double v11 = pl[static_cast<std::int64_t>(y1) * W + x1];
          if (gi) {
            double* gp = gi + c * P;
            gp[static_cast<std::int64_t>(y0) * W + x0] += go * (1 - fx) * (1 - fy);
            gp[static_cast<std::int64_t>(y0) * W + x1] += go * fx * (1 - fy);
            gp[static_cast<std::int64_t>(y1) * W + x0] += go * (1 - fx) * fy;
            gp[static_cast<std::int64_t>(y1) * W + x1] += go * fx * fy;
          }
          if (gf) {
            ddx += go * ((v01 - v00) * (1 - fy) + (v11 - v10) * fy);
            ddy += go * ((v10 - v00) * (1 - fx) + (v11 - v01) * fx);
          }
        }
        if (gf) {
          if (in_x) gf[p] += ddx;
          if (in_y) gf[P + p] += ddy;
        }
      }
    }
  });
}

Var apply_cells(const Var& image, const Var& cells, int radius_index) {
  const auto& is = image->value.shape();
  const auto& cs = cells->value.shape();
  const int i = radius_index;
  const int side = 2 * i - 1;
  if (is.size() != 3 || cs.size() != 3)
    throw ShapeError("apply_cells expects CHW image and LHW cells");
  if (cs[0] != side * side || cs[1] != is[1] || cs[2] != is[2])
    throw ShapeError("apply_cells: cells " + shape_str(cells->value) + " do not match radius index " +
                     std::to_string(i) + " and image " + shape_str(image->value));
  const int C = is[0], H = is[1], W = is[2];
  const std::int64_t P = static_cast<std::int64_t>(H) * W;
  Tensor out({C, H, W});
  const double* ip = image->value.data();
  const double* kp = cells->value.data();
  double* op = out.data();
  for (int t = 0; t < side * side; ++t) {
    const int dy = t / side - (i - 1);
    const int dx = t % side - (i - 1);
    const double* kpl = kp + static_cast<std::int64_t>(t) * P;
    for (int c = 0; c < C; ++c) {
      const double* ipl = ip + static_cast<std::int64_t>(c) * P;
      double* opl = op + static_cast<std::int64_t>(c) * P;
      for (int u = 0; u < H; ++u) {
        const int su = std::clamp(u + dy, 0, H - 1);
        const double* irow = ipl + static_cast<std::int64_t>(su) * W;
        const double* krow = kpl + static_cast<std::int64_t>(u) * W;
        double* orow = opl + static_cast<std::int64_t>(u) * W;
        for (int v = 0; v < W; ++v) {
          const int sv = std::clamp(v + dx, 0, W - 1);
          orow[v] += krow[v] * irow[sv];
        }
      }
    }
  }
  return make_op(std::move(out), {image, cells}, [image, cells, i, C, H, W, P](Node& n) {
    const int side = 2 * i - 1;
    const double* g = n.grad.data();
    const double* ip = image->value.data();
    const double* kp = cells->value.data();
    double* gi = image->requires_grad ? image->ensure_grad().data() : nullptr;
    double* gk = cells->requires_grad ? cells->ensure_grad().data() : nullptr;
    for (int t = 0; t < side * side; ++t) {
      const int dy = t / side - (i - 1);
      const int dx = t % side - (i - 1);
      const double* kpl = kp + static_cast<std::int64_t>(t) * P;
      double* gkpl = gk ? gk + static_cast<std::int64_t>(t) * P : nullptr;
      for (int c = 0; c < C; ++c) {
        const double* ipl = ip + static_cast<std::int64_t>(c) * P;
        double* gipl = gi ? gi + static_cast<std::int64_t>(c) * P : nullptr;
        const double* gpl = g + static_cast<std::int64_t>(c) * P;
        for (int u = 0; u < H; ++u) {
          const int su = std::clamp(u + dy, 0, H - 1);
          const double* irow = ipl + static_cast<std::int64_t>(su) * W;
          const double* krow = kpl + static_cast<std::int64_t>(u) * W;
          const double* grow = gpl + static_cast<std::int64_t>(u) * W;
          double* girow = gipl ? gipl + static_cast<std::int64_t>(su) * W : nullptr;
          double* gkrow = gkpl ? gkpl + static_cast<std::int64_t>(u) * W : nullptr;
          for (int v = 0; v < W; ++v) {
            const int sv = std::clamp(v + dx, 0, W - 1);
            if (girow) girow[sv] += krow[v] * grow[v];
            if (gkrow) gkrow[v] += irow[sv] * grow[v];
          }
        }
      }
    }
  });
}

Var combine_levels(const std::vector<Var>& levels, const Var& weights) {
  if (levels.empty()) throw ShapeError("combine_levels: empty stack");
  const auto& ws = weights->value.shape();
  const auto& is = levels[0]->value.shape();
  if (ws.size() != 3 || static_cast<size_t>(ws[0]) != levels.size() || ws[1] != is[1] || ws[2] != is[2])
    throw ShapeError("combine_levels: weights " + shape_str(weights->value) + " vs " +
                     std::to_string(levels.size()) + " levels of " + shape_str(levels[0]->value));
  for (const auto& l : levels) check_same_shape(l, levels[0], "combine_levels");
  const int C = is[0];
  const std::int64_t P = static_cast<std::int64_t>(is[1]) * is[2];
  Tensor out(is);
  double* op = out.data();
  const double* wp = weights->value.data();
  for (size_t li = 0; li < levels.size(); ++li) {
    const double* lp = levels[li]->value.data();
    const double* wpl = wp + static_cast<std::int64_t>(li) * P;
    for (int c = 0; c < C; ++c) {
      const double* lpl = lp + static_cast<std::int64_t>(c) * P;
      double* opl = op + static_cast<std::int64_t>(c) * P;
      for (std::int64_t p = 0; p < P; ++p) opl[p] += wpl[p] * lpl[p];
    }
  }
  std::vector<Var> parents = levels;
  parents.push_back(weights);
  auto levels_copy = std::make_shared<std::vector<Var>>(levels);
  return make_op(std::move(out), std::move(parents), [levels_copy, weights, C, P](Node& n) {
    const double* g = n.grad.data();
    const double* wp = weights->value.data();
    double* gw = weights->requires_grad ? weights->ensure_grad().data() : nullptr;
    for (size_t li = 0; li < levels_copy->size(); ++li) {
      const Var& lvl = (*levels_copy)[li];
      const double* wpl = wp + static_cast<std::int64_t>(li) * P;
      double* gl = lvl->requires_grad ? lvl->ensure_grad().data() : nullptr;
      const double* lp = lvl->value.data();
      double* gwpl = gw ? gw + static_cast<std::int64_t>(li) * P : nullptr;
      for (int c = 0; c < C; ++c) {
        const double* gpl = g + static_cast<std::int64_t>(c) * P;
        const double* lpl = lp + static_cast<std::int64_t>(c) * P;
        double* glpl = gl ? gl + static_cast<std::int64_t>(c) * P : nullptr;
        for (std::int64_t p = 0; p < P; ++p) {
          if (glpl) glpl[p] += wpl[p] * gpl[p];
          if (gwpl) gwpl[p] += lpl[p] * gpl[p];
        }
      }
    }
  });
}

}  // namespace ops

}  // namespace dbk
