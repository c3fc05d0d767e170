#include "deblurkit/metrics.hpp"

#include <cmath>
#include <vector>

#include "deblurkit/common.hpp"

namespace dbk::metrics {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  if (a.ndim() != 3) throw ShapeError(std::string(what) + " expects C x H x W images");
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<size_t>(size));
  const int r = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    w[static_cast<size_t>(i)] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
    sum += w[static_cast<size_t>(i)];
  }
  for (double& v : w) v /= sum;
  return w;
}

// Valid-region separable filtering: output is (H-2r) x (W-2r).
Tensor filter_valid(const double* plane, int H, int W, const std::vector<double>& taps) {
  const int r = static_cast<int>(taps.size()) / 2;
  const int oh = H - 2 * r, ow = W - 2 * r;
  Tensor tmp({H, ow});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (size_t k = 0; k < taps.size(); ++k) acc += taps[k] * plane[static_cast<std::int64_t>(y) * W + x + static_cast<int>(k)];
      tmp[static_cast<std::int64_t>(y) * ow + x] = acc;
    }
  Tensor out({oh, ow});
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (size_t k = 0; k < taps.size(); ++k) acc += taps[k] * tmp[static_cast<std::int64_t>(y + static_cast<int>(k)) * ow + x];
      out[static_cast<std::int64_t>(y) * ow + x] = acc;
    }
  return out;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  check_pair(a, b, "psnr");
  const double* ap = a.data();
  const double* bp = b.data();
  double sq = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const double d = ap[i] - bp[i];
    sq += d * d;
  }
  const double mse = sq / static_cast<double>(a.size());
  if (mse <= 1e-10) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Tensor& a, const Tensor& b) {
  check_pair(a, b, "ssim");
  constexpr int kWindow = 11;
  constexpr double kSigma = 1.5;
  constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2 with L = 1
  constexpr double kC2 = 0.03 * 0.03;
  const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
  if (H < kWindow || W < kWindow)
    throw ShapeError("ssim: extent " + shape_str(a) + " smaller than the " + std::to_string(kWindow) + "-px window");
  const auto taps = gaussian_window(kWindow, kSigma);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;

  double total = 0.0;
  for (int c = 0; c < C; ++c) {
    const double* ap = a.data() + c * plane;
    const double* bp = b.data() + c * plane;
    std::vector<double> aa(static_cast<size_t>(plane)), bb(static_cast<size_t>(plane)), ab(static_cast<size_t>(plane));
    for (std::int64_t i = 0; i < plane; ++i) {
      aa[static_cast<size_t>(i)] = ap[i] * ap[i];
      bb[static_cast<size_t>(i)] = bp[i] * bp[i];
      ab[static_cast<size_t>(i)] = ap[i] * bp[i];
    }
    Tensor mu_a = filter_valid(ap, H, W, taps);
    Tensor mu_b = filter_valid(bp, H, W, taps);
    Tensor e_aa = filter_valid(aa.data(), H, W, taps);
    Tensor e_bb = filter_valid(bb.data(), H, W, taps);
    Tensor e_ab = filter_valid(ab.data(), H, W, taps);
    double acc = 0.0;
    for (std::int64_t i = 0; i < mu_a.size(); ++i) {
      const double ma = mu_a[i], mb = mu_b[i];
      const double va = e_aa[i] - ma * ma;
      const double vb = e_bb[i] - mb * mb;
      const double cov = e_ab[i] - ma * mb;
      acc += ((2 * ma * mb + kC1) * (2 * cov + kC2)) / ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
    }
    total += acc / static_cast<double>(mu_a.size());
  }
  return total / C;
}

double mae(const Tensor& a, const Tensor& b) {
  check_pair(a, b, "mae");
  const double* ap = a.data();
  const double* bp = b.data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) acc += std::abs(ap[i] - bp[i]);
  return acc / static_cast<double>(a.size());
}

}  // namespace dbk::metrics
