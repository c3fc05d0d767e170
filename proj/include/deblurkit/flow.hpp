#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "deblurkit/deformation.hpp"
#include "deblurkit/tensor.hpp"

namespace dbk::flow {

// Pluggable dense flow estimation. Implementations must be safe for
// sequential reuse; concurrent use of one instance is not required.
class FlowEstimator {
 public:
  virtual ~FlowEstimator() = default;
  virtual deform::FlowField estimate(const Tensor& source, const Tensor& target) = 0;
  virtual std::string name() const = 0;
};

using EstimatorFactory = std::function<std::unique_ptr<FlowEstimator>()>;
void register_estimator(const std::string& name, EstimatorFactory factory);
std::unique_ptr<FlowEstimator> make_estimator(const std::string& name);
std::vector<std::string> registered_estimators();

// Checked front door: validates shapes and wraps estimator failures with the
// estimator identity.
deform::FlowField estimate_flow(const Tensor& source, const Tensor& target, FlowEstimator& estimator);

struct PyramidalOptions {
  int max_levels = 5;
  int min_extent = 12;     // stop building the pyramid below this size
  int iterations = 6;      // refinement iterations per level
  int window_radius = 3;   // local least-squares window (2r+1)^2
  double regularization = 1e-4;
  double step_clamp = 1.5;  // per-iteration update clamp in pixels
};

// Built-in classical estimator: Gaussian pyramid plus iterative local
// least-squares refinement with flow smoothing. Registered as "pyramidal".
class PyramidalFlowEstimator : public FlowEstimator {
 public:
  PyramidalFlowEstimator() = default;
  explicit PyramidalFlowEstimator(PyramidalOptions opts) : opts_(opts) {}
  deform::FlowField estimate(const Tensor& source, const Tensor& target) override;
  std::string name() const override { return "pyramidal"; }

 private:
  PyramidalOptions opts_;
};

// Always returns a zero field; registered as "zero" for debugging and for
// pipelines that assume aligned data.
class ZeroFlowEstimator : public FlowEstimator {
 public:
  deform::FlowField estimate(const Tensor& source, const Tensor& target) override;
  std::string name() const override { return "zero"; }
};

// Grayscale conversion and pyramid helpers, shared with tests.
Tensor luminance(const Tensor& image);       // C x H x W -> H x W
Tensor downsample2(const Tensor& gray);      // H x W -> floor halves, 2x2 mean
Tensor gaussian5(const Tensor& gray);        // separable [1 4 6 4 1]/16

}  // namespace dbk::flow
