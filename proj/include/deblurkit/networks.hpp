#pragma once

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "deblurkit/autograd.hpp"

namespace dbk::nets {

struct ParamRef {
  std::string name;
  Var var;
};

struct Conv2d {
  Var weight;  // out x in x k x k
  Var bias;    // out
  int pad = 1;

  Conv2d() = default;
  Conv2d(int in_c, int out_c, int k);
  Var operator()(const Var& x) const { return ops::conv2d(x, weight, bias, pad); }
  void collect(const std::string& prefix, std::vector<ParamRef>& out) const;
};

// Fan-in-scaled normal initialization for every conv weight, zero biases.
void he_init(const std::vector<ParamRef>& params, std::mt19937_64& rng);
std::int64_t parameter_count(const std::vector<ParamRef>& params);

// Deblurring networks map a blurry C x H x W image a same-shaped prediction
// in (0,1). Training mode enables dropout, which draws from `rng`.
class DeblurNetwork {
 public:
  virtual ~DeblurNetwork() = default;
  virtual Var forward(const Var& input, bool training, std::mt19937_64& rng) = 0;
  virtual std::vector<ParamRef> parameters() const = 0;
  virtual std::string name() const = 0;
};

struct UNetOptions {
  int in_channels = 3;
  int out_channels = 3;
  int base_width = 64;
  int depth = 4;  // number of pooling stages
  double dropout = 0.4;
};

// Plain encoder/decoder with skip concatenations: two 3x3 convs per stage,
// 2x2 max pooling, nearest upsampling followed by a conv, dropout on the two
// deepest encoder blocks, sigmoid output. Arbitrary extents are handled by
// replicate padding to a multiple of 2^depth and cropping the output.
class UNet : public DeblurNetwork {
 public:
  explicit UNet(UNetOptions opts);
  Var forward(const Var& input, bool training, std::mt19937_64& rng) override;
  std::vector<ParamRef> parameters() const override;
  std::string name() const override { return "unet"; }
  const UNetOptions& options() const { return opts_; }

 private:
  UNetOptions opts_;
  std::vector<Conv2d> enc_a_, enc_b_;
  Conv2d mid_a_, mid_b_;
  std::vector<Conv2d> up_, dec_a_, dec_b_;
  Conv2d final_;
};

// Returns its input unchanged; useful as a stub in tests and tooling.
class IdentityNetwork : public DeblurNetwork {
 public:
  Var forward(const Var& input, bool, std::mt19937_64&) override { return input; }
  std::vector<ParamRef> parameters() const override { return {}; }
  std::string name() const override { return "identity"; }
};

// Shared body of the kernel- and weight-prediction heads: entry conv, three
// residual blocks, exit conv. All convs 3x3, width constant through the body.
class PredictionBody {
 public:
  PredictionBody() = default;
  PredictionBody(int in_channels, int width, int out_channels, int num_blocks = 3);
  Var forward(const Var& x) const;
  std::vector<ParamRef> parameters(const std::string& prefix) const;
  int out_channels() const { return out_channels_; }

 private:
  struct ResBlock {
    Conv2d c1, c2;
  };
  Conv2d entry_, exit_;
  std::vector<ResBlock> blocks_;
  int out_channels_ = 0;
};

// Kernel-seed head: 6 input channels (prediction + blurry input), exit width
// sum_{i=2..m} i. With `isotropic` off the exit instead carries raw cells for
// every level, sum_{i=2..m} (2i-1)^2 channels.
PredictionBody make_kernel_prediction_body(int max_radius, int width, bool isotropic);
// Weight head: exit width m.
PredictionBody make_weight_prediction_body(int max_radius, int width);
int freeform_cell_channels(int max_radius);

struct ModelOptions {
  std::string name = "unet";
  UNetOptions unet;
};

using ModelFactory = std::function<std::unique_ptr<DeblurNetwork>(const ModelOptions&)>;
void register_deblur_network(const std::string& name, ModelFactory factory);
std::unique_ptr<DeblurNetwork> make_deblur_network(const ModelOptions& opts);
std::vector<std::string> registered_deblur_networks();

}  // namespace dbk::nets
