#include "deblurkit/networks.hpp"

#include <cmath>
#include <map>
#include <mutex>

#include "deblurkit/common.hpp"
#include "deblurkit/kernel_synthesis.hpp"

namespace dbk::nets {

Conv2d::Conv2d(int in_c, int out_c, int k) : pad(k / 2) {
  weight = leaf(Tensor({out_c, in_c, k, k}));
  bias = leaf(Tensor({out_c}));
}

void Conv2d::collect(const std::string& prefix, std::vector<ParamRef>& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

void he_init(const std::vector<ParamRef>& params, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& p : params) {
    Tensor& t = p.var->value;
    if (t.ndim() == 4) {
      const double fan_in = static_cast<double>(t.dim(1)) * t.dim(2) * t.dim(3);
      const double stddev = std::sqrt(2.0 / fan_in);
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] = stddev * normal(rng);
    } else {
      t.zero();
    }
  }
}

std::int64_t parameter_count(const std::vector<ParamRef>& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.var->value.size();
  return n;
}

UNet::UNet(UNetOptions opts) : opts_(opts) {
  if (opts_.depth < 1) throw ConfigError("unet depth must be >= 1");
  if (opts_.base_width < 1) throw ConfigError("unet base width must be >= 1");
  int w = opts_.base_width;
  int in_c = opts_.in_channels;
  for (int s = 0; s < opts_.depth; ++s) {
    enc_a_.emplace_back(in_c, w, 3);
    enc_b_.emplace_back(w, w, 3);
    in_c = w;
    w *= 2;
  }
  mid_a_ = Conv2d(in_c, w, 3);
  mid_b_ = Conv2d(w, w, 3);
  for (int s = opts_.depth - 1; s >= 0; --s) {
    const int skip_w = opts_.base_width << s;
    up_.emplace_back(skip_w * 2, skip_w, 3);
    dec_a_.emplace_back(skip_w * 2, skip_w, 3);
    dec_b_.emplace_back(skip_w, skip_w, 3);
  }
  final_ = Conv2d(opts_.base_width, opts_.out_channels, 3);
}

Var UNet::forward(const Var& input, bool training, std::mt19937_64& rng) {
  const auto& s = input->value.shape();
  if (s.size() != 3 || s[0] != opts_.in_channels)
    throw ShapeError("unet expects " + std::to_string(opts_.in_channels) + " x H x W, got " + shape_str(input->value));
  const int H = s[1], W = s[2];
  const int mult = 1 << opts_.depth;
  const int ph = (mult - H % mult) % mult;
  const int pw = (mult - W % mult) % mult;
  Var x = input;
  if (ph || pw) x = ops::pad_replicate(x, 0, ph, 0, pw);

  std::vector<Var> skips;
  for (int st = 0; st < opts_.depth; ++st) {
    x = ops::relu(enc_a_[static_cast<size_t>(st)](x));
    x = ops::relu(enc_b_[static_cast<size_t>(st)](x));
    if (st == opts_.depth - 1 && training && opts_.dropout > 0.0) x = ops::dropout(x, opts_.dropout, rng);
    skips.push_back(x);
    x = ops::maxpool2(x);
  }
  x = ops::relu(mid_a_(x));
  x = ops::relu(mid_b_(x));
  if (training && opts_.dropout > 0.0) x = ops::dropout(x, opts_.dropout, rng);

  for (int d = 0; d < opts_.depth; ++d) {
    x = up_[static_cast<size_t>(d)](ops::upsample2_nearest(x));
    x = ops::concat_channels(skips[static_cast<size_t>(opts_.depth - 1 - d)], x);
    x = ops::relu(dec_a_[static_cast<size_t>(d)](x));
    x = ops::relu(dec_b_[static_cast<size_t>(d)](x));
  }
  x = ops::sigmoid(final_(x));
  if (ph || pw) x = ops::crop(x, 0, 0, H, W);
  return x;
}

std::vector<ParamRef> UNet::parameters() const {
  std::vector<ParamRef> out;
  for (size_t s = 0; s < enc_a_.size(); ++s) {
    enc_a_[s].collect("enc" + std::to_string(s) + "a", out);
    enc_b_[s].collect("enc" + std::to_string(s) + "b", out);
  }
  mid_a_.collect("mida", out);
  mid_b_.collect("midb", out);
  for (size_t d = 0; d < up_.size(); ++d) {
    up_[d].collect("up" + std::to_string(d), out);
    dec_a_[d].collect("dec" + std::to_string(d) + "a", out);
    dec_b_[d].collect("dec" + std::to_string(d) + "b", out);
  }
  final_.collect("final", out);
  return out;
}

PredictionBody::PredictionBody(int in_channels, int width, int out_channels, int num_blocks)
    : entry_(in_channels, width, 3), exit_(width, out_channels, 3), out_channels_(out_channels) {
  for (int b = 0; b < num_blocks; ++b) blocks_.push_back({Conv2d(width, width, 3), Conv2d(width, width, 3)});
}

Var PredictionBody::forward(const Var& x) const {
  Var h = entry_(x);
  for (const auto& b : blocks_) h = ops::add(h, b.c2(ops::relu(b.c1(h))));
  return exit_(h);
}

std::vector<ParamRef> PredictionBody::parameters(const std::string& prefix) const {
  std::vector<ParamRef> out;
  entry_.collect(prefix + ".entry", out);
  for (size_t b = 0; b < blocks_.size(); ++b) {
    blocks_[b].c1.collect(prefix + ".block" + std::to_string(b) + ".c1", out);
    blocks_[b].c2.collect(prefix + ".block" + std::to_string(b) + ".c2", out);
  }
  exit_.collect(prefix + ".exit", out);
  return out;
}

int freeform_cell_channels(int max_radius) {
  int n = 0;
  for (int i = 2; i <= max_radius; ++i) n += (2 * i - 1) * (2 * i - 1);
  return n;
}

PredictionBody make_kernel_prediction_body(int max_radius, int width, bool isotropic) {
  const int out = isotropic ? kernels::seed_channel_count(max_radius) : freeform_cell_channels(max_radius);
  return PredictionBody(6, width, out);
}

PredictionBody make_weight_prediction_body(int max_radius, int width) {
  return PredictionBody(6, width, max_radius);
}

namespace {

std::mutex g_model_mutex;
std::map<std::string, ModelFactory>& model_registry() {
  static std::map<std::string, ModelFactory> r = {
      {"unet", [](const ModelOptions& o) { return std::make_unique<UNet>(o.unet); }},
      {"identity", [](const ModelOptions&) { return std::make_unique<IdentityNetwork>(); }},
  };
  return r;
}

}  // namespace

void register_deblur_network(const std::string& name, ModelFactory factory) {
  std::scoped_lock lock(g_model_mutex);
  model_registry()[name] = std::move(factory);
}

std::unique_ptr<DeblurNetwork> make_deblur_network(const ModelOptions& opts) {
  std::scoped_lock lock(g_model_mutex);
  auto it = model_registry().find(opts.name);
  if (it == model_registry().end()) {
    std::string known;
    for (const auto& [k, _] : model_registry()) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("unknown deblur network '" + opts.name + "' (registered: " + known + ")");
  }
  return it->second(opts);
}

std::vector<std::string> registered_deblur_networks() {
  std::scoped_lock lock(g_model_mutex);
  std::vector<std::string> names;
  for (const auto& [k, _] : model_registry()) names.push_back(k);
  return names;
}

}  // namespace dbk::nets
