#include "deblurkit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <iostream>
#include <random>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "deblurkit/common.hpp"
#include "deblurkit/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dbk::train {

double lr_schedule(int epoch, double initial_lr, int halve_every) {
  if (epoch < 0) throw ConfigError("lr_schedule: negative epoch");
  return initial_lr * std::pow(0.5, epoch / halve_every);
}

FlowInputs flow_source_policy(int epoch, int init_epochs) {
  return epoch < init_epochs ? FlowInputs::kSharpAndBlurry : FlowInputs::kSharpAndDeblurred;
}

Adam::Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const std::vector<nets::ParamRef>& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& p : params) {
    Tensor& value = p.var->value;
    Tensor& grad = p.var->ensure_grad();
    auto it = state_.find(p.name);
    if (it == state_.end())
      it = state_.emplace(p.name, std::make_pair(Tensor::zeros(value.shape()), Tensor::zeros(value.shape()))).first;
    Tensor& m = it->second.first;
    Tensor& v = it->second.second;
    double* mp = m.data();
    double* vp = v.data();
    double* gp = grad.data();
    double* xp = value.data();
    for (std::int64_t i = 0; i < value.size(); ++i) {
      mp[i] = beta1_ * mp[i] + (1.0 - beta1_) * gp[i];
      vp[i] = beta2_ * vp[i] + (1.0 - beta2_) * gp[i] * gp[i];
      const double mhat = mp[i] / bc1;
      const double vhat = vp[i] / bc2;
      xp[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      gp[i] = 0.0;
    }
  }
}

void zero_grads(const std::vector<nets::ParamRef>& params) {
  for (const auto& p : params)
    if (p.var->grad.defined()) p.var->grad.zero();
}

Trainer::Trainer(TrainingConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  normalize_mode_ = kernels::normalize_mode_from_string(cfg_.normalization);
  reduction_ = reblur::loss_reduction_from_string(cfg_.reblur_reduction);
  if (!cfg_.deterministic) {
    std::random_device rd;
    cfg_.seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  }

  nets::ModelOptions mo;
  mo.name = cfg_.model;
  mo.unet.base_width = cfg_.model_base_width;
  mo.unet.depth = cfg_.model_depth;
  mo.unet.dropout = cfg_.dropout;
  model_ = nets::make_deblur_network(mo);
  kpn_ = nets::make_kernel_prediction_body(cfg_.m, cfg_.kpn_width, !cfg_.ablations.no_isotropic);
  wpn_ = nets::make_weight_prediction_body(cfg_.m, cfg_.wpn_width);
  estimator_ = flow::make_estimator(cfg_.estimator);

  std::mt19937_64 rng_model(derive_seed(cfg_.seed, 101));
  std::mt19937_64 rng_kpn(derive_seed(cfg_.seed, 102));
  std::mt19937_64 rng_wpn(derive_seed(cfg_.seed, 103));
  nets::he_init(model_->parameters(), rng_model);
  nets::he_init(kpn_.parameters("kpn"), rng_kpn);
  nets::he_init(wpn_.parameters("wpn"), rng_wpn);
}

std::vector<nets::ParamRef> Trainer::trainable_parameters() const {
  std::vector<nets::ParamRef> all = model_->parameters();
  for (auto& p : all) p.name = "deblur/" + p.name;
  for (const auto& p : kpn_.parameters("kpn")) all.push_back({"kpn/" + p.name, p.var});
  for (const auto& p : wpn_.parameters("wpn")) all.push_back({"wpn/" + p.name, p.var});
  return all;
}

std::pair<deform::FlowField, deform::FlowField> Trainer::flows_for(const Sample& sample, const Tensor& prediction,
                                                                   int epoch) {
  if (flow_source_policy(epoch, cfg_.init_epochs) == FlowInputs::kSharpAndBlurry) {
    if (sample.cacheable) {
      auto it = init_flow_cache_.find(sample.id);
      if (it != init_flow_cache_.end()) return it->second;
    }
    auto fwd = flow::estimate_flow(sample.sharp, sample.blurry, *estimator_);
    auto bwd = flow::estimate_flow(sample.blurry, sample.sharp, *estimator_);
    if (sample.cacheable) init_flow_cache_.emplace(sample.id, std::make_pair(fwd, bwd));
    return {fwd, bwd};
  }
  auto fwd = flow::estimate_flow(sample.sharp, prediction, *estimator_);
  auto bwd = flow::estimate_flow(prediction, sample.sharp, *estimator_);
  return {fwd, bwd};
}

Var Trainer::reblur_branch(const Var& prediction, const Var& blurry, Var* reblurred_out) {
  Var input = ops::concat_channels(prediction, blurry);
  std::vector<Var> levels;
  if (cfg_.ablations.no_isotropic) {
    // Free-form variant: the head emits raw cells directly, one block of
    // (2i-1)^2 channels per level, normalized per pixel without any radial
    // structure.
    Var raw = kpn_.forward(input);
    int offset = 0;
    for (int i = 2; i <= cfg_.m; ++i) {
      const int cells = (2 * i - 1) * (2 * i - 1);
      levels.push_back(ops::softmax_channels(ops::slice_channels(raw, offset, offset + cells)));
      offset += cells;
    }
  } else {
    Var seeds = kpn_.forward(input);
    levels = kernels::synthesize_bank_cells(seeds, cfg_.m, normalize_mode_);
  }

  Var reblurred;
  if (cfg_.ablations.no_wpn) {
    // Largest kernel level only; the weight head stays out of the graph.
    reblurred = reblur::apply_kernel_level(prediction, levels.back(), cfg_.m);
  } else {
    std::vector<Var> stack = reblur::assemble_reblur_stack(prediction, levels);
    Var weights = reblur::normalize_weights(wpn_.forward(input));
    reblurred = reblur::combine(stack, weights);
  }
  if (reblurred_out) *reblurred_out = reblurred;
  return reblur::reblur_loss(reblurred, blurry, cfg_.epsilon, reduction_);
}

StepLosses Trainer::forward_backward(const std::vector<Sample>& batch, int epoch, std::uint64_t step_index) {
  if (batch.empty()) throw ConfigError("empty training batch");
  std::mt19937_64 dropout_rng(derive_seed(cfg_.seed, 0x0d0 + static_cast<std::uint64_t>(epoch), step_index));

  Var total;
  StepLosses losses;
  for (const auto& sample : batch) {
    Var blurry = constant(sample.blurry);
    Var prediction = model_->forward(blurry, /*training=*/true, dropout_rng);

    Var deblur_term;
    if (cfg_.ablations.no_deform) {
      deblur_term =
          ops::charbonnier_mean(ops::sub(prediction, constant(sample.sharp)), cfg_.epsilon, Tensor());
    } else {
      auto [fwd, bwd] = flows_for(sample, prediction->value, epoch);
      deform::AdaptiveLossParts parts;
      deblur_term = deform::adaptive_deblur_loss(prediction, sample.sharp, fwd, bwd, cfg_.lambda, cfg_.epsilon,
                                                 !cfg_.ablations.no_cycle, !cfg_.ablations.no_mask, &parts);
      losses.deform_forward += parts.forward_term;
      losses.deform_backward += parts.backward_term;
    }
    losses.deblur += deblur_term->value[0];

    Var sample_loss = deblur_term;
    if (!cfg_.ablations.no_reblur) {
      Var reblur_term = reblur_branch(prediction, blurry);
      losses.reblur += reblur_term->value[0];
      sample_loss = ops::add(deblur_term, ops::scale(reblur_term, cfg_.alpha));
    }
    total = total ? ops::add(total, sample_loss) : sample_loss;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  total = ops::scale(total, inv);
  losses.deblur *= inv;
  losses.reblur *= inv;
  losses.deform_forward *= inv;
  losses.deform_backward *= inv;
  losses.total = total->value[0];
  if (!std::isfinite(losses.total)) {
    std::string ids;
    for (const auto& s : batch) ids += (ids.empty() ? "" : ", ") + s.id;
    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step_index) +
                       " (batch: " + ids + ")");
  }
  backward(total);
  return losses;
}

void Trainer::apply_update(int epoch) {
  opt_.step(trainable_parameters(), lr_schedule(epoch, cfg_.lr, cfg_.lr_halve_every));
}

StepLosses Trainer::train_step(const std::vector<Sample>& batch, int epoch, std::uint64_t step_index) {
  StepLosses losses = forward_backward(batch, epoch, step_index);
  apply_update(epoch);
  return losses;
}

namespace {

struct LoadedPair {
  Tensor blurry, sharp;
};

class PairLoader {
 public:
  explicit PairLoader(size_t capacity) : capacity_(capacity) {}
  const LoadedPair& get(const data::PairRecord& rec) {
    auto it = cache_.find(rec.identifier);
    if (it != cache_.end()) return it->second;
    if (cache_.size() >= capacity_) {
      cache_.erase(order_.front());
      order_.pop_front();
    }
    LoadedPair pair{img::read_png(rec.blurry_path), img::read_png(rec.sharp_path)};
    order_.push_back(rec.identifier);
    return cache_.emplace(rec.identifier, std::move(pair)).first->second;
  }

 private:
  size_t capacity_;
  std::unordered_map<std::string, LoadedPair> cache_;
  std::deque<std::string> order_;
};

Tensor crop_chw(const Tensor& t, int y0, int x0, int size) {
  const int C = t.dim(0), H = t.dim(1), W = t.dim(2);
  Tensor out({C, size, size});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < size; ++y)
      std::copy_n(t.data() + (static_cast<std::int64_t>(c) * H + y0 + y) * W + x0, size,
                  out.data() + (static_cast<std::int64_t>(c) * size + y) * size);
  return out;
}

}  // namespace

std::vector<EpochLog> Trainer::train() {
  if (cfg_.data_root.empty()) throw ConfigError("config: data_root is required for training");
  auto records = data::load_pair_dataset(cfg_.data_root);
  std::vector<data::PairRecord> train_set;
  for (auto& r : records)
    if (r.split == "train") train_set.push_back(r);
  if (train_set.empty()) throw ConfigError("no training pairs under " + cfg_.data_root);

  fs::create_directories(cfg_.out_dir);
  {
    std::ofstream cf(fs::path(cfg_.out_dir) / "config.json");
    cf << cfg_.to_json().dump(2) << "\n";
  }
  const fs::path log_path = fs::path(cfg_.out_dir) / "loss_log.csv";
  std::ofstream log(log_path, start_epoch_ > 0 ? std::ios::app : std::ios::out);
  if (start_epoch_ == 0) log << "epoch,loss_deblur,loss_reblur,loss_total,lr\n";

  PairLoader loader(128);
  std::vector<EpochLog> history;
  for (int epoch = start_epoch_; epoch < cfg_.epochs; ++epoch) {
    std::vector<size_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 order_rng(derive_seed(cfg_.seed, 0x0e0 + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), order_rng);

    EpochLog ep;
    ep.epoch = epoch;
    ep.lr = lr_schedule(epoch, cfg_.lr, cfg_.lr_halve_every);
    int steps = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg_.batch_size), ++steps) {
      std::mt19937_64 crop_rng(derive_seed(cfg_.seed, 0x0c0 + static_cast<std::uint64_t>(epoch),
                                           static_cast<std::uint64_t>(steps)));
      std::vector<Sample> batch;
      for (size_t k = start; k < std::min(order.size(), start + static_cast<size_t>(cfg_.batch_size)); ++k) {
        const auto& rec = train_set[order[k]];
        const LoadedPair& pair = loader.get(rec);
        Sample s;
        s.id = rec.identifier;
        const int H = pair.blurry.dim(1), W = pair.blurry.dim(2);
        const int size = std::min({cfg_.patch_size, H, W});
        if (size < H || size < W) {
          std::uniform_int_distribution<int> dy(0, H - size), dx(0, W - size);
          const int y0 = dy(crop_rng), x0 = dx(crop_rng);
          s.blurry = crop_chw(pair.blurry, y0, x0, size);
          s.sharp = crop_chw(pair.sharp, y0, x0, size);
        } else {
          s.blurry = pair.blurry;
          s.sharp = pair.sharp;
          s.cacheable = true;
        }
        batch.push_back(std::move(s));
      }
      StepLosses l = train_step(batch, epoch, static_cast<std::uint64_t>(steps));
      ep.deblur += l.deblur;
      ep.reblur += l.reblur;
      ep.total += l.total;
    }
    ep.deblur /= steps;
    ep.reblur /= steps;
    ep.total /= steps;
    char line[192];
    std::snprintf(line, sizeof(line), "%d,%.8f,%.8f,%.8f,%.3e\n", ep.epoch, ep.deblur, ep.reblur, ep.total, ep.lr);
    log << line;
    log.flush();
    history.push_back(ep);

    if ((epoch + 1) % cfg_.checkpoint_every == 0 || epoch + 1 == cfg_.epochs) {
      char name[48];
      std::snprintf(name, sizeof(name), "ckpt_epoch%04d.dbk", epoch + 1);
      save_checkpoint(fs::path(cfg_.out_dir) / name, epoch + 1);
      save_checkpoint(fs::path(cfg_.out_dir) / "ckpt_last.dbk", epoch + 1);
    }
  }
  return history;
}

Tensor Trainer::infer(const Tensor& blurry) { return infer_image(*model_, blurry); }

namespace {
constexpr char kCheckpointMagic[8] = {'D', 'B', 'K', 'C', 'K', 'P', 'T', '1'};
}

void Trainer::save_checkpoint(const fs::path& path, int next_epoch) {
  std::vector<nets::ParamRef> params = trainable_parameters();
  json meta;
  meta["epoch_next"] = next_epoch;
  meta["config_hash"] = cfg_.hash_hex();
  meta["adam_t"] = opt_.steps();
  json tensors = json::array();

  std::vector<const Tensor*> payload;
  std::int64_t offset = 0;
  auto add_tensor = [&](const std::string& key, const Tensor& t) {
    json jt;
    jt["key"] = key;
    jt["shape"] = t.shape();
    jt["offset"] = offset;
    jt["count"] = t.size();
    tensors.push_back(jt);
    payload.push_back(&t);
    offset += t.size();
  };
  for (const auto& p : params) add_tensor(p.name, p.var->value);
  for (const auto& p : params) {
    auto it = opt_.state().find(p.name);
    if (it != opt_.state().end()) {
      add_tensor("adam_m/" + p.name, it->second.first);
      add_tensor("adam_v/" + p.name, it->second.second);
    }
  }
  meta["tensors"] = tensors;

  const std::string header = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const Tensor* t : payload)
    out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

int Trainer::load_checkpoint(const fs::path& path, bool force) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  json meta = json::parse(header);

  const std::string saved_hash = meta.at("config_hash").get<std::string>();
  if (saved_hash != cfg_.hash_hex() && !force)
    throw ConfigError("checkpoint config hash " + saved_hash + " does not match current config " + cfg_.hash_hex() +
                      "; pass force to resume anyway");

  std::map<std::string, Tensor*> slots;
  std::vector<nets::ParamRef> params = trainable_parameters();
  for (auto& p : params) slots[p.name] = &p.var->value;
  for (const auto& p : params) {
    auto& st = opt_.state();
    auto it = st.find(p.name);
    if (it == st.end())
      it = st.emplace(p.name, std::make_pair(Tensor::zeros(p.var->value.shape()), Tensor::zeros(p.var->value.shape())))
               .first;
    slots["adam_m/" + p.name] = &it->second.first;
    slots["adam_v/" + p.name] = &it->second.second;
  }

  const std::streampos payload_start = in.tellg();
  for (const auto& jt : meta.at("tensors")) {
    const std::string key = jt.at("key").get<std::string>();
    auto it = slots.find(key);
    if (it == slots.end()) {
      if (!force) throw ConfigError("checkpoint tensor '" + key + "' has no destination in the current model");
      continue;
    }
    Tensor& dst = *it->second;
    const std::int64_t count = jt.at("count").get<std::int64_t>();
    if (count != dst.size())
      throw ConfigError("checkpoint tensor '" + key + "' size " + std::to_string(count) +
                        " does not match model size " + std::to_string(dst.size()));
    in.seekg(payload_start + static_cast<std::streamoff>(jt.at("offset").get<std::int64_t>() * sizeof(double)));
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(count * sizeof(double)));
  }
  if (!in) throw IoError("checkpoint payload truncated: " + path.string());
  opt_.set_steps(meta.at("adam_t").get<std::int64_t>());
  start_epoch_ = meta.at("epoch_next").get<int>();
  return start_epoch_;
}

Tensor infer_image(nets::DeblurNetwork& model, const Tensor& blurry) {
  std::mt19937_64 unused(0);
  return model.forward(constant(blurry), /*training=*/false, unused)->value;
}

Tensor infer_tiled(nets::DeblurNetwork& model, const Tensor& blurry, int tile, int margin) {
  const int C = blurry.dim(0), H = blurry.dim(1), W = blurry.dim(2);
  tile = std::min({tile, H, W});
  if (margin < 0 || 2 * margin >= tile) throw ConfigError("tile margin must satisfy 0 <= 2*margin < tile");
  const int step = tile - 2 * margin;

  Tensor acc({C, H, W});
  Tensor wsum({1, H, W});
  auto positions = [&](int extent) {
    std::vector<int> pos;
    for (int p = 0;; p += step) {
      if (p + tile >= extent) {
        pos.push_back(extent - tile);
        break;
      }
      pos.push_back(p);
    }
    return pos;
  };
  for (int ty : positions(H)) {
    for (int tx : positions(W)) {
      Tensor patch({C, tile, tile});
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < tile; ++y)
          std::copy_n(blurry.data() + (static_cast<std::int64_t>(c) * H + ty + y) * W + tx, tile,
                      patch.data() + (static_cast<std::int64_t>(c) * tile + y) * tile);
      Tensor out = infer_image(model, patch);
      // Keep the core; keep the rim only where it coincides with the image
      // border (there the whole-image pass sees the same padding context).
      const int y_lo = ty == 0 ? 0 : margin;
      const int y_hi = ty + tile == H ? tile : tile - margin;
      const int x_lo = tx == 0 ? 0 : margin;
      const int x_hi = tx + tile == W ? tile : tile - margin;
      for (int y = y_lo; y < y_hi; ++y)
        for (int x = x_lo; x < x_hi; ++x) {
          wsum[static_cast<std::int64_t>(ty + y) * W + tx + x] += 1.0;
          for (int c = 0; c < C; ++c)
            acc[(static_cast<std::int64_t>(c) * H + ty + y) * W + tx + x] +=
                out[(static_cast<std::int64_t>(c) * tile + y) * tile + x];
        }
    }
  }
  for (int c = 0; c < C; ++c)
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(H) * W; ++p) {
      const double w = wsum[p];
      if (w > 0.0) acc[static_cast<std::int64_t>(c) * H * W + p] /= w;
    }
  return acc;
}

}  // namespace dbk::train
