#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "deblurkit/flow.hpp"
#include "deblurkit/tensor.hpp"

namespace dbk::eval {

// Two evaluation modes: "gt" compares against the ground truth as-is;
// "deformed_gt" first deforms the ground truth toward the prediction so
// residual misalignment does not dominate the metrics.
enum class Mode { kGt, kDeformedGt, kBoth };
Mode mode_from_string(const std::string& name);

struct MetricRow {
  std::string id;
  std::string mode;  // "gt" or "deformed_gt"
  double psnr = 0.0;
  double ssim = 0.0;
  double mae = 0.0;
};

struct Aggregate {
  double psnr = 0.0, ssim = 0.0, mae = 0.0;
  int count = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  std::map<std::string, std::string> metadata;  // model, dataset, config_hash, estimator, ...
  std::vector<std::string> failures;            // ids whose deformed evaluation failed

  std::map<std::string, Aggregate> aggregates() const;  // arithmetic means per mode
  void sort_rows();
};

MetricRow evaluate_gt(const std::string& id, const Tensor& prediction, const Tensor& ground_truth);

// Returns the gt row and, when requested, the deformed-gt row computed
// against warp(gt, flow(gt -> prediction)).
std::vector<MetricRow> deformed_gt_evaluate(const std::string& id, const Tensor& prediction,
                                            const Tensor& ground_truth, flow::FlowEstimator& estimator,
                                            Mode mode = Mode::kBoth);

// CSV (`id,mode,psnr,ssim,mae`) plus a JSON sidecar (path + ".json") with the
// aggregates, metadata and failures. Output bytes are stable across reruns.
void write_report(const MetricReport& report, const std::filesystem::path& csv_path);

// Directory protocol: predictions and ground truths matched by filename.
MetricReport evaluate_directories(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                                  Mode mode, const std::string& estimator_name);

}  // namespace dbk::eval
