#include "deblurkit/eval_harness.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include <nlohmann/json.hpp>

#include "deblurkit/common.hpp"
#include "deblurkit/deformation.hpp"
#include "deblurkit/image_io.hpp"
#include "deblurkit/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dbk::eval {

Mode mode_from_string(const std::string& name) {
  if (name == "gt") return Mode::kGt;
  if (name == "deformed_gt") return Mode::kDeformedGt;
  if (name == "both") return Mode::kBoth;
  throw ConfigError("unknown evaluation mode '" + name + "' (gt | deformed_gt | both)");
}

MetricRow evaluate_gt(const std::string& id, const Tensor& prediction, const Tensor& ground_truth) {
  MetricRow row;
  row.id = id;
  row.mode = "gt";
  row.psnr = metrics::psnr(prediction, ground_truth);
  row.ssim = metrics::ssim(prediction, ground_truth);
  row.mae = metrics::mae(prediction, ground_truth);
  return row;
}

std::vector<MetricRow> deformed_gt_evaluate(const std::string& id, const Tensor& prediction,
                                            const Tensor& ground_truth, flow::FlowEstimator& estimator, Mode mode) {
  if (!prediction.same_shape(ground_truth))
    throw ShapeError("deformed_gt_evaluate: prediction " + shape_str(prediction) + " vs ground truth " +
                     shape_str(ground_truth));
  std::vector<MetricRow> rows;
  if (mode == Mode::kGt || mode == Mode::kBoth) rows.push_back(evaluate_gt(id, prediction, ground_truth));
  if (mode == Mode::kDeformedGt || mode == Mode::kBoth) {
    deform::FlowField f = flow::estimate_flow(ground_truth, prediction, estimator);
    Tensor deformed = deform::warp(ground_truth, f);
    MetricRow row;
    row.id = id;
    row.mode = "deformed_gt";
    row.psnr = metrics::psnr(prediction, deformed);
    row.ssim = metrics::ssim(prediction, deformed);
    row.mae = metrics::mae(prediction, deformed);
    rows.push_back(row);
  }
  return rows;
}

std::map<std::string, Aggregate> MetricReport::aggregates() const {
  std::map<std::string, Aggregate> agg;
  for (const auto& row : rows) {
    Aggregate& a = agg[row.mode];
    a.psnr += row.psnr;
    a.ssim += row.ssim;
    a.mae += row.mae;
    a.count += 1;
  }
  for (auto& [_, a] : agg) {
    a.psnr /= a.count;
    a.ssim /= a.count;
    a.mae /= a.count;
  }
  return agg;
}

void MetricReport::sort_rows() {
  std::sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) {
    if (a.id != b.id) return a.id < b.id;
    return a.mode < b.mode;
  });
}

void write_report(const MetricReport& report, const fs::path& csv_path) {
  MetricReport sorted = report;
  sorted.sort_rows();

  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) throw IoError("cannot write report: " + csv_path.string());
  csv << "id,mode,psnr,ssim,mae\n";
  char line[256];
  for (const auto& row : sorted.rows) {
    std::snprintf(line, sizeof(line), "%s,%s,%.6f,%.6f,%.6f\n", row.id.c_str(), row.mode.c_str(), row.psnr, row.ssim,
                  row.mae);
    csv << line;
  }

  json sidecar;
  sidecar["aggregates"] = json::object();
  for (const auto& [mode, a] : sorted.aggregates()) {
    char buf[64];
    json ja;
    std::snprintf(buf, sizeof(buf), "%.6f", a.psnr);
    ja["psnr"] = std::stod(buf);
    std::snprintf(buf, sizeof(buf), "%.6f", a.ssim);
    ja["ssim"] = std::stod(buf);
    std::snprintf(buf, sizeof(buf), "%.6f", a.mae);
    ja["mae"] = std::stod(buf);
    ja["count"] = a.count;
    sidecar["aggregates"][mode] = ja;
  }
  sidecar["metadata"] = report.metadata;
  sidecar["failures"] = report.failures;
  std::ofstream js(csv_path.string() + ".json", std::ios::binary);
  js << sidecar.dump(2) << "\n";
}

MetricReport evaluate_directories(const fs::path& pred_dir, const fs::path& gt_dir, Mode mode,
                                  const std::string& estimator_name) {
  if (!fs::is_directory(pred_dir) || !fs::is_directory(gt_dir))
    throw IoError("evaluation expects prediction and ground-truth directories");
  auto estimator = flow::make_estimator(estimator_name);

  std::set<std::string> ids;
  for (const auto& e : fs::directory_iterator(pred_dir))
    if (e.is_regular_file() && e.path().extension() == ".png") ids.insert(e.path().stem().string());

  MetricReport report;
  report.metadata["estimator"] = estimator_name;
  report.metadata["predictions"] = pred_dir.string();
  report.metadata["dataset"] = gt_dir.string();
  for (const auto& id : ids) {
    const fs::path gt_path = gt_dir / (id + ".png");
    if (!fs::exists(gt_path)) throw IoError("prediction without ground truth: " + id);
    Tensor pred = img::read_png(pred_dir / (id + ".png"));
    Tensor gt = img::read_png(gt_path);
    if (mode == Mode::kGt) {
      report.rows.push_back(evaluate_gt(id, pred, gt));
      continue;
    }
    try {
      auto rows = deformed_gt_evaluate(id, pred, gt, *estimator, mode);
      report.rows.insert(report.rows.end(), rows.begin(), rows.end());
    } catch (const FlowEstimationError& e) {
      // Flagged and excluded from the aggregates; the gt row is still usable.
      std::cerr << "[deblurkit] warning: " << e.what() << " (id " << id << ")\n";
      report.failures.push_back(id);
      if (mode == Mode::kBoth) report.rows.push_back(evaluate_gt(id, pred, gt));
    }
  }
  report.sort_rows();
  return report;
}

}  // namespace dbk::eval
