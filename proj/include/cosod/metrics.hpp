#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace cosod {

// Prediction in [0, 1] or binary ground truth, row-major.
using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr int kThresholds = 256;

double mae(const Plane& pred, const Plane& gt);

// Per-threshold confusion counts. A pixel is foreground at threshold k/255
// when its quantized value round(255 p) is >= k.
struct ThresholdCounts {
  std::array<std::int64_t, kThresholds> tp{};
  std::array<std::int64_t, kThresholds> predicted{};
  std::int64_t positives = 0;
  std::int64_t pixels = 0;
};

ThresholdCounts threshold_counts(const Plane& pred, const Plane& gt);

struct PrPoint {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
  double f = 0;
};

struct FCurve {
  double f_max = 0;
  std::array<PrPoint, kThresholds> points{};
  int excluded = 0;  // images with empty ground truth
};

// Per-image precision and recall averaged per threshold, then F-beta, then
// the maximum over thresholds.
FCurve f_curve(const std::vector<Plane>& preds, const std::vector<Plane>& gts, double beta_sq = 0.3);

double s_measure(const Plane& pred, const Plane& gt, double alpha = 0.5);

// Enhanced-alignment score of the binarized prediction at every threshold.
std::array<double, kThresholds> e_measure_curve(const Plane& pred, const Plane& gt);
double e_measure_max(const Plane& pred, const Plane& gt);

struct ImageMetrics {
  std::string key;
  double mae = 0;
  double s_alpha = 0;
  double e_max = 0;
};

struct MetricsReport {
  double mae = 0;
  double f_max = 0;
  double s_alpha = 0;
  double e_max = 0;
  std::array<PrPoint, kThresholds> pr_points{};
  std::vector<ImageMetrics> per_image;
  int n_images = 0;
  int warnings = 0;
  std::vector<std::string> warning_messages;
};

// Pairs are reduced in the given order; callers sort keys first.
MetricsReport evaluate(const std::vector<Plane>& preds, const std::vector<Plane>& gts,
                       const std::vector<std::string>& keys);

// Every *.pgm under each directory is keyed by its nearest group_* ancestor
// and stem. Unmatched files are warnings; no matched pair is a usage error.
MetricsReport evaluate_dataset(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir);

std::string report_json(const MetricsReport& report);
std::string pr_csv(const MetricsReport& report);

}  // namespace cosod
