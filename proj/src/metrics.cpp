#include "cosod/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include <json.hpp>

#include "cosod/imageio.hpp"
#include "cosod/tensor.hpp"

namespace cosod {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();
// Guards precision and recall of empty predictions.
constexpr double kPrEps = 1e-12;

void check_same(const Plane& pred, const Plane& gt, const char* what) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw ShapeError(std::string(what) + ": prediction " + std::to_string(pred.rows()) + "x" +
                     std::to_string(pred.cols()) + " vs ground truth " + std::to_string(gt.rows()) + "x" +
                     std::to_string(gt.cols()));
  if (pred.size() == 0) throw ShapeError(std::string(what) + ": empty map");
}

// SSIM of one block, with the N - 1 normalization of the reference code.
double block_ssim(const Plane& pred, const Plane& gt) {
  const double n = static_cast<double>(pred.size());
  if (n == 0) return 0.0;
  const double x = pred.mean();
  const double y = gt.mean();
  const double sx2 = (pred - x).square().sum() / (n - 1 + kEps);
  const double sy2 = (gt - y).square().sum() / (n - 1 + kEps);
  const double sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + kEps);
  const double a = 4 * x * y * sxy;
  const double b = (x * x + y * y) * (sx2 + sy2);
  if (a != 0) return a / (b + kEps);
  return b == 0 ? 1.0 : 0.0;
}

// Mean-and-spread similarity of the selected pixels to an all-ones map.
double object_score(const Plane& values, const Plane& select) {
  std::vector<double> v;
  for (Eigen::Index i = 0; i < values.size(); ++i)
    if (select(i) != 0) v.push_back(values(i));
  if (v.empty()) return 0.0;
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double sd = 0;
  if (v.size() > 1) {
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
  }
  return 2 * mean / (mean * mean + 1 + sd + kEps);
}

double s_object(const Plane& pred, const Plane& gt) {
  const Plane fg = (gt != 0).select(pred, 0.0);
  const Plane bg = (gt != 0).select(0.0, 1.0 - pred);
  const Plane not_gt = (gt == 0).cast<double>();
  const double u = gt.mean();
  return u * object_score(fg, gt) + (1 - u) * object_score(bg, not_gt);
}

double s_region(const Plane& pred, const Plane& gt) {
  const Eigen::Index rows = gt.rows(), cols = gt.cols();
  const double total = gt.sum();
  double sx = 0, sy = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      sx += gt(r, c) * static_cast<double>(c + 1);
      sy += gt(r, c) * static_cast<double>(r + 1);
    }
  // 1-based centroid, rounded half away from zero.
  const Eigen::Index x = static_cast<Eigen::Index>(std::round(sx / total));
  const Eigen::Index y = static_cast<Eigen::Index>(std::round(sy / total));
  const double area = static_cast<double>(rows * cols);
  const double w1 = static_cast<double>(x * y) / area;
  const double w2 = static_cast<double>((cols - x) * y) / area;
  const double w3 = static_cast<double>(x * (rows - y)) / area;
  const double w4 = 1 - w1 - w2 - w3;
  auto q = [&](Eigen::Index r0, Eigen::Index c0, Eigen::Index nr, Eigen::Index nc) {
    if (nr == 0 || nc == 0) return 0.0;
    return block_ssim(pred.block(r0, c0, nr, nc), gt.block(r0, c0, nr, nc));
  };
  return w1 * q(0, 0, y, x) + w2 * q(0, x, y, cols - x) + w3 * q(y, 0, rows - y, x) +
         w4 * q(y, x, rows - y, cols - x);
}

double enhanced(double a, double b) {
  const double align = 2 * a * b / (a * a + b * b + kEps);
  return (align + 1) * (align + 1) / 4;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double mae(const Plane& pred, const Plane& gt) {
  check_same(pred, gt, "mae");
  return (pred - gt).abs().mean();
}

ThresholdCounts threshold_counts(const Plane& pred, const Plane& gt) {
  check_same(pred, gt, "threshold_counts");
  std::array<std::int64_t, kThresholds> hist_all{}, hist_fg{};
  ThresholdCounts c;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const int q = quantize_byte(pred(i));
    ++hist_all[q];
    if (gt(i) != 0) {
      ++hist_fg[q];
      ++c.positives;
    }
  }
  c.pixels = pred.size();
  std::int64_t all = 0, fg = 0;
  for (int k = kThresholds - 1; k >= 0; --k) {
    all += hist_all[k];
    fg += hist_fg[k];
    c.predicted[k] = all;
    c.tp[k] = fg;
  }
  return c;
}

FCurve f_curve(const std::vector<Plane>& preds, const std::vector<Plane>& gts, double beta_sq) {
  if (preds.size() != gts.size()) throw ShapeError("f_curve: prediction and ground-truth counts differ");
  if (preds.empty()) throw UsageError("f_curve: empty dataset");
  FCurve out;
  std::array<double, kThresholds> p_sum{}, r_sum{};
  int used = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const ThresholdCounts c = threshold_counts(preds[i], gts[i]);
    if (c.positives == 0) {
      ++out.excluded;
      continue;
    }
    ++used;
    for (int k = 0; k < kThresholds; ++k) {
      const double tp = static_cast<double>(c.tp[k]);
      p_sum[k] += tp / (static_cast<double>(c.predicted[k]) + kPrEps);
      r_sum[k] += tp / (static_cast<double>(c.positives) + kPrEps);
    }
  }
  for (int k = 0; k < kThresholds; ++k) {
    PrPoint& pt = out.points[k];
    pt.threshold = k / 255.0;
    if (used == 0) continue;
    pt.precision = p_sum[k] / used;
    pt.recall = r_sum[k] / used;
    const double den = beta_sq * pt.precision + pt.recall;
    pt.f = den > 0 ? (1 + beta_sq) * pt.precision * pt.recall / den : 0.0;
    out.f_max = std::max(out.f_max, pt.f);
  }
  return out;
}

double s_measure(const Plane& pred, const Plane& gt, double alpha) {
  check_same(pred, gt, "s_measure");
  const double y = gt.mean();
  double q;
  if (y == 0) {
    q = 1 - pred.mean();
  } else if (y == 1) {
    q = pred.mean();
  } else {
    q = alpha * s_object(pred, gt) + (1 - alpha) * s_region(pred, gt);
  }
  return std::clamp(q, 0.0, 1.0);
}

std::array<double, kThresholds> e_measure_curve(const Plane& pred, const Plane& gt) {
  const ThresholdCounts c = threshold_counts(pred, gt);
  const double n = static_cast<double>(c.pixels);
  std::array<double, kThresholds> out{};
  for (int k = 0; k < kThresholds; ++k) {
    const double fg = static_cast<double>(c.predicted[k]);
    if (c.positives == 0) {
      out[k] = (n - fg) / n;
      continue;
    }
    if (c.positives == c.pixels) {
      out[k] = fg / n;
      continue;
    }
    const double tp = static_cast<double>(c.tp[k]);
    const double fp = fg - tp;
    const double fn = static_cast<double>(c.positives) - tp;
    const double tn = n - tp - fp - fn;
    const double mu_p = fg / n;
    const double mu_g = static_cast<double>(c.positives) / n;
    const double sum = tp * enhanced(1 - mu_p, 1 - mu_g) + fp * enhanced(1 - mu_p, -mu_g) +
                       fn * enhanced(-mu_p, 1 - mu_g) + tn * enhanced(-mu_p, -mu_g);
    out[k] = sum / n;
  }
  return out;
}

double e_measure_max(const Plane& pred, const Plane& gt) {
  const auto curve = e_measure_curve(pred, gt);
  return *std::max_element(curve.begin(), curve.end());
}

MetricsReport evaluate(const std::vector<Plane>& preds, const std::vector<Plane>& gts,
                       const std::vector<std::string>& keys) {
  if (preds.size() != gts.size() || preds.size() != keys.size())
    throw ShapeError("evaluate: prediction, ground-truth and key counts differ");
  if (preds.empty()) throw UsageError("evaluate: no prediction / ground-truth pairs");
  MetricsReport r;
  std::array<double, kThresholds> e_sum{};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ImageMetrics m;
    m.key = keys[i];
    m.mae = mae(preds[i], gts[i]);
    m.s_alpha = s_measure(preds[i], gts[i]);
    const auto curve = e_measure_curve(preds[i], gts[i]);
    m.e_max = *std::max_element(curve.begin(), curve.end());
    for (int k = 0; k < kThresholds; ++k) e_sum[k] += curve[k];
    r.mae += m.mae;
    r.s_alpha += m.s_alpha;
    r.per_image.push_back(m);
  }
  const double n = static_cast<double>(preds.size());
  r.n_images = static_cast<int>(preds.size());
  r.mae /= n;
  r.s_alpha /= n;
  r.e_max = 0;
  for (double e : e_sum) r.e_max = std::max(r.e_max, e / n);
  const FCurve f = f_curve(preds, gts);
  r.f_max = f.f_max;
  r.pr_points = f.points;
  if (f.excluded) {
    r.warnings += f.excluded;
    r.warning_messages.push_back(std::to_string(f.excluded) +
                                 " image(s) with empty ground truth excluded from the F-measure");
  }
  return r;
}

namespace {

namespace fs = std::filesystem;

std::string file_key(const fs::path& root, const fs::path& file) {
  for (fs::path dir = file.parent_path(); !dir.empty() && dir != root && dir != dir.parent_path();
       dir = dir.parent_path())
    if (dir.filename().string().rfind("group_", 0) == 0) return dir.filename().string() + "/" + file.stem().string();
  return file.stem().string();
}

std::map<std::string, fs::path> index_maps(const fs::path& root, MetricsReport& report) {
  if (!fs::is_directory(root)) throw IoError("not a directory: " + root.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::map<std::string, fs::path> out;
  for (const auto& f : files) {
    const std::string key = file_key(root, f);
    if (!out.emplace(key, f).second) {
      ++report.warnings;
      report.warning_messages.push_back("duplicate key " + key + ": " + f.string());
    }
  }
  return out;
}

Plane plane_from(const ByteImage& img, bool binary) {
  if (img.channels != 1) throw ParseError("expected a gray map");
  Plane p(img.h, img.w);
  for (Eigen::Index i = 0; i < p.size(); ++i)
    p(i) = binary ? (img.data[i] >= 128 ? 1.0 : 0.0) : img.data[i] / 255.0;
  return p;
}

}  // namespace

MetricsReport evaluate_dataset(const fs::path& pred_dir, const fs::path& gt_dir) {
  MetricsReport scan;
  const auto preds = index_maps(pred_dir, scan);
  const auto gts = index_maps(gt_dir, scan);
  std::vector<Plane> p, g;
  std::vector<std::string> keys;
  for (const auto& [key, path] : preds) {
    auto it = gts.find(key);
    if (it == gts.end()) {
      ++scan.warnings;
      scan.warning_messages.push_back("no ground truth for " + path.string());
      continue;
    }
    p.push_back(plane_from(read_pnm(path), false));
    g.push_back(plane_from(read_pnm(it->second), true));
    keys.push_back(key);
  }
  for (const auto& [key, path] : gts)
    if (!preds.count(key)) {
      ++scan.warnings;
      scan.warning_messages.push_back("no prediction for " + path.string());
    }
  if (keys.empty()) throw UsageError("no matching prediction / ground-truth files");
  MetricsReport r = evaluate(p, g, keys);
  r.warnings += scan.warnings;
  r.warning_messages.insert(r.warning_messages.begin(), scan.warning_messages.begin(), scan.warning_messages.end());
  return r;
}

std::string report_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["mae"] = report.mae;
  j["f_max"] = report.f_max;
  j["s_alpha"] = report.s_alpha;
  j["e_max"] = report.e_max;
  j["n_images"] = report.n_images;
  j["warnings"] = report.warnings;
  return j.dump(2) + "\n";
}

std::string pr_csv(const MetricsReport& report) {
  std::string out = "threshold,precision,recall\n";
  for (const auto& pt : report.pr_points)
    out += format_double(pt.threshold) + "," + format_double(pt.precision) + "," + format_double(pt.recall) + "\n";
  return out;
}

}  // namespace cosod
