#pragma once

// Detection scoring: sigmoid-spaced precision/recall sweep, VOC-style AP,
// F1, average distance, activity classification and temporal smoothing.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "beamloc/geometry.hpp"
#include "beamloc/scenes.hpp"

namespace beamloc {

struct Detection {
  std::int64_t frame = 0;
  int view_id = 0;
  double x_hat_px = 0.0;
  double c_hat = 0.0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

struct PRPoint {
  double threshold = 0.0;
  double precision = 1.0;
  double recall = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

using PRCurve = std::vector<PRPoint>;

inline constexpr std::size_t kDefaultThresholdCount = 201;
inline constexpr double kThresholdRange = 8.0;
inline constexpr double kDefaultSmoothingSigma = 2.0;

/// 0, sigmoid(s_1), ..., sigmoid(s_{K-2}), 1 with s linearly spaced on
/// [-range, range]. Throws InputError for K < 3.
std::vector<double> sigmoid_thresholds(std::size_t count = kDefaultThresholdCount, double range = kThresholdRange);

/// One detection paired with its ground truth.
struct ScoredFrame {
  Detection det;
  bool active = false;
  double x_gt_px = 0.0;
};

/// Pairs detections and labels by (frame, view). Active records without a
/// position are dropped together with their detection. Throws InputError
/// for unmatched or duplicate keys.
std::vector<ScoredFrame> align(std::span<const Detection> detections, std::span<const LabelRecord> truth);

/// Positives at threshold t are detections with c_hat > t. A positive is a
/// true positive when its frame is active and |x_hat - x_gt| <= tolerance.
/// Every active frame without a true positive is a false negative.
/// Precision of an empty positive set is 1; recall without active frames 0.
PRCurve pr_curve(std::span<const ScoredFrame> frames, double tolerance_px, std::span<const double> thresholds);
PRCurve pr_curve(std::span<const Detection> detections, std::span<const LabelRecord> truth, double tolerance_px,
                 std::span<const double> thresholds);

/// Area under the monotone envelope p(r) = max_{r' >= r} precision(r'),
/// zero beyond the largest recall.
double voc_ap(const PRCurve& curve);

/// max over curve points of 2PR / (P + R).
double max_f1(const PRCurve& curve);

struct DistanceResult {
  double px = 0.0;
  double deg = 0.0;
  std::size_t count = 0;
  /// False when no frame qualified; px and deg are then NaN.
  bool defined = false;
};

/// Mean |x_hat - x_gt| over active frames with c_hat >= threshold, in
/// pixels and in degrees (azimuth difference under each view's camera).
DistanceResult average_distance(std::span<const ScoredFrame> frames, std::span<const CameraModel> cameras,
                                double confidence_threshold = 0.5);

/// Fraction of frames where (c_hat >= 0.5) agrees with activity.
double classification_accuracy(std::span<const ScoredFrame> frames);

/// Per view, replaces x_hat and c_hat with a Gaussian-weighted mean over
/// detections within 3 sigma frames, renormalized over frames present.
/// Output order matches the input. Throws InputError for sigma <= 0.
std::vector<Detection> gaussian_smooth(std::span<const Detection> detections, double sigma_frames);

/// Pixel tolerance equivalent to an angular tolerance for a camera.
double tolerance_px(const CameraModel& camera, double tolerance_deg);

struct MetricsReport {
  double ap_at_2deg = 0.0;
  double f1_at_2deg = 0.0;
  double ap_at_5deg = 0.0;
  double f1_at_5deg = 0.0;
  double ad_px = 0.0;
  double ad_deg = 0.0;
  double cls_accuracy = 0.0;
  bool ad_defined = false;
  std::size_t frames = 0;
  std::size_t active_frames = 0;
  /// Extra tolerance requested by the caller, if any.
  std::optional<double> custom_tolerance_deg;
  double ap_at_custom = 0.0;
  double f1_at_custom = 0.0;
  std::string config_hash;
  /// Full curves behind the AP figures; not part of report_json.
  PRCurve pr_at_2deg;
  PRCurve pr_at_5deg;
};

struct EvalOptions {
  std::size_t threshold_count = kDefaultThresholdCount;
  std::optional<double> custom_tolerance_deg;
};

MetricsReport evaluate(std::span<const Detection> detections, std::span<const LabelRecord> truth,
                       std::span<const CameraModel> cameras, const EvalOptions& options = {});
/// Scores frames already paired with their labels, e.g. pooled over scenes.
MetricsReport evaluate(std::span<const ScoredFrame> frames, std::span<const CameraModel> cameras,
                       const EvalOptions& options = {});

/// JSON object with fields in a fixed order.
std::string report_json(const MetricsReport& report);
void write_report(const std::filesystem::path& path, const MetricsReport& report);

/// CSV "frame,view,x_hat_px,c_hat", optionally preceded by one '#' comment.
void write_detections(const std::filesystem::path& path, std::span<const Detection> detections,
                      const std::string& comment = {});
std::vector<Detection> read_detections(const std::filesystem::path& path);

}  // namespace beamloc
