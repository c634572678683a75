#include "beamloc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "beamloc/error.hpp"
#include "json.hpp"

namespace beamloc {
namespace {

using Key = std::pair<std::int64_t, int>;

template <typename TolFn>
PRCurve sweep(std::span<const ScoredFrame> frames, TolFn tolerance_for, std::span<const double> thresholds) {
  for (std::size_t i = 1; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > thresholds[i - 1])) throw InputError("thresholds must be strictly increasing");
  }
  std::size_t n_active = 0;
  for (const auto& f : frames) n_active += f.active ? 1 : 0;
  PRCurve curve;
  curve.reserve(thresholds.size());
  for (double t : thresholds) {
    PRPoint p;
    p.threshold = t;
    for (const auto& f : frames) {
      if (!(f.det.c_hat > t)) continue;
      if (f.active && std::abs(f.det.x_hat_px - f.x_gt_px) <= tolerance_for(f)) {
        ++p.tp;
      } else {
        ++p.fp;
      }
    }
    p.fn = n_active - p.tp;
    p.precision = p.tp + p.fp == 0 ? 1.0 : static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fp);
    p.recall = n_active == 0 ? 0.0 : static_cast<double>(p.tp) / static_cast<double>(n_active);
    curve.push_back(p);
  }
  return curve;
}

std::string format_double(double v, const char* fmt) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

}  // namespace

std::vector<double> sigmoid_thresholds(std::size_t count, double range) {
  if (count < 3) throw InputError("at least 3 thresholds are needed");
  if (!(range > 0.0)) throw InputError("threshold range must be positive");
  std::vector<double> t(count);
  t.front() = 0.0;
  t.back() = 1.0;
  for (std::size_t k = 1; k + 1 < count; ++k) {
    const double s = -range + 2.0 * range * static_cast<double>(k) / static_cast<double>(count - 1);
    t[k] = 1.0 / (1.0 + std::exp(-s));
  }
  // the exact midpoint for odd counts
  if (count % 2 == 1) t[count / 2] = 0.5;
  return t;
}

std::vector<ScoredFrame> align(std::span<const Detection> detections, std::span<const LabelRecord> truth) {
  std::map<Key, const LabelRecord*> gt;
  for (const auto& r : truth) {
    if (!gt.emplace(Key{r.frame, r.view_id}, &r).second) {
      throw InputError("duplicate ground truth for frame " + std::to_string(r.frame) + ", view " +
                       std::to_string(r.view_id));
    }
  }
  std::map<Key, bool> seen;
  std::vector<ScoredFrame> out;
  out.reserve(detections.size());
  for (const auto& d : detections) {
    const Key key{d.frame, d.view_id};
    const auto it = gt.find(key);
    if (it == gt.end()) {
      throw InputError("detection for frame " + std::to_string(d.frame) + ", view " + std::to_string(d.view_id) +
                       " has no ground truth");
    }
    if (!seen.emplace(key, true).second) {
      throw InputError("duplicate detection for frame " + std::to_string(d.frame) + ", view " +
                       std::to_string(d.view_id));
    }
    if (!(d.c_hat >= 0.0 && d.c_hat <= 1.0)) throw InputError("detection confidence outside [0, 1]");
    const LabelRecord& r = *it->second;
    if (r.active && !r.x_px) continue;
    out.push_back({d, r.active, r.x_px.value_or(0.0)});
  }
  for (const auto& [key, rec] : gt) {
    if (rec->active && !rec->x_px) continue;
    if (!seen.contains(key)) {
      throw InputError("frame " + std::to_string(key.first) + ", view " + std::to_string(key.second) +
                       " has no detection");
    }
  }
  return out;
}

PRCurve pr_curve(std::span<const ScoredFrame> frames, double tolerance, std::span<const double> thresholds) {
  if (!(tolerance >= 0.0)) throw InputError("tolerance must be non-negative");
  return sweep(frames, [tolerance](const ScoredFrame&) { return tolerance; }, thresholds);
}

PRCurve pr_curve(std::span<const Detection> detections, std::span<const LabelRecord> truth, double tolerance,
                 std::span<const double> thresholds) {
  const auto frames = align(detections, truth);
  return pr_curve(frames, tolerance, thresholds);
}

double voc_ap(const PRCurve& curve) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& p : curve) pts.emplace_back(p.recall, p.precision);
  std::sort(pts.begin(), pts.end());
  // envelope: running max of precision from the high-recall end
  double best = 0.0;
  for (std::size_t i = pts.size(); i-- > 0;) {
    best = std::max(best, pts[i].second);
    pts[i].second = best;
  }
  double ap = 0.0, prev = 0.0;
  for (const auto& [r, p] : pts) {
    if (r > prev) {
      ap += (r - prev) * p;
      prev = r;
    }
  }
  return ap;
}

double max_f1(const PRCurve& curve) {
  double best = 0.0;
  for (const auto& p : curve) {
    if (p.precision + p.recall > 0.0) best = std::max(best, 2.0 * p.precision * p.recall / (p.precision + p.recall));
  }
  return best;
}

DistanceResult average_distance(std::span<const ScoredFrame> frames, std::span<const CameraModel> cameras,
                                double confidence_threshold) {
  DistanceResult out;
  double px = 0.0, deg = 0.0;
  for (const auto& f : frames) {
    if (!f.active || !(f.det.c_hat >= confidence_threshold)) continue;
    const auto& cam = camera_for_view(cameras, f.det.view_id);
    px += std::abs(f.det.x_hat_px - f.x_gt_px);
    deg += std::abs(pixel_to_azimuth(cam, f.det.x_hat_px) - pixel_to_azimuth(cam, f.x_gt_px));
    ++out.count;
  }
  out.defined = out.count > 0;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.px = out.defined ? px / static_cast<double>(out.count) : nan;
  out.deg = out.defined ? deg / static_cast<double>(out.count) : nan;
  return out;
}

double classification_accuracy(std::span<const ScoredFrame> frames) {
  if (frames.empty()) throw InputError("no frames to classify");
  std::size_t correct = 0;
  for (const auto& f : frames) correct += (f.det.c_hat >= 0.5) == f.active ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(frames.size());
}

std::vector<Detection> gaussian_smooth(std::span<const Detection> detections, double sigma_frames) {
  if (!(sigma_frames > 0.0)) throw InputError("smoothing sigma must be positive");
  std::map<int, std::vector<std::size_t>> by_view;
  for (std::size_t i = 0; i < detections.size(); ++i) by_view[detections[i].view_id].push_back(i);
  const double reach = 3.0 * sigma_frames;
  std::vector<Detection> out(detections.begin(), detections.end());
  for (auto& [view, idx] : by_view) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return detections[a].frame < detections[b].frame; });
    std::size_t lo = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto frame = detections[idx[i]].frame;
      while (static_cast<double>(frame - detections[idx[lo]].frame) > reach) ++lo;
      double wsum = 0.0, x = 0.0, c = 0.0;
      for (std::size_t j = lo; j < idx.size(); ++j) {
        const auto d = static_cast<double>(detections[idx[j]].frame - frame);
        if (d > reach) break;
        const double w = std::exp(-0.5 * d * d / (sigma_frames * sigma_frames));
        wsum += w;
        x += w * detections[idx[j]].x_hat_px;
        c += w * detections[idx[j]].c_hat;
      }
      out[idx[i]].x_hat_px = x / wsum;
      out[idx[i]].c_hat = std::clamp(c / wsum, 0.0, 1.0);
    }
  }
  return out;
}

double tolerance_px(const CameraModel& camera, double tolerance_deg) {
  if (!(tolerance_deg > 0.0 && tolerance_deg < 90.0)) throw InputError("tolerance must lie in (0, 90) degrees");
  return camera.focal_px * std::tan(tolerance_deg * std::numbers::pi / 180.0);
}

MetricsReport evaluate(std::span<const Detection> detections, std::span<const LabelRecord> truth,
                       std::span<const CameraModel> cameras, const EvalOptions& options) {
  const auto frames = align(detections, truth);
  return evaluate(frames, cameras, options);
}

MetricsReport evaluate(std::span<const ScoredFrame> frames, std::span<const CameraModel> cameras,
                       const EvalOptions& options) {
  if (frames.empty()) throw InputError("nothing to evaluate");
  const auto thresholds = sigmoid_thresholds(options.threshold_count);
  auto curve_at = [&](double deg) {
    return sweep(
        frames, [&](const ScoredFrame& f) { return tolerance_px(camera_for_view(cameras, f.det.view_id), deg); },
        thresholds);
  };
  MetricsReport r;
  const auto c2 = curve_at(2.0);
  const auto c5 = curve_at(5.0);
  r.ap_at_2deg = voc_ap(c2);
  r.f1_at_2deg = max_f1(c2);
  r.ap_at_5deg = voc_ap(c5);
  r.f1_at_5deg = max_f1(c5);
  r.pr_at_2deg = c2;
  r.pr_at_5deg = c5;
  if (options.custom_tolerance_deg) {
    const auto cc = curve_at(*options.custom_tolerance_deg);
    r.custom_tolerance_deg = options.custom_tolerance_deg;
    r.ap_at_custom = voc_ap(cc);
    r.f1_at_custom = max_f1(cc);
  }
  const auto ad = average_distance(frames, cameras);
  r.ad_px = ad.px;
  r.ad_deg = ad.deg;
  r.ad_defined = ad.defined;
  r.cls_accuracy = classification_accuracy(frames);
  r.frames = frames.size();
  for (const auto& f : frames) r.active_frames += f.active ? 1 : 0;
  return r;
}

std::string report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr); };
  j["ap_at_2deg"] = r.ap_at_2deg;
  j["f1_at_2deg"] = r.f1_at_2deg;
  j["ap_at_5deg"] = r.ap_at_5deg;
  j["f1_at_5deg"] = r.f1_at_5deg;
  j["ad_px"] = num(r.ad_px);
  j["ad_deg"] = num(r.ad_deg);
  j["cls_accuracy"] = r.cls_accuracy;
  j["ad_defined"] = r.ad_defined;
  j["frames"] = r.frames;
  j["active_frames"] = r.active_frames;
  if (r.custom_tolerance_deg) {
    j["custom_tolerance_deg"] = *r.custom_tolerance_deg;
    j["ap_at_custom"] = r.ap_at_custom;
    j["f1_at_custom"] = r.f1_at_custom;
  }
  j["config_hash"] = r.config_hash;
  return j.dump(2) + "\n";
}

void write_report(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << report_json(report);
}

void write_detections(const std::filesystem::path& path, std::span<const Detection> detections,
                      const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "frame,view,x_hat_px,c_hat\n";
  for (const auto& d : detections) {
    out << d.frame << ',' << d.view_id << ',' << format_double(d.x_hat_px, "%.6f") << ','
        << format_double(d.c_hat, "%.9f") << '\n';
  }
}

std::vector<Detection> read_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  int lineno = 1;
  bool have_line = static_cast<bool>(std::getline(in, line));
  for (; have_line && line.starts_with('#'); ++lineno) have_line = static_cast<bool>(std::getline(in, line));
  if (!have_line || line != "frame,view,x_hat_px,c_hat") {
    throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected header frame,view,x_hat_px,c_hat");
  }
  std::vector<Detection> out;
  std::map<Key, bool> seen;
  std::string errors;
  for (++lineno; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::istringstream row(line);
    Detection d;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(row >> d.frame >> c1 >> d.view_id >> c2 >> d.x_hat_px >> c3 >> d.c_hat) || c1 != ',' || c2 != ',' ||
        c3 != ',') {
      errors += path.string() + ":" + std::to_string(lineno) + ": malformed row\n";
      continue;
    }
    if (!(d.c_hat >= 0.0 && d.c_hat <= 1.0)) {
      errors += path.string() + ":" + std::to_string(lineno) + ": c_hat outside [0, 1]\n";
      continue;
    }
    if (!seen.emplace(Key{d.frame, d.view_id}, true).second) {
      errors += path.string() + ":" + std::to_string(lineno) + ": duplicate (frame, view)\n";
      continue;
    }
    out.push_back(d);
  }
  if (!errors.empty()) throw FormatError(errors);
  return out;
}

}  // namespace beamloc
