#include "beamloc/geometry.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include "beamloc/error.hpp"

namespace beamloc {
namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

std::string strip_comment(const std::string& line) {
  const auto hash = line.find('#');
  return hash == std::string::npos ? line : line.substr(0, hash);
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

double ArrayGeometry::distance(std::size_t i, std::size_t j) const {
  const Vec3& a = mic_positions.at(i);
  const Vec3& b = mic_positions.at(j);
  return std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) +
                   (a.z - b.z) * (a.z - b.z));
}

void validate_ava_geometry(const ArrayGeometry& geom) {
  if (geom.size() != kAvaMicCount) {
    throw InputError("array has " + std::to_string(geom.size()) + " microphones, expected 16");
  }
  if (!(geom.speed_of_sound > 0.0)) throw InputError("speed of sound must be positive");
  auto [xmin, xmax] = std::minmax_element(
      geom.mic_positions.begin(), geom.mic_positions.end(),
      [](const Vec3& a, const Vec3& b) { return a.x < b.x; });
  auto [ymin, ymax] = std::minmax_element(
      geom.mic_positions.begin(), geom.mic_positions.end(),
      [](const Vec3& a, const Vec3& b) { return a.y < b.y; });
  if (std::abs((xmax->x - xmin->x) - kAvaAperture) > 1e-9) {
    throw InputError("horizontal aperture is not 0.450 m");
  }
  if (ymax->y - ymin->y > kAvaVerticalAperture + 1e-12) {
    throw InputError("vertical aperture exceeds 0.040 m");
  }
  for (std::size_t i = 0; i < geom.size(); ++i) {
    for (std::size_t j = i + 1; j < geom.size(); ++j) {
      if (geom.distance(i, j) < 1e-9) {
        throw InputError("microphones " + std::to_string(i) + " and " + std::to_string(j) +
                         " coincide");
      }
    }
  }
}

ArrayGeometry default_ava_array() {
  constexpr int kPerSide = 8;
  constexpr double kInner = 0.010;
  constexpr double kOuter = kAvaAperture / 2.0;
  std::vector<double> offsets(kPerSide);
  const double ratio = std::pow(kOuter / kInner, 1.0 / (kPerSide - 1));
  for (int k = 0; k < kPerSide; ++k) offsets[k] = kInner * std::pow(ratio, k);
  offsets.back() = kOuter;
  // Pin the offset nearest 88.3 mm to the ORTF spacing.
  auto nearest = std::min_element(offsets.begin(), offsets.end(), [](double a, double b) {
    return std::abs(a - kOrtfHalfSpacing) < std::abs(b - kOrtfHalfSpacing);
  });
  *nearest = kOrtfHalfSpacing;
  const auto ortf_rank = static_cast<int>(nearest - offsets.begin());

  // Rank parity matching the ORTF pair sits on the y = 0 row.
  auto row_y = [&](int rank) {
    return (rank % 2) == (ortf_rank % 2) ? 0.0 : kAvaVerticalAperture;
  };

  ArrayGeometry geom;
  geom.mic_positions.reserve(kAvaMicCount);
  for (int k = kPerSide - 1; k >= 0; --k) geom.mic_positions.push_back({-offsets[k], row_y(k), 0.0});
  for (int k = 0; k < kPerSide; ++k) geom.mic_positions.push_back({offsets[k], row_y(k), 0.0});
  return geom;
}

std::size_t center_mic_index(const ArrayGeometry& geom) {
  if (geom.size() == 0) throw InputError("empty array");
  std::size_t best = 0;
  for (std::size_t i = 1; i < geom.size(); ++i) {
    if (std::abs(geom.mic_positions[i].x) < std::abs(geom.mic_positions[best].x)) best = i;
  }
  return best;
}

std::pair<std::size_t, std::size_t> ortf_pair_indices(const ArrayGeometry& geom) {
  auto find = [&](double x) {
    for (std::size_t i = 0; i < geom.size(); ++i) {
      const Vec3& p = geom.mic_positions[i];
      if (std::abs(p.x - x) < 1e-6 && std::abs(p.y) < 1e-6) return i;
    }
    throw InputError("array has no microphone at x = " + std::to_string(x) + " m, y = 0");
  };
  return {find(-kOrtfHalfSpacing), find(kOrtfHalfSpacing)};
}

Vec3 source_direction(double azimuth_deg, double elevation_deg) {
  const double az = azimuth_deg * kDegToRad;
  const double el = elevation_deg * kDegToRad;
  return {std::sin(az) * std::cos(el), std::sin(el), std::cos(az) * std::cos(el)};
}

std::vector<double> steering_delays(const ArrayGeometry& geom, double azimuth_deg,
                                    double elevation_deg) {
  if (std::abs(azimuth_deg) > 90.0) throw DomainError("steering azimuth outside [-90, 90] deg");
  const Vec3 u = source_direction(azimuth_deg, elevation_deg);
  std::vector<double> delays(geom.size());
  for (std::size_t i = 0; i < geom.size(); ++i) {
    delays[i] = -dot(geom.mic_positions[i], u) / geom.speed_of_sound;
  }
  return delays;
}

double default_focal_px() { return 89.0 / std::tan(2.0 * kDegToRad); }

void CameraModel::validate() const {
  if (!(focal_px > 0.0)) throw InputError("camera focal length must be positive");
  if (view_id < 0 || view_id >= kViewCount) {
    throw InputError("view id " + std::to_string(view_id) + " outside [0, 10]");
  }
  if (image_width_px <= 0 || image_height_px <= 0) throw InputError("image size must be positive");
}

double azimuth_to_pixel(const CameraModel& cam, double azimuth_deg) {
  if (!(std::abs(azimuth_deg) < 90.0)) {
    throw DomainError("azimuth " + std::to_string(azimuth_deg) + " deg has no image projection");
  }
  return cam.principal_x_px + cam.focal_px * std::tan(azimuth_deg * kDegToRad);
}

double pixel_to_azimuth(const CameraModel& cam, double x_px) {
  return std::atan((x_px - cam.principal_x_px) / cam.focal_px) / kDegToRad;
}

LookDirectionSet::LookDirectionSet(std::vector<double> azimuths_deg)
    : azimuths_(std::move(azimuths_deg)) {
  if (azimuths_.empty()) throw InputError("look direction set is empty");
  for (std::size_t i = 0; i < azimuths_.size(); ++i) {
    if (std::abs(azimuths_[i]) > 90.0) throw InputError("look azimuth outside [-90, 90] deg");
    if (i > 0 && !(azimuths_[i] > azimuths_[i - 1])) {
      throw InputError("look directions must be strictly ascending");
    }
  }
}

LookDirectionSet default_look_directions() { return look_direction_preset(15); }

LookDirectionSet look_direction_preset(std::size_t count) {
  switch (count) {
    case 3:
      return LookDirectionSet({-20, 0, 20});
    case 7:
      return LookDirectionSet({-45, -30, -15, 0, 15, 30, 45});
    case 15:
      return LookDirectionSet({-45, -30, -25, -20, -15, -10, -5, 0, 5, 10, 15, 20, 25, 30, 45});
    default:
      throw InputError("no look direction preset with " + std::to_string(count) + " entries");
  }
}

ArrayGeometry load_geometry(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open geometry file " + path.string());
  ArrayGeometry geom;
  std::vector<std::pair<long, Vec3>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_comment(line);
    if (blank(line)) continue;
    std::istringstream ss(line);
    std::string first;
    ss >> first;
    if (first == "speed_of_sound") {
      if (!(ss >> geom.speed_of_sound) || geom.speed_of_sound <= 0) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad speed_of_sound");
      }
      continue;
    }
    Vec3 p;
    std::string extra;
    long index = 0;
    try {
      index = std::stol(first);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad mic index");
    }
    if (!(ss >> p.x >> p.y >> p.z) || (ss >> extra)) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 'index x_m y_m z_m'");
    }
    rows.emplace_back(index, p);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].first != static_cast<long>(i)) {
      throw FormatError(path.string() + ": mic indices must run 0.." +
                        std::to_string(rows.size() - 1) + " in order");
    }
    geom.mic_positions.push_back(rows[i].second);
  }
  if (geom.mic_positions.empty()) throw FormatError(path.string() + ": no microphones");
  return geom;
}

void save_geometry(const std::filesystem::path& path, const ArrayGeometry& geom, const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write geometry file " + path.string());
  out.precision(17);
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "# index x_m y_m z_m\n";
  out << "speed_of_sound " << geom.speed_of_sound << "\n";
  for (std::size_t i = 0; i < geom.size(); ++i) {
    const Vec3& p = geom.mic_positions[i];
    out << i << ' ' << p.x << ' ' << p.y << ' ' << p.z << '\n';
  }
}

std::vector<CameraModel> load_cameras(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open camera file " + path.string());
  std::vector<CameraModel> cams;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_comment(line);
    if (blank(line)) continue;
    std::istringstream ss(line);
    CameraModel cam;
    std::string extra;
    if (!(ss >> cam.view_id >> cam.image_width_px >> cam.image_height_px >> cam.focal_px >>
          cam.principal_x_px) ||
        (ss >> extra)) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 'view_id width height focal_px principal_x'");
    }
    try {
      cam.validate();
    } catch (const InputError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    for (const auto& c : cams) {
      if (c.view_id == cam.view_id) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": duplicate view id");
      }
    }
    cams.push_back(cam);
  }
  if (cams.empty()) throw FormatError(path.string() + ": no cameras");
  return cams;
}

void save_cameras(const std::filesystem::path& path, std::span<const CameraModel> cams, const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write camera file " + path.string());
  out.precision(17);
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "# view_id width height focal_px principal_x\n";
  for (const auto& c : cams) {
    out << c.view_id << ' ' << c.image_width_px << ' ' << c.image_height_px << ' ' << c.focal_px
        << ' ' << c.principal_x_px << '\n';
  }
}

const CameraModel& camera_for_view(std::span<const CameraModel> cams, int view_id) {
  for (const auto& c : cams) {
    if (c.view_id == view_id) return c;
  }
  throw InputError("no camera for view " + std::to_string(view_id));
}

}  // namespace beamloc
