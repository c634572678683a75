#pragma once

// Microphone-array geometry, far-field steering delays and the pinhole camera
// model used to move between azimuth and horizontal pixel coordinates.

#include <cstddef>
#include <filesystem>
#include <utility>
#include <span>
#include <string>
#include <vector>

namespace beamloc {

struct Vec3 {
  double x = 0.0;  // horizontal, positive to the camera's right
  double y = 0.0;  // vertical
  double z = 0.0;  // broadside, toward the scene

  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

inline constexpr std::size_t kAvaMicCount = 16;
inline constexpr double kAvaAperture = 0.450;
inline constexpr double kAvaVerticalAperture = 0.040;
inline constexpr double kOrtfHalfSpacing = 0.0883;

struct ArrayGeometry {
  std::vector<Vec3> mic_positions;
  double speed_of_sound = 343.0;

  std::size_t size() const { return mic_positions.size(); }
  double distance(std::size_t i, std::size_t j) const;
};

/// Checks the invariants of the 16-element rig: element count, 450 mm
/// horizontal aperture, at most 40 mm vertical aperture, distinct positions.
/// Throws InputError naming the first violation.
void validate_ava_geometry(const ArrayGeometry& geom);

/// Nominal layout of the 16-element rig: 8 log-spaced x positions per side
/// between 10 mm and 225 mm, the +-88.3 mm pair pinned, rows at y = 0 and
/// y = 40 mm alternating, all on the z = 0 plane. Mics are ordered by x.
ArrayGeometry default_ava_array();

/// Index of the microphone horizontally closest to the array centre (first
/// on ties); the mono front end.
std::size_t center_mic_index(const ArrayGeometry& geom);

/// Indices of the two microphones at x = -88.3 mm and x = +88.3 mm, y = 0.
std::pair<std::size_t, std::size_t> ortf_pair_indices(const ArrayGeometry& geom);

/// Unit vector pointing from the array origin toward a far-field source.
Vec3 source_direction(double azimuth_deg, double elevation_deg);

/// Plane-wave arrival time at each microphone relative to the array origin,
/// in seconds: delay_i = -(p_i . u) / c. Requires |azimuth| <= 90 deg.
std::vector<double> steering_delays(const ArrayGeometry& geom, double azimuth_deg,
                                    double elevation_deg = 0.0);

inline constexpr int kImageWidthPx = 2448;
inline constexpr int kImageHeightPx = 2048;
inline constexpr int kViewCount = 11;

/// Focal length that maps a 2 degree offset from the optical axis onto
/// exactly 89 pixels.
double default_focal_px();

struct CameraModel {
  int image_width_px = kImageWidthPx;
  int image_height_px = kImageHeightPx;
  double focal_px = default_focal_px();
  double principal_x_px = kImageWidthPx / 2.0;
  int view_id = 0;

  void validate() const;
  bool in_frame(double x_px) const { return x_px >= 0.0 && x_px < image_width_px; }
};

/// pixel = principal_x + focal * tan(azimuth). Throws DomainError for
/// |azimuth| >= 90 deg.
double azimuth_to_pixel(const CameraModel& cam, double azimuth_deg);
double pixel_to_azimuth(const CameraModel& cam, double x_px);

/// Ordered set of look azimuths (elevation 0).
class LookDirectionSet {
 public:
  LookDirectionSet() = default;
  /// Throws InputError unless strictly ascending with |az| <= 90.
  explicit LookDirectionSet(std::vector<double> azimuths_deg);

  const std::vector<double>& azimuths_deg() const { return azimuths_; }
  std::size_t size() const { return azimuths_.size(); }
  double operator[](std::size_t i) const { return azimuths_[i]; }

 private:
  std::vector<double> azimuths_;
};

/// 0, +-5 ... +-30, +-45 (15 directions).
LookDirectionSet default_look_directions();

/// Presets with 3 (0, +-20), 7 (0, +-15, +-30, +-45) or 15 directions.
LookDirectionSet look_direction_preset(std::size_t count);

// Geometry file: one row per mic, "index x_m y_m z_m"; '#' starts a comment.
// An optional "speed_of_sound <c>" line overrides the default.
ArrayGeometry load_geometry(const std::filesystem::path& path);
void save_geometry(const std::filesystem::path& path, const ArrayGeometry& geom, const std::string& comment = {});

// Camera file: one row per view, "view_id width height focal_px principal_x".
std::vector<CameraModel> load_cameras(const std::filesystem::path& path);
void save_cameras(const std::filesystem::path& path, std::span<const CameraModel> cams,
                  const std::string& comment = {});

/// Looks up the camera for a view id. Throws InputError if absent.
const CameraModel& camera_for_view(std::span<const CameraModel> cams, int view_id);

}  // namespace beamloc
