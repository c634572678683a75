#pragma once

// Synthetic free-field scenes that stand in for real array recordings, the
// pseudo-label CSV format, dataset manifests and balanced frame sampling.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "beamloc/audio.hpp"
#include "beamloc/geometry.hpp"

namespace beamloc {

inline constexpr double kFrameRate = 30.0;
inline constexpr std::size_t kSamplesPerFrame = 1600;  // 48 kHz / 30 fps
inline constexpr double kMaxSceneAzimuth = 60.0;

struct TrajectoryKnot {
  double time_s = 0.0;
  double azimuth_deg = 0.0;
};

/// Half-open speech interval [start_s, end_s).
struct Segment {
  double start_s = 0.0;
  double end_s = 0.0;
};

struct SceneSpec {
  double duration_s = 10.0;
  /// Piecewise-linear azimuth path; held constant outside the knot range.
  std::vector<TrajectoryKnot> trajectory{{0.0, 0.0}};
  std::vector<Segment> speech_segments;
  /// RMS of the source over its active segments.
  double source_rms = 0.1;
  /// Sensor noise level relative to source_rms (negative SNR).
  double noise_floor_db = -20.0;
  std::vector<CameraModel> views{CameraModel{}};
  std::uint64_t rng_seed = 0;
  /// Optional mono excitation at 48 kHz replacing the synthetic one. Looped
  /// if shorter than the scene.
  std::optional<std::vector<double>> source_signal;

  /// Throws InputError on overlapping or out-of-range segments, knots out of
  /// order, or |azimuth| > 60.
  void validate() const;
  double azimuth_at(double t_s) const;
  bool active_at(double t_s) const;
};

/// One (frame, view) pseudo-label. Active records without x_px are speech
/// frames whose source falls outside that view; they are excluded from
/// training and scoring.
struct LabelRecord {
  std::int64_t frame = 0;
  int view_id = 0;
  bool active = false;
  std::optional<double> x_px;
  bool screened = true;

  bool labeled_active() const { return active && x_px.has_value(); }
  friend bool operator==(const LabelRecord&, const LabelRecord&) = default;
};

struct RenderedScene {
  AudioBuffer audio;
  std::vector<LabelRecord> labels;
};

/// Centre sample of visual frame i: i * 1600.
inline std::int64_t frame_center_sample(std::int64_t frame) {
  return frame * static_cast<std::int64_t>(kSamplesPerFrame);
}

/// Frames whose 8000-sample chunk [c - 4000, c + 4000) lies inside a
/// recording of `n_samples`.
std::pair<std::int64_t, std::int64_t> full_chunk_frame_range(std::size_t n_samples);

/// Seeded speech-like excitation: syllables of glottal pulse trains through
/// formant resonators, interleaved with fricative noise bursts, band-limited
/// to 100-8000 Hz. Unit RMS over the whole signal.
std::vector<double> speech_like_excitation(std::size_t n_samples, std::uint64_t seed,
                                           double sample_rate = kSampleRate);

/// Windowed-sinc fractional delay with a tabulated kernel (32 taps).
class FractionalDelay {
 public:
  static constexpr int kTaps = 32;
  static constexpr int kPhases = 1024;

  FractionalDelay();
  /// Signal value at fractional time t (in samples); zero outside the signal.
  double sample_at(std::span<const double> x, double t) const;

 private:
  std::vector<double> table_;  // (kPhases + 1) x kTaps
};

/// Renders a single far-field source on every mic with the instantaneous
/// steering delay, plus independent Gaussian sensor noise, and produces one
/// label per (full-chunk frame, view).
RenderedScene render_scene(const SceneSpec& spec, const ArrayGeometry& geom);

// Label CSV: header "frame,view,active,x_px[,screened]", one row per
// (frame, view). Inactive rows leave x_px empty. Lines starting with '#'
// before the header are comments.
void write_labels(const std::filesystem::path& path, std::span<const LabelRecord> labels,
                  const std::string& comment = {});

/// Parses and validates a label CSV against the known cameras. Throws
/// FormatError listing every rejected line (out-of-range x_px, unknown view,
/// duplicate (frame, view), malformed fields).
std::vector<LabelRecord> ingest_pseudo_labels(const std::filesystem::path& path,
                                              std::span<const CameraModel> cameras);

enum class Material { speech, silent };

struct ManifestEntry {
  std::filesystem::path audio;
  std::filesystem::path labels;
  std::filesystem::path geometry;
  std::filesystem::path cameras;
  std::string split = "train";
  Material material = Material::speech;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  /// Checks referenced files exist and agree: audio channels match the
  /// geometry, labels are valid for the cameras and lie within the audio.
  void validate() const;
};

/// JSON manifest; relative paths resolve against the manifest's directory.
/// An optional top-level "provenance" string is written but not interpreted.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest,
                   const std::string& provenance = {});

struct LabelSource {
  std::vector<LabelRecord> labels;
  Material material = Material::speech;
};

/// Reference to one training example: a frame of one source seen from one view.
struct FrameRef {
  std::size_t source = 0;
  std::int64_t frame = 0;
  int view_id = 0;
  bool active = false;
  double x_px = 0.0;

  friend bool operator==(const FrameRef&, const FrameRef&) = default;
};

/// Balanced selection: screened, labeled active records from speech
/// material and inactive records from silent material, the same number of
/// each (the smaller pool size). Deterministic in `seed`; actives are listed
/// first, each group in source/frame/view order.
std::vector<FrameRef> sample_training_frames(std::span<const LabelSource> sources, std::uint64_t seed);

/// Manifest overload; considers entries of the given split only and reports
/// `source` as the manifest entry index.
std::vector<FrameRef> sample_training_frames(const DatasetManifest& manifest, std::uint64_t seed,
                                             const std::string& split = "train");

std::string to_string(Material m);
Material material_from_string(const std::string& s);

}  // namespace beamloc
