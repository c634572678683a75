#pragma once

// End-to-end orchestration: pipeline configuration, audio front ends, and one
// runner per subcommand. Every runner writes its artifacts plus a run
// manifest into an output directory and is deterministic for a fixed
// configuration.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "beamloc/audio.hpp"
#include "beamloc/beamform.hpp"
#include "beamloc/eval.hpp"
#include "beamloc/features.hpp"
#include "beamloc/geometry.hpp"
#include "beamloc/model.hpp"
#include "beamloc/network.hpp"

namespace beamloc {

enum class FrontEndKind { mono, stereo, raw16, beamformed };

/// Which signals feed the feature stack.
struct FrontEnd {
  FrontEndKind kind = FrontEndKind::beamformed;
  /// Look directions for the beamformed kind; empty otherwise.
  LookDirectionSet look_dirs = default_look_directions();

  /// "mono", "stereo", "raw16", "beamformed3", "beamformed7", "beamformed15",
  /// or "beamformed" for an explicit direction list.
  std::string name() const;
  std::size_t channels() const;

  /// Parses the names above; "beamformed" needs `look_dirs_deg`.
  static FrontEnd parse(const std::string& name, const std::vector<double>& look_dirs_deg = {});
};

struct BeamformerSettings {
  std::size_t fft_size = 512;
  double wng_min_db = kDefaultWngMinDb;
};

/// Synthetic benchmark layout used by `simulate`.
struct SimulationSettings {
  std::size_t train_speech_scenes = 12;
  std::size_t train_silent_scenes = 6;
  std::size_t test_speech_scenes = 4;
  std::size_t test_silent_scenes = 2;
  double scene_seconds = 20.0;
  double max_azimuth_deg = 40.0;
  double noise_floor_db_min = -25.0;
  double noise_floor_db_max = -15.0;
  double source_rms = 0.1;
  /// Principal-point offsets from the image centre, one camera view each.
  std::vector<double> view_offsets_px{0.0, -1200.0, 1200.0};
  double calibration_seconds = 2.0;
};

struct FeatureSettings {
  /// Scale every recording by gains derived from a calibration recording.
  bool calibrate = true;
  /// Calibration WAV; empty means "calibration.wav" beside the dataset manifest.
  std::string calibration_wav;
  double target_rms = 0.1;
  NormMode norm_mode = NormMode::pooled;
};

struct EvalSettings {
  std::size_t threshold_count = kDefaultThresholdCount;
  double smooth_sigma = kDefaultSmoothingSigma;
  std::optional<double> tolerance_deg;
};

struct TrendSettings {
  std::vector<std::string> front_ends{"mono", "stereo", "raw16", "beamformed15"};
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  FrontEnd front_end;
  /// Geometry and camera files; empty selects the nominal array and the
  /// simulation views.
  std::string geometry;
  std::string cameras;
  BeamformerSettings beamformer;
  SimulationSettings simulate;
  FeatureSettings features;
  /// in_channels follows the front end unless set explicitly.
  NetworkConfig network;
  TrainerConfig trainer;
  EvalSettings eval;
  TrendSettings trend;

  /// Throws InputError on inconsistent settings, including a network input
  /// width that differs from the front end's channel count.
  void validate() const;

  /// Canonical JSON with every field spelled out.
  std::string to_json() const;
  /// FNV-1a of to_json().
  std::string hash() const;

  /// Missing keys take their defaults; unknown keys are a FormatError.
  static PipelineConfig from_json(const std::string& text);
  /// Replaces the front end and resizes the network input to match.
  void set_front_end(const FrontEnd& fe);
};

PipelineConfig load_pipeline_config(const std::filesystem::path& path);

/// Seeds for the independent random streams of one pipeline run.
struct DerivedSeeds {
  std::uint64_t scenes = 0;
  std::uint64_t sampling = 0;
  std::uint64_t trainer = 0;
};
DerivedSeeds derive_seeds(std::uint64_t seed);

/// Camera views used by `simulate` when no camera file is configured.
std::vector<CameraModel> simulation_cameras(const SimulationSettings& settings);

/// Converts raw microphone audio into front-end channels.
class FrontEndProcessor {
 public:
  /// `weights` is only used by the beamformed kind; when absent the design
  /// is computed from the geometry.
  FrontEndProcessor(const FrontEnd& fe, const ArrayGeometry& geom, const BeamformerSettings& bf,
                    std::optional<BeamformerDesign> weights = std::nullopt);

  std::size_t channels() const { return fe_.channels(); }
  AudioBuffer operator()(const AudioBuffer& mics) const;

 private:
  FrontEnd fe_;
  std::vector<std::size_t> picks_;
  std::optional<BeamformerDesign> design_;
};

/// Files written by a runner, relative to its output directory.
struct RunOutputs {
  std::vector<std::filesystem::path> files;
};

/// Progress messages (to stderr in the command-line tool).
using LogFn = std::function<void(const std::string&)>;

struct DesignOptions {
  std::filesystem::path out_dir;
};
RunOutputs run_design_bf(const PipelineConfig& config, const DesignOptions& options, const LogFn& log = {});

struct SimulateOptions {
  std::filesystem::path out_dir;
};
/// Writes dataset.json, geometry.txt, cameras.txt, calibration.wav and
/// scenes/<split>_<material>_<nn>.{wav,csv}.
RunOutputs run_simulate(const PipelineConfig& config, const SimulateOptions& options, const LogFn& log = {});

struct FeaturizeOptions {
  std::filesystem::path dataset;
  std::optional<std::filesystem::path> weights;
  std::filesystem::path out_dir;
};
/// Writes train.blf/train_index.csv (balanced training samples),
/// test.blf/test_index.csv (every labeled test frame and view) and stats.txt.
RunOutputs run_featurize(const PipelineConfig& config, const FeaturizeOptions& options, const LogFn& log = {});

struct TrainOptions {
  std::filesystem::path features_dir;
  std::filesystem::path out_dir;
};
/// Writes model.blm and loss.csv.
RunOutputs run_train(const PipelineConfig& config, const TrainOptions& options, const LogFn& log = {});

struct InferOptions {
  std::filesystem::path model;
  std::filesystem::path features_dir;
  std::optional<double> smooth_sigma;
  std::filesystem::path out_dir;
};
/// Writes detections/<scene>.csv for every test scene.
RunOutputs run_infer(const PipelineConfig& config, const InferOptions& options, const LogFn& log = {});

struct EvalRunOptions {
  /// Either a dataset plus a detections directory (test split, pooled)...
  std::optional<std::filesystem::path> dataset;
  std::optional<std::filesystem::path> detections_dir;
  /// ...or one detections file with its labels and cameras.
  std::optional<std::filesystem::path> detections;
  std::optional<std::filesystem::path> labels;
  std::optional<std::filesystem::path> cameras;
  /// When given, must agree with each other and with the detections.
  std::optional<std::filesystem::path> model;
  std::optional<std::filesystem::path> stats;
  std::filesystem::path out_dir;
};
/// Writes report.json and pr_curve.csv.
RunOutputs run_eval(const PipelineConfig& config, const EvalRunOptions& options, MetricsReport* report = nullptr,
                    const LogFn& log = {});

struct TrendRow {
  std::string front_end;
  std::size_t channels = 0;
  bool smoothed = false;
  MetricsReport report;
};

struct TrendOptions {
  /// Existing benchmark; simulated into out_dir/data when absent.
  std::optional<std::filesystem::path> dataset;
  std::filesystem::path out_dir;
};
/// Runs featurize, train, infer and eval for each configured front end and a
/// smoothed variant of the last one; writes trend.csv and trend.md.
RunOutputs run_trend(const PipelineConfig& config, const TrendOptions& options, std::vector<TrendRow>* rows = nullptr,
                     const LogFn& log = {});

/// "beamloc config_hash=<hex>" plus optional key=value pairs; the provenance
/// line embedded in every artifact.
std::string provenance(const PipelineConfig& config, const std::vector<std::pair<std::string, std::string>>& extra = {});

/// FNV-1a of a file's bytes, hex encoded.
std::string file_fingerprint(const std::filesystem::path& path);

}  // namespace beamloc
