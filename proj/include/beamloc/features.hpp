#pragma once

// Log-mel feature images for 166 ms chunks, RMS level calibration and the
// frequency-wise normalization applied to network inputs.

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <span>
#include <vector>

#include "beamloc/audio.hpp"
#include "beamloc/fft.hpp"

namespace beamloc {

inline constexpr std::size_t kChunkSamples = 8000;
inline constexpr std::size_t kMelBins = 64;
inline constexpr std::size_t kTimeBins = 64;
inline constexpr std::size_t kStftWindow = 512;
inline constexpr std::size_t kStftHop = 125;
inline constexpr double kMelLowHz = 50.0;
inline constexpr double kMelHighHz = 8000.0;
inline constexpr double kLogFloor = 1e-10;

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular, area-normalized mel filters on the bins of a real FFT.
/// Filters narrower than the FFT bin spacing fall back to the single bin
/// nearest their centre, so no filter is empty.
class MelFilterbank {
 public:
  MelFilterbank(std::size_t n_mels, std::size_t fft_size, double sample_rate, double low_hz,
                double high_hz);

  std::size_t n_mels() const { return centers_.size(); }
  std::size_t n_bins() const { return n_bins_; }
  const std::vector<double>& center_hz() const { return centers_; }
  double weight(std::size_t mel, std::size_t bin) const;

  /// out[m] = sum_k w[m][k] * spectrum[k].
  void apply(std::span<const double> spectrum, std::span<double> out) const;

 private:
  struct Tap {
    std::size_t bin;
    double weight;
  };
  std::size_t n_bins_;
  std::vector<double> centers_;
  std::vector<std::vector<Tap>> taps_;
};

/// 64 filters between 50 Hz and 8 kHz for a 512-point FFT at 48 kHz.
const MelFilterbank& default_mel_filterbank();

/// Reusable log-mel front end (owns FFT buffers; one per thread).
class LogMelExtractor {
 public:
  LogMelExtractor();
  /// 64 x 64 matrix, rows = mel bins, columns = time bins. The STFT is
  /// centred with 256 samples of reflect padding on each side.
  Eigen::MatrixXd operator()(std::span<const double> chunk);

 private:
  RealFft fft_;
  std::vector<double> window_;
  std::vector<double> padded_;
  std::vector<double> frame_;
  std::vector<std::complex<double>> spectrum_;
  std::vector<double> magnitude_;
  std::vector<double> mel_;
};

/// Convenience wrapper around a thread-local LogMelExtractor.
Eigen::MatrixXd log_mel(std::span<const double> chunk);

/// N-channel 64 x 64 image stored as [channel][mel][time].
struct FeatureStack {
  std::size_t channels = 0;
  std::vector<double> values;

  FeatureStack() = default;
  explicit FeatureStack(std::size_t n_channels)
      : channels(n_channels), values(n_channels * kMelBins * kTimeBins) {}

  static constexpr std::size_t plane() { return kMelBins * kTimeBins; }
  double& at(std::size_t c, std::size_t m, std::size_t t) { return values[(c * kMelBins + m) * kTimeBins + t]; }
  double at(std::size_t c, std::size_t m, std::size_t t) const {
    return values[(c * kMelBins + m) * kTimeBins + t];
  }
  std::span<const double> channel(std::size_t c) const { return {values.data() + c * plane(), plane()}; }
  bool all_finite() const;
};

/// Samples [centre - 4000, centre + 4000) of a channel around visual frame
/// `frame`; zero outside the recording.
std::vector<double> extract_chunk(std::span<const double> channel, std::int64_t frame);

/// Log-mel image of every channel of `audio` for one visual frame.
FeatureStack extract_features(const AudioBuffer& audio, std::int64_t frame);
FeatureStack extract_features(const AudioBuffer& audio, std::int64_t frame, LogMelExtractor& extractor);

/// gain_c = target_rms / rms_c. Throws CalibrationError for a silent channel.
std::vector<double> calibrate_gains(const AudioBuffer& audio, double target_rms);
void apply_gains(AudioBuffer& audio, std::span<const double> gains);

enum class NormMode { pooled, per_channel };

struct NormalizationStats {
  NormMode mode = NormMode::pooled;
  std::size_t channels = 0;
  /// 64 values (pooled) or channels x 64 (per channel).
  std::vector<double> per_bin_mean;
  double global_std = 1.0;

  double mean_for(std::size_t c, std::size_t m) const {
    return mode == NormMode::pooled ? per_bin_mean[m] : per_bin_mean[c * kMelBins + m];
  }
};

/// Streaming accumulator for NormalizationStats. Shards can be accumulated
/// independently and merged; merging is deterministic for a fixed order.
class NormAccumulator {
 public:
  NormAccumulator(NormMode mode, std::size_t channels);

  void add(const FeatureStack& stack);
  void merge(const NormAccumulator& other);
  std::size_t samples() const { return samples_; }
  /// Throws InputError if empty or if the global standard deviation is zero.
  NormalizationStats finalize() const;

 private:
  NormMode mode_;
  std::size_t channels_;
  std::size_t samples_ = 0;
  std::vector<double> bin_sums_;
  std::vector<double> bin_counts_;
  double count_ = 0.0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

NormalizationStats compute_norm_stats(std::span<const FeatureStack> stacks,
                                      NormMode mode = NormMode::pooled);

/// out[c,m,t] = (in[c,m,t] - mean[m]) / std. Throws InputError if std <= 0.
FeatureStack normalize(const FeatureStack& stack, const NormalizationStats& stats);
FeatureStack denormalize(const FeatureStack& stack, const NormalizationStats& stats);

void save_stats(const std::filesystem::path& path, const NormalizationStats& stats, const std::string& comment = {});
/// Fingerprint of the numeric content (mode, channels, means, std).
std::string stats_fingerprint(const NormalizationStats& stats);
NormalizationStats load_stats(const std::filesystem::path& path);

// Feature cache: "BLFEAT01" magic, u32 version, u32-prefixed metadata string,
// u64 count, u32 channels, u32 mel bins, u32 time bins, then
// count * channels * 64 * 64 little-endian float32.

/// Streams feature images to a cache file; the count is patched on close.
class FeatureCacheWriter {
 public:
  FeatureCacheWriter(const std::filesystem::path& path, std::size_t channels, const std::string& metadata = {});
  ~FeatureCacheWriter();
  FeatureCacheWriter(const FeatureCacheWriter&) = delete;
  FeatureCacheWriter& operator=(const FeatureCacheWriter&) = delete;

  void append(const FeatureStack& stack);
  std::size_t count() const { return count_; }
  void close();

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t channels_;
  std::uint64_t count_ = 0;
  std::streampos count_pos_;
  std::vector<float> scratch_;
  bool closed_ = false;
};

class FeatureCacheReader {
 public:
  explicit FeatureCacheReader(const std::filesystem::path& path);

  std::size_t count() const { return count_; }
  std::size_t channels() const { return channels_; }
  const std::string& metadata() const { return metadata_; }
  /// Reads the next image into `stack`; false once all have been read.
  bool next(FeatureStack& stack);

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::string metadata_;
  std::uint64_t count_ = 0;
  std::uint64_t read_ = 0;
  std::size_t channels_ = 0;
  std::vector<float> scratch_;
};

void save_feature_cache(const std::filesystem::path& path, std::span<const FeatureStack> stacks,
                        const std::string& metadata = {});
std::vector<FeatureStack> load_feature_cache(const std::filesystem::path& path);

}  // namespace beamloc
