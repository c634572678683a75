#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace beamloc {

inline constexpr double kSampleRate = 48000.0;

/// Multichannel audio in planar layout: channel c occupies
/// samples[c * frames, (c + 1) * frames).
struct AudioBuffer {
  double sample_rate = kSampleRate;
  std::size_t channels = 0;
  std::size_t frames = 0;
  std::vector<double> samples;

  AudioBuffer() = default;
  AudioBuffer(std::size_t n_channels, std::size_t n_frames, double rate = kSampleRate)
      : sample_rate(rate), channels(n_channels), frames(n_frames), samples(n_channels * n_frames) {}

  std::span<double> channel(std::size_t c) { return {samples.data() + c * frames, frames}; }
  std::span<const double> channel(std::size_t c) const {
    return {samples.data() + c * frames, frames};
  }

  /// New buffer holding the listed channels in the given order.
  AudioBuffer select(std::span<const std::size_t> channel_indices) const;
};

/// Writes IEEE float32 WAV (WAVE_FORMAT_EXTENSIBLE above two channels). A
/// non-empty comment goes into a LIST/INFO ICMT chunk.
void write_wav(const std::filesystem::path& path, const AudioBuffer& audio, const std::string& comment = {});

/// Reads 16/24/32-bit PCM or 32/64-bit float WAV, plain or extensible.
AudioBuffer read_wav(const std::filesystem::path& path);

}  // namespace beamloc

namespace beamloc {

struct WavInfo {
  std::size_t channels = 0;
  std::size_t frames = 0;
  double sample_rate = 0.0;
  std::string comment;
};

/// Header-only inspection of a WAV file.
WavInfo wav_info(const std::filesystem::path& path);

}  // namespace beamloc
