#pragma once

// Superdirective beamformer design under a white-noise-gain constraint, and
// STFT-domain application to multichannel audio.

#include <Eigen/Dense>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "beamloc/audio.hpp"
#include "beamloc/geometry.hpp"

namespace beamloc {

using cdouble = std::complex<double>;

inline constexpr double kDefaultWngMinDb = -10.0;
inline constexpr double kRegularizationMin = 1e-9;
inline constexpr double kRegularizationMax = 1e3;
inline constexpr int kBisectionIterations = 60;

struct BeamformerDesign {
  std::size_t fft_size = 512;
  double sample_rate = kSampleRate;
  LookDirectionSet look_dirs;
  double wng_min_db = kDefaultWngMinDb;
  std::size_t n_mics = 0;
  // [bin][direction][mic]
  std::vector<cdouble> weights;
  // [bin][direction]: diagonal loading chosen by the WNG search
  std::vector<double> loading;
  // [bin][direction]: constraint unreachable, delay-and-sum used instead
  std::vector<std::uint8_t> flagged;
  /// Free-form provenance text stored in the weight file.
  std::string metadata;

  std::size_t n_bins() const { return fft_size / 2 + 1; }
  std::size_t n_dirs() const { return look_dirs.size(); }
  double bin_frequency(std::size_t bin) const {
    return static_cast<double>(bin) * sample_rate / static_cast<double>(fft_size);
  }
  std::span<const cdouble> weights_at(std::size_t bin, std::size_t dir) const {
    return {weights.data() + (bin * n_dirs() + dir) * n_mics, n_mics};
  }
  bool is_flagged(std::size_t bin, std::size_t dir) const { return flagged[bin * n_dirs() + dir] != 0; }
};

/// Diffuse-field coherence, Gamma_ij = sinc(2 pi f d_ij / c).
Eigen::MatrixXd diffuse_coherence(const ArrayGeometry& geom, double freq_hz);

/// d_i = exp(-j 2 pi f tau_i) with tau from steering_delays.
Eigen::VectorXcd steering_vector(const ArrayGeometry& geom, double freq_hz, double azimuth_deg,
                                 double elevation_deg = 0.0);

/// |w^H d|^2 / (w^H w).
double white_noise_gain(std::span<const cdouble> w, const Eigen::VectorXcd& d);

/// Beam response w^H d(f, az, el).
cdouble beam_response(const ArrayGeometry& geom, std::span<const cdouble> w, double freq_hz,
                      double azimuth_deg, double elevation_deg = 0.0);

/// Per bin and direction: w = (Gamma + mu I)^-1 d / (d^H (Gamma + mu I)^-1 d)
/// with mu the smallest loading in [1e-9, 1e3] (log bisection, 60 steps)
/// meeting WNG >= wng_min_db. Bins where even mu = 1e3 misses the target get
/// delay-and-sum weights and are flagged.
BeamformerDesign design_sdb(const ArrayGeometry& geom, const LookDirectionSet& dirs,
                            std::size_t fft_size = 512, double sample_rate = kSampleRate,
                            double wng_min_db = kDefaultWngMinDb);

/// Filters `audio` (one channel per mic) into one output channel per look
/// direction using a Hann-windowed STFT with 50% overlap-add. The output has
/// the input's length and is linear in the input.
AudioBuffer apply_beamformer(const BeamformerDesign& design, const AudioBuffer& audio);

// Binary weight file: "BLBFWGT1" magic, u32 version, u32-prefixed metadata
// string, u32 fft_size, u32 sample_rate, u32 n_dirs, u32 n_mics, f64
// wng_min_db, f64 azimuths[n_dirs], u8 flags[n_bins * n_dirs], then complex64
// weights in bin-major order ([bin][dir][mic], real then imaginary), all
// little-endian.
void save_weights(const std::filesystem::path& path, const BeamformerDesign& design);
BeamformerDesign load_weights(const std::filesystem::path& path);

}  // namespace beamloc
