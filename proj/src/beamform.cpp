#include "beamloc/beamform.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "beamloc/binio.hpp"
#include "beamloc/error.hpp"
#include "beamloc/fft.hpp"

namespace beamloc {
namespace {

constexpr char kWeightsMagic[9] = "BLBFWGT1";
constexpr std::uint32_t kWeightsVersion = 2;

double sinc(double x) { return std::abs(x) < 1e-12 ? 1.0 : std::sin(x) / x; }

bool is_power_of_two(std::size_t n) { return n >= 2 && (n & (n - 1)) == 0; }

// Solves (Gamma + mu I) a = d through the eigendecomposition of Gamma and
// returns the distortionless-normalized weights.
Eigen::VectorXcd loaded_weights(const Eigen::MatrixXd& eigvecs, const Eigen::VectorXd& eigvals,
                                const Eigen::VectorXcd& proj, double mu) {
  Eigen::VectorXcd scaled = proj;
  for (Eigen::Index k = 0; k < scaled.size(); ++k) scaled[k] /= (eigvals[k] + mu);
  Eigen::VectorXcd a = eigvecs.cast<cdouble>() * scaled;
  return a / (proj.dot(scaled));  // d^H a = proj^H scaled
}

double wng_of(const Eigen::VectorXcd& w, const Eigen::VectorXcd& d) {
  return std::norm(w.dot(d)) / w.squaredNorm();
}

}  // namespace

Eigen::MatrixXd diffuse_coherence(const ArrayGeometry& geom, double freq_hz) {
  const auto m = static_cast<Eigen::Index>(geom.size());
  Eigen::MatrixXd gamma(m, m);
  const double k = 2.0 * std::numbers::pi * freq_hz / geom.speed_of_sound;
  for (Eigen::Index i = 0; i < m; ++i) {
    gamma(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < m; ++j) {
      gamma(i, j) = gamma(j, i) = sinc(k * geom.distance(i, j));
    }
  }
  return gamma;
}

Eigen::VectorXcd steering_vector(const ArrayGeometry& geom, double freq_hz, double azimuth_deg,
                                 double elevation_deg) {
  const auto delays = steering_delays(geom, azimuth_deg, elevation_deg);
  Eigen::VectorXcd d(static_cast<Eigen::Index>(delays.size()));
  for (std::size_t i = 0; i < delays.size(); ++i) {
    d[static_cast<Eigen::Index>(i)] = std::polar(1.0, -2.0 * std::numbers::pi * freq_hz * delays[i]);
  }
  return d;
}

double white_noise_gain(std::span<const cdouble> w, const Eigen::VectorXcd& d) {
  if (w.size() != static_cast<std::size_t>(d.size())) throw InputError("weight/steering size mismatch");
  Eigen::Map<const Eigen::VectorXcd> wv(w.data(), d.size());
  return wng_of(wv, d);
}

cdouble beam_response(const ArrayGeometry& geom, std::span<const cdouble> w, double freq_hz,
                      double azimuth_deg, double elevation_deg) {
  const Eigen::VectorXcd d = steering_vector(geom, freq_hz, azimuth_deg, elevation_deg);
  if (w.size() != static_cast<std::size_t>(d.size())) throw InputError("weight/steering size mismatch");
  Eigen::Map<const Eigen::VectorXcd> wv(w.data(), d.size());
  return wv.dot(d);
}

BeamformerDesign design_sdb(const ArrayGeometry& geom, const LookDirectionSet& dirs,
                            std::size_t fft_size, double sample_rate, double wng_min_db) {
  if (!is_power_of_two(fft_size)) throw InputError("fft_size must be a power of two");
  if (!std::isfinite(wng_min_db)) throw InputError("wng_min_db must be finite");
  if (!(sample_rate > 0.0)) throw InputError("sample rate must be positive");
  if (geom.size() == 0) throw InputError("empty array");
  if (dirs.size() == 0) throw InputError("no look directions");

  BeamformerDesign design;
  design.fft_size = fft_size;
  design.sample_rate = sample_rate;
  design.look_dirs = dirs;
  design.wng_min_db = wng_min_db;
  design.n_mics = geom.size();
  const std::size_t n_bins = design.n_bins();
  const std::size_t n_dirs = dirs.size();
  const auto m = static_cast<Eigen::Index>(geom.size());
  design.weights.resize(n_bins * n_dirs * geom.size());
  design.loading.resize(n_bins * n_dirs);
  design.flagged.assign(n_bins * n_dirs, 0);

  const double target = std::pow(10.0, wng_min_db / 10.0);
  const double log_lo = std::log(kRegularizationMin);
  const double log_hi = std::log(kRegularizationMax);

  for (std::size_t bin = 0; bin < n_bins; ++bin) {
    const double f = design.bin_frequency(bin);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(diffuse_coherence(geom, f));
    if (eig.info() != Eigen::Success) throw InternalError("coherence eigendecomposition failed");
    const Eigen::MatrixXd& q = eig.eigenvectors();
    const Eigen::VectorXd lambda = eig.eigenvalues().cwiseMax(0.0);

    for (std::size_t dir = 0; dir < n_dirs; ++dir) {
      const Eigen::VectorXcd d = steering_vector(geom, f, dirs[dir]);
      const Eigen::VectorXcd proj = q.transpose().cast<cdouble>() * d;
      Eigen::VectorXcd w;
      double mu = kRegularizationMin;
      bool flag = false;

      w = loaded_weights(q, lambda, proj, mu);
      if (wng_of(w, d) < target) {
        if (wng_of(loaded_weights(q, lambda, proj, kRegularizationMax), d) < target) {
          flag = true;
          w = d / d.squaredNorm();
          mu = std::numeric_limits<double>::infinity();
        } else {
          double lo = log_lo, hi = log_hi;
          for (int it = 0; it < kBisectionIterations; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (wng_of(loaded_weights(q, lambda, proj, std::exp(mid)), d) >= target) {
              hi = mid;
            } else {
              lo = mid;
            }
          }
          mu = std::exp(hi);
          w = loaded_weights(q, lambda, proj, mu);
        }
      }
      if (!w.allFinite()) throw InternalError("non-finite beamformer weights");

      const std::size_t slot = bin * n_dirs + dir;
      design.loading[slot] = mu;
      design.flagged[slot] = flag ? 1 : 0;
      std::copy(w.data(), w.data() + m, design.weights.begin() + static_cast<std::ptrdiff_t>(slot * geom.size()));
    }
  }
  return design;
}

AudioBuffer apply_beamformer(const BeamformerDesign& design, const AudioBuffer& audio) {
  if (audio.channels != design.n_mics) {
    throw InputError("beamformer expects " + std::to_string(design.n_mics) + " channels, got " +
                     std::to_string(audio.channels));
  }
  if (std::abs(audio.sample_rate - design.sample_rate) > 1e-6) {
    throw InputError("audio sample rate does not match the beamformer design");
  }
  const std::size_t n = design.fft_size;
  const std::size_t hop = n / 2;
  const std::size_t n_bins = design.n_bins();
  const std::size_t n_dirs = design.n_dirs();
  const std::size_t n_mics = design.n_mics;
  const std::size_t len = audio.frames;
  const auto window = periodic_hann(n);

  AudioBuffer out(n_dirs, len, audio.sample_rate);
  RealFft fft(n);
  std::vector<double> frame(n), time_out(n);
  std::vector<cdouble> spectra(n_mics * n_bins), beam(n_bins);

  // Frames start one hop before the signal so every sample is covered by
  // two windows that sum to one.
  for (std::ptrdiff_t start = -static_cast<std::ptrdiff_t>(hop);
       start < static_cast<std::ptrdiff_t>(len); start += static_cast<std::ptrdiff_t>(hop)) {
    for (std::size_t mic = 0; mic < n_mics; ++mic) {
      const auto x = audio.channel(mic);
      for (std::size_t i = 0; i < n; ++i) {
        const std::ptrdiff_t idx = start + static_cast<std::ptrdiff_t>(i);
        frame[i] = (idx >= 0 && idx < static_cast<std::ptrdiff_t>(len)) ? x[idx] * window[i] : 0.0;
      }
      fft.forward(frame, std::span(spectra).subspan(mic * n_bins, n_bins));
    }
    for (std::size_t dir = 0; dir < n_dirs; ++dir) {
      for (std::size_t k = 0; k < n_bins; ++k) {
        const auto w = design.weights_at(k, dir);
        cdouble acc = 0.0;
        for (std::size_t mic = 0; mic < n_mics; ++mic) acc += std::conj(w[mic]) * spectra[mic * n_bins + k];
        beam[k] = acc;
      }
      fft.inverse(beam, time_out);
      auto y = out.channel(dir);
      for (std::size_t i = 0; i < n; ++i) {
        const std::ptrdiff_t idx = start + static_cast<std::ptrdiff_t>(i);
        if (idx >= 0 && idx < static_cast<std::ptrdiff_t>(len)) y[idx] += time_out[i];
      }
    }
  }
  return out;
}

void save_weights(const std::filesystem::path& path, const BeamformerDesign& design) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kWeightsMagic, 8);
  binio::write<std::uint32_t>(out, kWeightsVersion);
  binio::write_string(out, design.metadata);
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(design.fft_size));
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(std::lround(design.sample_rate)));
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(design.n_dirs()));
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(design.n_mics));
  binio::write<double>(out, design.wng_min_db);
  for (double az : design.look_dirs.azimuths_deg()) binio::write<double>(out, az);
  for (std::uint8_t f : design.flagged) binio::write<std::uint8_t>(out, f);
  for (const cdouble& w : design.weights) {
    binio::write<float>(out, static_cast<float>(w.real()));
    binio::write<float>(out, static_cast<float>(w.imag()));
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

BeamformerDesign load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  binio::expect_magic(in, kWeightsMagic, "beamformer weight");
  if (binio::read<std::uint32_t>(in) != kWeightsVersion) throw FormatError("unsupported weight file version");
  BeamformerDesign design;
  design.metadata = binio::read_string(in);
  design.fft_size = binio::read<std::uint32_t>(in);
  design.sample_rate = binio::read<std::uint32_t>(in);
  const std::size_t n_dirs = binio::read<std::uint32_t>(in);
  design.n_mics = binio::read<std::uint32_t>(in);
  design.wng_min_db = binio::read<double>(in);
  if (!is_power_of_two(design.fft_size) || n_dirs == 0 || design.n_mics == 0 || n_dirs > 4096 ||
      design.n_mics > 4096 || design.fft_size > (1u << 20)) {
    throw FormatError(path.string() + ": implausible weight file header");
  }
  std::vector<double> az(n_dirs);
  for (double& a : az) a = binio::read<double>(in);
  try {
    design.look_dirs = LookDirectionSet(std::move(az));
  } catch (const InputError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  design.flagged.resize(design.n_bins() * n_dirs);
  for (auto& f : design.flagged) f = binio::read<std::uint8_t>(in);
  design.weights.resize(design.n_bins() * n_dirs * design.n_mics);
  for (auto& w : design.weights) {
    const float re = binio::read<float>(in);
    const float im = binio::read<float>(in);
    w = {re, im};
  }
  design.loading.assign(design.n_bins() * n_dirs, std::numeric_limits<double>::quiet_NaN());
  return design;
}

}  // namespace beamloc
