#include "beamloc/features.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "beamloc/binio.hpp"
#include "beamloc/dsp.hpp"
#include "beamloc/error.hpp"
#include "beamloc/hash.hpp"
#include "beamloc/scenes.hpp"

namespace beamloc {
namespace {

constexpr char kCacheMagic[9] = "BLFEAT01";
constexpr std::uint32_t kCacheVersion = 2;

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank(std::size_t n_mels, std::size_t fft_size, double sample_rate,
                             double low_hz, double high_hz)
    : n_bins_(fft_size / 2 + 1) {
  if (n_mels == 0 || !(high_hz > low_hz) || low_hz < 0.0 || high_hz > sample_rate / 2.0) {
    throw InputError("invalid mel filterbank range");
  }
  const double mel_lo = hz_to_mel(low_hz);
  const double mel_hi = hz_to_mel(high_hz);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  const double bin_hz = sample_rate / static_cast<double>(fft_size);
  centers_.resize(n_mels);
  taps_.resize(n_mels);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    const double enorm = 2.0 / (hi - lo);
    centers_[m] = c;
    for (std::size_t k = 0; k < n_bins_; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      const double w = std::min((f - lo) / (c - lo), (hi - f) / (hi - c));
      if (w > 0.0) taps_[m].push_back({k, w * enorm});
    }
    if (taps_[m].empty()) {
      const auto nearest = static_cast<std::size_t>(std::lround(c / bin_hz));
      taps_[m].push_back({std::min(nearest, n_bins_ - 1), enorm});
    }
  }
}

double MelFilterbank::weight(std::size_t mel, std::size_t bin) const {
  for (const Tap& t : taps_.at(mel)) {
    if (t.bin == bin) return t.weight;
  }
  return 0.0;
}

void MelFilterbank::apply(std::span<const double> spectrum, std::span<double> out) const {
  if (spectrum.size() != n_bins_ || out.size() != n_mels()) throw InputError("mel filterbank size mismatch");
  for (std::size_t m = 0; m < taps_.size(); ++m) {
    double acc = 0.0;
    for (const Tap& t : taps_[m]) acc += t.weight * spectrum[t.bin];
    out[m] = acc;
  }
}

const MelFilterbank& default_mel_filterbank() {
  static const MelFilterbank bank(kMelBins, kStftWindow, kSampleRate, kMelLowHz, kMelHighHz);
  return bank;
}

LogMelExtractor::LogMelExtractor()
    : fft_(kStftWindow),
      window_(periodic_hann(kStftWindow)),
      padded_(kChunkSamples + kStftWindow),
      frame_(kStftWindow),
      spectrum_(kStftWindow / 2 + 1),
      magnitude_(kStftWindow / 2 + 1),
      mel_(kMelBins) {}

Eigen::MatrixXd LogMelExtractor::operator()(std::span<const double> chunk) {
  if (chunk.size() != kChunkSamples) {
    throw InputError("log-mel chunk must have 8000 samples, got " + std::to_string(chunk.size()));
  }
  constexpr std::ptrdiff_t pad = kStftWindow / 2;
  constexpr auto n = static_cast<std::ptrdiff_t>(kChunkSamples);
  for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(padded_.size()); ++j) {
    std::ptrdiff_t idx = j - pad;
    if (idx < 0) idx = -idx;
    if (idx >= n) idx = 2 * (n - 1) - idx;
    padded_[j] = chunk[static_cast<std::size_t>(idx)];
  }
  const MelFilterbank& bank = default_mel_filterbank();
  Eigen::MatrixXd image(kMelBins, kTimeBins);
  for (std::size_t t = 0; t < kTimeBins; ++t) {
    const double* src = padded_.data() + t * kStftHop;
    for (std::size_t i = 0; i < kStftWindow; ++i) frame_[i] = src[i] * window_[i];
    fft_.forward(frame_, spectrum_);
    for (std::size_t k = 0; k < spectrum_.size(); ++k) magnitude_[k] = std::abs(spectrum_[k]);
    bank.apply(magnitude_, mel_);
    for (std::size_t m = 0; m < kMelBins; ++m) image(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(t)) = std::log(mel_[m] + kLogFloor);
  }
  return image;
}

Eigen::MatrixXd log_mel(std::span<const double> chunk) {
  thread_local LogMelExtractor extractor;
  return extractor(chunk);
}

bool FeatureStack::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

std::vector<double> extract_chunk(std::span<const double> channel, std::int64_t frame) {
  std::vector<double> chunk(kChunkSamples, 0.0);
  const std::int64_t start = frame_center_sample(frame) - static_cast<std::int64_t>(kChunkSamples / 2);
  const auto n = static_cast<std::int64_t>(channel.size());
  for (std::size_t i = 0; i < kChunkSamples; ++i) {
    const std::int64_t idx = start + static_cast<std::int64_t>(i);
    if (idx >= 0 && idx < n) chunk[i] = channel[static_cast<std::size_t>(idx)];
  }
  return chunk;
}

FeatureStack extract_features(const AudioBuffer& audio, std::int64_t frame, LogMelExtractor& extractor) {
  FeatureStack stack(audio.channels);
  for (std::size_t c = 0; c < audio.channels; ++c) {
    const Eigen::MatrixXd img = extractor(extract_chunk(audio.channel(c), frame));
    for (std::size_t m = 0; m < kMelBins; ++m) {
      for (std::size_t t = 0; t < kTimeBins; ++t) {
        stack.at(c, m, t) = img(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(t));
      }
    }
  }
  return stack;
}

FeatureStack extract_features(const AudioBuffer& audio, std::int64_t frame) {
  thread_local LogMelExtractor extractor;
  return extract_features(audio, frame, extractor);
}

std::vector<double> calibrate_gains(const AudioBuffer& audio, double target_rms) {
  if (!(target_rms > 0.0)) throw InputError("target RMS must be positive");
  std::vector<double> gains(audio.channels);
  for (std::size_t c = 0; c < audio.channels; ++c) {
    const double r = dsp::rms(audio.channel(c));
    if (!(r > 0.0)) throw CalibrationError("channel " + std::to_string(c) + " is silent");
    gains[c] = target_rms / r;
  }
  return gains;
}

void apply_gains(AudioBuffer& audio, std::span<const double> gains) {
  if (gains.size() != audio.channels) throw InputError("gain count does not match channel count");
  for (std::size_t c = 0; c < audio.channels; ++c) {
    for (double& v : audio.channel(c)) v *= gains[c];
  }
}

NormAccumulator::NormAccumulator(NormMode mode, std::size_t channels)
    : mode_(mode),
      channels_(channels),
      bin_sums_((mode == NormMode::pooled ? 1 : channels) * kMelBins, 0.0),
      bin_counts_(bin_sums_.size(), 0.0) {
  if (channels == 0) throw InputError("normalization needs at least one channel");
}

void NormAccumulator::add(const FeatureStack& stack) {
  if (stack.channels != channels_) throw InputError("feature channel count changed within the stream");
  double local_sum = 0.0;
  for (std::size_t c = 0; c < channels_; ++c) {
    const std::size_t group = mode_ == NormMode::pooled ? 0 : c;
    for (std::size_t m = 0; m < kMelBins; ++m) {
      double row = 0.0;
      for (std::size_t t = 0; t < kTimeBins; ++t) row += stack.at(c, m, t);
      bin_sums_[group * kMelBins + m] += row;
      bin_counts_[group * kMelBins + m] += static_cast<double>(kTimeBins);
      local_sum += row;
    }
  }
  const auto n_local = static_cast<double>(stack.values.size());
  const double local_mean = local_sum / n_local;
  double local_m2 = 0.0;
  for (double v : stack.values) local_m2 += (v - local_mean) * (v - local_mean);

  // Chan et al. pairwise combination.
  const double n = count_ + n_local;
  const double delta = local_mean - mean_;
  mean_ += delta * n_local / n;
  m2_ += local_m2 + delta * delta * count_ * n_local / n;
  count_ = n;
  ++samples_;
}

void NormAccumulator::merge(const NormAccumulator& other) {
  if (other.mode_ != mode_ || other.channels_ != channels_) throw InputError("incompatible accumulators");
  for (std::size_t i = 0; i < bin_sums_.size(); ++i) {
    bin_sums_[i] += other.bin_sums_[i];
    bin_counts_[i] += other.bin_counts_[i];
  }
  if (other.count_ == 0.0) return;
  const double n = count_ + other.count_;
  const double delta = other.mean_ - mean_;
  mean_ += delta * other.count_ / n;
  m2_ += other.m2_ + delta * delta * count_ * other.count_ / n;
  count_ = n;
  samples_ += other.samples_;
}

NormalizationStats NormAccumulator::finalize() const {
  if (samples_ == 0) throw InputError("cannot compute normalization statistics of an empty stream");
  NormalizationStats stats;
  stats.mode = mode_;
  stats.channels = channels_;
  stats.per_bin_mean.resize(bin_sums_.size());
  for (std::size_t i = 0; i < bin_sums_.size(); ++i) stats.per_bin_mean[i] = bin_sums_[i] / bin_counts_[i];
  stats.global_std = std::sqrt(m2_ / count_);
  if (!(stats.global_std > 0.0)) {
    throw InputError("degenerate features: global standard deviation is zero");
  }
  return stats;
}

NormalizationStats compute_norm_stats(std::span<const FeatureStack> stacks, NormMode mode) {
  if (stacks.empty()) throw InputError("cannot compute normalization statistics of an empty stream");
  NormAccumulator acc(mode, stacks.front().channels);
  for (const auto& s : stacks) acc.add(s);
  return acc.finalize();
}

namespace {
void check_stats(const FeatureStack& stack, const NormalizationStats& stats) {
  if (!(stats.global_std > 0.0)) throw InputError("normalization requires a positive standard deviation");
  if (stats.mode == NormMode::per_channel && stats.channels != stack.channels) {
    throw InputError("per-channel statistics do not match the feature channel count");
  }
  const std::size_t expected = (stats.mode == NormMode::pooled ? 1 : stats.channels) * kMelBins;
  if (stats.per_bin_mean.size() != expected) throw InputError("malformed normalization statistics");
}
}  // namespace

FeatureStack normalize(const FeatureStack& stack, const NormalizationStats& stats) {
  check_stats(stack, stats);
  FeatureStack out(stack.channels);
  const double inv = 1.0 / stats.global_std;
  for (std::size_t c = 0; c < stack.channels; ++c) {
    for (std::size_t m = 0; m < kMelBins; ++m) {
      const double mu = stats.mean_for(c, m);
      for (std::size_t t = 0; t < kTimeBins; ++t) out.at(c, m, t) = (stack.at(c, m, t) - mu) * inv;
    }
  }
  return out;
}

FeatureStack denormalize(const FeatureStack& stack, const NormalizationStats& stats) {
  check_stats(stack, stats);
  FeatureStack out(stack.channels);
  for (std::size_t c = 0; c < stack.channels; ++c) {
    for (std::size_t m = 0; m < kMelBins; ++m) {
      const double mu = stats.mean_for(c, m);
      for (std::size_t t = 0; t < kTimeBins; ++t) out.at(c, m, t) = stack.at(c, m, t) * stats.global_std + mu;
    }
  }
  return out;
}

void save_stats(const std::filesystem::path& path, const NormalizationStats& stats, const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "# normalization stats: rows are 'group mel_bin mean'\n";
  out << "mode " << (stats.mode == NormMode::pooled ? "pooled" : "per_channel") << '\n';
  out << "channels " << stats.channels << '\n';
  out << "global_std " << stats.global_std << '\n';
  for (std::size_t i = 0; i < stats.per_bin_mean.size(); ++i) {
    out << i / kMelBins << ' ' << i % kMelBins << ' ' << stats.per_bin_mean[i] << '\n';
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

std::string stats_fingerprint(const NormalizationStats& stats) {
  Fnv1a h;
  auto feed = [&h](auto value) {
    std::array<std::byte, sizeof(value)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(value));
    h.update(bytes);
  };
  feed(static_cast<std::uint32_t>(stats.mode));
  feed(static_cast<std::uint64_t>(stats.channels));
  feed(stats.global_std);
  for (double m : stats.per_bin_mean) feed(m);
  return hex64(h.digest());
}

NormalizationStats load_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open stats file " + path.string());
  NormalizationStats stats;
  bool have_mode = false, have_channels = false, have_std = false;
  std::vector<std::pair<std::size_t, double>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ss(line);
    std::string key;
    if (!(ss >> key)) continue;
    if (key == "mode") {
      std::string v;
      ss >> v;
      if (v == "pooled") stats.mode = NormMode::pooled;
      else if (v == "per_channel") stats.mode = NormMode::per_channel;
      else throw FormatError(where + "unknown mode '" + v + "'");
      have_mode = true;
    } else if (key == "channels") {
      if (!(ss >> stats.channels) || stats.channels == 0) throw FormatError(where + "bad channel count");
      have_channels = true;
    } else if (key == "global_std") {
      if (!(ss >> stats.global_std)) throw FormatError(where + "bad global_std");
      have_std = true;
    } else {
      std::size_t group = 0, bin = 0;
      double mean = 0.0;
      std::istringstream row(line);
      if (!(row >> group >> bin >> mean) || bin >= kMelBins) throw FormatError(where + "bad mean row");
      rows.emplace_back(group * kMelBins + bin, mean);
    }
  }
  if (!have_mode || !have_channels || !have_std) throw FormatError(path.string() + ": missing header fields");
  const std::size_t expected = (stats.mode == NormMode::pooled ? 1 : stats.channels) * kMelBins;
  if (rows.size() != expected) {
    throw FormatError(path.string() + ": expected " + std::to_string(expected) + " mean rows, got " +
                      std::to_string(rows.size()));
  }
  stats.per_bin_mean.assign(expected, 0.0);
  std::vector<bool> seen(expected, false);
  for (const auto& [idx, mean] : rows) {
    if (idx >= expected || seen[idx]) throw FormatError(path.string() + ": duplicate or out-of-range mean row");
    seen[idx] = true;
    stats.per_bin_mean[idx] = mean;
  }
  if (!(stats.global_std > 0.0)) throw FormatError(path.string() + ": global_std must be positive");
  return stats;
}

namespace {

void write_floats(std::ostream& out, std::span<const double> values, std::vector<float>& scratch) {
  scratch.assign(values.begin(), values.end());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(scratch.data()),
              static_cast<std::streamsize>(scratch.size() * sizeof(float)));
  } else {
    for (float v : scratch) binio::write<float>(out, v);
  }
}

void read_floats(std::istream& in, std::span<double> values, std::vector<float>& scratch) {
  scratch.resize(values.size());
  if constexpr (std::endian::native == std::endian::little) {
    if (!in.read(reinterpret_cast<char*>(scratch.data()),
                 static_cast<std::streamsize>(scratch.size() * sizeof(float)))) {
      throw FormatError("unexpected end of feature cache");
    }
  } else {
    for (float& v : scratch) v = binio::read<float>(in);
  }
  std::copy(scratch.begin(), scratch.end(), values.begin());
}

}  // namespace

FeatureCacheWriter::FeatureCacheWriter(const std::filesystem::path& path, std::size_t channels,
                                       const std::string& metadata)
    : path_(path), out_(path, std::ios::binary), channels_(channels) {
  if (!out_) throw FormatError("cannot write " + path.string());
  if (channels == 0) throw InputError("feature cache needs at least one channel");
  out_.write(kCacheMagic, 8);
  binio::write<std::uint32_t>(out_, kCacheVersion);
  binio::write_string(out_, metadata);
  count_pos_ = out_.tellp();
  binio::write<std::uint64_t>(out_, 0);
  binio::write<std::uint32_t>(out_, static_cast<std::uint32_t>(channels));
  binio::write<std::uint32_t>(out_, kMelBins);
  binio::write<std::uint32_t>(out_, kTimeBins);
}

FeatureCacheWriter::~FeatureCacheWriter() {
  try {
    close();
  } catch (...) {
  }
}

void FeatureCacheWriter::append(const FeatureStack& stack) {
  if (closed_) throw InputError("feature cache already closed");
  if (stack.channels != channels_) throw InputError("feature cache requires a uniform channel count");
  write_floats(out_, stack.values, scratch_);
  ++count_;
}

void FeatureCacheWriter::close() {
  if (closed_) return;
  closed_ = true;
  out_.seekp(count_pos_);
  binio::write<std::uint64_t>(out_, count_);
  out_.close();
  if (!out_) throw FormatError("write failed: " + path_.string());
}

FeatureCacheReader::FeatureCacheReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw FormatError("cannot open " + path.string());
  binio::expect_magic(in_, kCacheMagic, "feature cache");
  if (binio::read<std::uint32_t>(in_) != kCacheVersion) throw FormatError("unsupported feature cache version");
  metadata_ = binio::read_string(in_);
  count_ = binio::read<std::uint64_t>(in_);
  channels_ = binio::read<std::uint32_t>(in_);
  if (binio::read<std::uint32_t>(in_) != kMelBins || binio::read<std::uint32_t>(in_) != kTimeBins) {
    throw FormatError(path.string() + ": unexpected feature image shape");
  }
  if (channels_ == 0 || channels_ > 4096) throw FormatError(path.string() + ": implausible channel count");
}

bool FeatureCacheReader::next(FeatureStack& stack) {
  if (read_ == count_) return false;
  if (stack.channels != channels_) stack = FeatureStack(channels_);
  try {
    read_floats(in_, stack.values, scratch_);
  } catch (const FormatError&) {
    throw FormatError(path_.string() + ": truncated after " + std::to_string(read_) + " images");
  }
  ++read_;
  return true;
}

void save_feature_cache(const std::filesystem::path& path, std::span<const FeatureStack> stacks,
                        const std::string& metadata) {
  FeatureCacheWriter writer(path, stacks.empty() ? 1 : stacks.front().channels, metadata);
  for (const auto& s : stacks) writer.append(s);
  writer.close();
}

std::vector<FeatureStack> load_feature_cache(const std::filesystem::path& path) {
  FeatureCacheReader reader(path);
  std::vector<FeatureStack> stacks(reader.count());
  for (auto& s : stacks) reader.next(s);
  return stacks;
}

}  // namespace beamloc
