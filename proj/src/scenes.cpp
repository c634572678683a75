#include "beamloc/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "beamloc/dsp.hpp"
#include "beamloc/error.hpp"
#include "beamloc/random.hpp"
#include "json.hpp"

namespace beamloc {
namespace {

constexpr double kRampSeconds = 0.005;

double blackman_tap(double x, double half_width) {
  if (std::abs(x) > half_width) return 0.0;
  const double r = std::numbers::pi * x / half_width;
  return 0.42 + 0.5 * std::cos(r) + 0.08 * std::cos(2.0 * r);
}

double sinc_pi(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  return std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
}

// Raised-cosine gate, 1 inside the segments with 5 ms ramps just inside
// each boundary.
std::vector<double> segment_gate(const SceneSpec& spec, std::size_t n, double fs) {
  std::vector<double> gate(n, 0.0);
  const double ramp = kRampSeconds * fs;
  for (const Segment& seg : spec.speech_segments) {
    const auto first = static_cast<std::size_t>(std::max(0.0, std::ceil(seg.start_s * fs)));
    const auto last = std::min(n, static_cast<std::size_t>(std::max(0.0, std::ceil(seg.end_s * fs))));
    for (std::size_t i = first; i < last; ++i) {
      const double from_start = static_cast<double>(i - first);
      const double to_end = static_cast<double>(last - 1 - i);
      const double edge = std::min(from_start, to_end);
      gate[i] = edge >= ramp ? 1.0 : 0.5 - 0.5 * std::cos(std::numbers::pi * (edge + 0.5) / ramp);
    }
  }
  return gate;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  if (s.empty()) return false;
  std::istringstream ss(s);
  ss >> out;
  return ss && ss.eof();
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  return p.is_absolute() ? p : base / p;
}

}  // namespace

void SceneSpec::validate() const {
  if (!(duration_s > 0.0)) throw InputError("scene duration must be positive");
  if (trajectory.empty()) throw InputError("scene trajectory has no knots");
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    if (std::abs(trajectory[i].azimuth_deg) > kMaxSceneAzimuth) {
      throw InputError("trajectory azimuth beyond +-60 deg");
    }
    if (i > 0 && !(trajectory[i].time_s > trajectory[i - 1].time_s)) {
      throw InputError("trajectory knots must have increasing times");
    }
  }
  std::vector<Segment> segs = speech_segments;
  std::sort(segs.begin(), segs.end(), [](const Segment& a, const Segment& b) { return a.start_s < b.start_s; });
  for (std::size_t i = 0; i < segs.size(); ++i) {
    if (!(segs[i].end_s > segs[i].start_s)) throw InputError("empty or reversed speech segment");
    if (segs[i].start_s < 0.0 || segs[i].end_s > duration_s) {
      throw InputError("speech segment outside the scene duration");
    }
    if (i > 0 && segs[i].start_s < segs[i - 1].end_s) throw InputError("speech segments overlap");
  }
  if (views.empty()) throw InputError("scene has no camera views");
  for (const auto& v : views) v.validate();
  if (!(source_rms > 0.0)) throw InputError("source RMS must be positive");
  if (!std::isfinite(noise_floor_db)) throw InputError("noise floor must be finite");
}

double SceneSpec::azimuth_at(double t_s) const {
  if (t_s <= trajectory.front().time_s) return trajectory.front().azimuth_deg;
  if (t_s >= trajectory.back().time_s) return trajectory.back().azimuth_deg;
  auto it = std::upper_bound(trajectory.begin(), trajectory.end(), t_s,
                             [](double t, const TrajectoryKnot& k) { return t < k.time_s; });
  const TrajectoryKnot& b = *it;
  const TrajectoryKnot& a = *(it - 1);
  const double alpha = (t_s - a.time_s) / (b.time_s - a.time_s);
  return a.azimuth_deg + alpha * (b.azimuth_deg - a.azimuth_deg);
}

bool SceneSpec::active_at(double t_s) const {
  return std::any_of(speech_segments.begin(), speech_segments.end(),
                     [&](const Segment& s) { return t_s >= s.start_s && t_s < s.end_s; });
}

std::pair<std::int64_t, std::int64_t> full_chunk_frame_range(std::size_t n_samples) {
  constexpr std::int64_t half = 4000;
  const auto spf = static_cast<std::int64_t>(kSamplesPerFrame);
  const std::int64_t first = (half + spf - 1) / spf;
  const std::int64_t last = (static_cast<std::int64_t>(n_samples) - half) / spf;
  if (static_cast<std::int64_t>(n_samples) < half || last < first) return {first, first};
  return {first, last + 1};
}

std::vector<double> speech_like_excitation(std::size_t n_samples, std::uint64_t seed,
                                           double sample_rate) {
  Rng rng = make_rng(seed, 0x5e);
  std::vector<double> out(n_samples, 0.0);
  const double fs = sample_rate;
  double cursor = 0.0;
  std::vector<double> syl;
  while (true) {
    cursor += uniform(rng, 0.02, 0.08) * fs;
    const auto start = static_cast<std::size_t>(cursor);
    if (start >= n_samples) break;
    const auto len = static_cast<std::size_t>(uniform(rng, 0.12, 0.30) * fs);
    const bool voiced = uniform01(rng) < 0.7;
    const double amp = uniform(rng, 0.5, 1.0);
    syl.assign(len, 0.0);

    if (voiced) {
      const double f0_start = uniform(rng, 100.0, 200.0);
      const double f0_end = f0_start * uniform(rng, 0.8, 1.2);
      std::vector<double> pulses(len, 0.0);
      double pos = 0.0;
      while (pos < static_cast<double>(len)) {
        pulses[static_cast<std::size_t>(pos)] += 1.0;
        const double f0 = f0_start + (f0_end - f0_start) * pos / static_cast<double>(len);
        pos += fs / f0 * (1.0 + 0.01 * (uniform01(rng) - 0.5));
      }
      const double formants[3] = {uniform(rng, 300, 900), uniform(rng, 900, 2500), uniform(rng, 2300, 3500)};
      const double gains[3] = {1.0, 0.6, 0.35};
      for (int k = 0; k < 3; ++k) {
        auto bp = dsp::Biquad::bandpass(formants[k], 4.0, fs);
        for (std::size_t i = 0; i < len; ++i) syl[i] += gains[k] * bp.process(pulses[i]);
      }
      for (std::size_t i = 0; i < len; ++i) syl[i] += 0.08 * pulses[i];
    } else {
      auto hp = dsp::Biquad::highpass(uniform(rng, 1500, 3000), 0.707, fs);
      for (std::size_t i = 0; i < len; ++i) syl[i] = 0.3 * hp.process(normal(rng));
    }

    const double attack = 0.008 * fs;
    const double release = 0.3 * static_cast<double>(len);
    for (std::size_t i = 0; i < len && start + i < n_samples; ++i) {
      const double t = static_cast<double>(i);
      double env = 1.0;
      if (t < attack) env = t / attack;
      const double rem = static_cast<double>(len) - t;
      if (rem < release) env *= 0.5 - 0.5 * std::cos(std::numbers::pi * rem / release);
      out[start + i] += amp * env * syl[i];
    }
    cursor += static_cast<double>(len);
  }

  // Band-limit to 100-8000 Hz (4th-order both edges).
  for (int pass = 0; pass < 2; ++pass) {
    dsp::Biquad::highpass(100.0, 0.707, fs).process(out);
    dsp::Biquad::lowpass(8000.0, 0.707, fs).process(out);
  }
  const double r = dsp::rms(out);
  if (r > 0.0) {
    for (double& v : out) v /= r;
  }
  return out;
}

FractionalDelay::FractionalDelay() : table_((kPhases + 1) * kTaps) {
  constexpr int kLeft = kTaps / 2 - 1;  // taps cover k = -15 .. 16
  for (int p = 0; p <= kPhases; ++p) {
    const double frac = static_cast<double>(p) / kPhases;
    double sum = 0.0;
    for (int j = 0; j < kTaps; ++j) {
      const double x = static_cast<double>(j - kLeft) - frac;
      const double h = sinc_pi(x) * blackman_tap(x, kTaps / 2.0);
      table_[p * kTaps + j] = h;
      sum += h;
    }
    for (int j = 0; j < kTaps; ++j) table_[p * kTaps + j] /= sum;
  }
}

double FractionalDelay::sample_at(std::span<const double> x, double t) const {
  constexpr int kLeft = kTaps / 2 - 1;
  const double base = std::floor(t);
  const double phase = (t - base) * kPhases;
  const auto row = static_cast<int>(phase);
  const double alpha = phase - row;
  const double* h0 = &table_[row * kTaps];
  const double* h1 = h0 + kTaps;
  const auto i0 = static_cast<std::int64_t>(base) - kLeft;
  const auto n = static_cast<std::int64_t>(x.size());
  double acc = 0.0;
  if (i0 >= 0 && i0 + kTaps <= n) {
    const double* xs = x.data() + i0;
    for (int j = 0; j < kTaps; ++j) acc += xs[j] * (h0[j] + alpha * (h1[j] - h0[j]));
  } else {
    for (int j = 0; j < kTaps; ++j) {
      const std::int64_t idx = i0 + j;
      if (idx >= 0 && idx < n) acc += x[static_cast<std::size_t>(idx)] * (h0[j] + alpha * (h1[j] - h0[j]));
    }
  }
  return acc;
}

RenderedScene render_scene(const SceneSpec& spec, const ArrayGeometry& geom) {
  spec.validate();
  if (geom.size() == 0) throw InputError("empty array");
  const double fs = kSampleRate;
  const auto n = static_cast<std::size_t>(std::lround(spec.duration_s * fs));

  std::vector<double> source;
  if (spec.source_signal) {
    const auto& user = *spec.source_signal;
    if (user.empty()) throw InputError("user source signal is empty");
    source.resize(n);
    for (std::size_t i = 0; i < n; ++i) source[i] = user[i % user.size()];
  } else {
    source = speech_like_excitation(n, spec.rng_seed, fs);
  }
  const auto gate = segment_gate(spec, n, fs);
  double active_energy = 0.0;
  std::size_t active_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    source[i] *= gate[i];
    if (gate[i] > 0.0) {
      active_energy += source[i] * source[i];
      ++active_count;
    }
  }
  if (active_count > 0 && active_energy > 0.0) {
    const double scale = spec.source_rms / std::sqrt(active_energy / static_cast<double>(active_count));
    for (double& v : source) v *= scale;
  }

  RenderedScene scene;
  scene.audio = AudioBuffer(geom.size(), n, fs);
  const double noise_std = spec.source_rms * std::pow(10.0, spec.noise_floor_db / 20.0);

  if (active_count > 0) {
    // Per-sample direction cosines of the (elevation 0) source.
    std::vector<double> ux(n), uz(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 u = source_direction(spec.azimuth_at(static_cast<double>(i) / fs), 0.0);
      ux[i] = u.x;
      uz[i] = u.z;
    }
    const FractionalDelay fd;
    for (std::size_t mic = 0; mic < geom.size(); ++mic) {
      const Vec3& p = geom.mic_positions[mic];
      auto out = scene.audio.channel(mic);
      const double kx = p.x * fs / geom.speed_of_sound;
      const double kz = p.z * fs / geom.speed_of_sound;
      for (std::size_t i = 0; i < n; ++i) {
        // delay = -(p . u) / c, in samples
        const double delay = -(kx * ux[i] + kz * uz[i]);
        out[i] = fd.sample_at(source, static_cast<double>(i) - delay);
      }
    }
  }
  for (std::size_t mic = 0; mic < geom.size(); ++mic) {
    Rng rng = make_rng(spec.rng_seed, 0x1000 + mic);
    for (double& v : scene.audio.channel(mic)) v += noise_std * normal(rng);
  }

  const auto [first, last] = full_chunk_frame_range(n);
  for (std::int64_t f = first; f < last; ++f) {
    const double t = static_cast<double>(f) / kFrameRate;
    const bool active = spec.active_at(t);
    for (const CameraModel& cam : spec.views) {
      LabelRecord rec;
      rec.frame = f;
      rec.view_id = cam.view_id;
      rec.active = active;
      if (active) {
        const double x = azimuth_to_pixel(cam, spec.azimuth_at(t));
        if (cam.in_frame(x)) rec.x_px = x;
      }
      scene.labels.push_back(rec);
    }
  }
  return scene;
}

void write_labels(const std::filesystem::path& path, std::span<const LabelRecord> labels,
                  const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "frame,view,active,x_px,screened\n";
  char buf[64];
  for (const auto& r : labels) {
    out << r.frame << ',' << r.view_id << ',' << (r.active ? 1 : 0) << ',';
    if (r.x_px) {
      std::snprintf(buf, sizeof buf, "%.6f", *r.x_px);
      out << buf;
    }
    out << ',' << (r.screened ? 1 : 0) << '\n';
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

std::vector<LabelRecord> ingest_pseudo_labels(const std::filesystem::path& path,
                                              std::span<const CameraModel> cameras) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open label file " + path.string());
  std::string line;
  int line_no = 0;
  do {
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty label file");
    ++line_no;
  } while (line.starts_with('#'));
  const auto header = split_csv(trim(line));
  const std::vector<std::string> base = {"frame", "view", "active", "x_px"};
  bool has_screened = false;
  if (header == base) {
    has_screened = false;
  } else if (header.size() == 5 && std::equal(base.begin(), base.end(), header.begin()) &&
             header[4] == "screened") {
    has_screened = true;
  } else {
    throw FormatError(path.string() + ":" + std::to_string(line_no) +
                      ": expected header 'frame,view,active,x_px[,screened]'");
  }
  const std::size_t n_fields = has_screened ? 5 : 4;

  std::vector<LabelRecord> records;
  std::vector<std::string> errors;
  std::map<std::pair<std::int64_t, int>, int> seen;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    auto fail = [&](const std::string& msg) {
      errors.push_back(path.string() + ":" + std::to_string(line_no) + ": " + msg);
    };
    const auto f = split_csv(line);
    if (f.size() != n_fields) {
      fail("expected " + std::to_string(n_fields) + " fields, got " + std::to_string(f.size()));
      continue;
    }
    LabelRecord r;
    int active = -1, screened = 1;
    if (!parse_number(f[0], r.frame) || r.frame < 0) {
      fail("bad frame index '" + f[0] + "'");
      continue;
    }
    if (!parse_number(f[1], r.view_id)) {
      fail("bad view id '" + f[1] + "'");
      continue;
    }
    const CameraModel* cam = nullptr;
    for (const auto& c : cameras) {
      if (c.view_id == r.view_id) cam = &c;
    }
    if (!cam) {
      fail("unknown view id " + f[1]);
      continue;
    }
    if (!parse_number(f[2], active) || (active != 0 && active != 1)) {
      fail("active must be 0 or 1");
      continue;
    }
    r.active = active == 1;
    if (!f[3].empty()) {
      double x = 0.0;
      if (!parse_number(f[3], x) || !std::isfinite(x)) {
        fail("bad x_px '" + f[3] + "'");
        continue;
      }
      if (!r.active) {
        fail("inactive record carries an x_px value");
        continue;
      }
      if (!cam->in_frame(x)) {
        fail("x_px " + f[3] + " outside [0, " + std::to_string(cam->image_width_px) +
             ") for view " + f[1] + " (image_width " + std::to_string(cam->image_width_px) + ")");
        continue;
      }
      r.x_px = x;
    }
    if (has_screened && (!parse_number(f[4], screened) || (screened != 0 && screened != 1))) {
      fail("screened must be 0 or 1");
      continue;
    }
    r.screened = screened == 1;
    auto [it, inserted] = seen.emplace(std::make_pair(r.frame, r.view_id), line_no);
    if (!inserted) {
      fail("duplicate (frame " + f[0] + ", view " + f[1] + "), first seen on line " +
           std::to_string(it->second));
      continue;
    }
    records.push_back(r);
  }
  if (!errors.empty()) {
    std::string msg = std::to_string(errors.size()) + " malformed label row(s):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw FormatError(msg);
  }
  return records;
}

std::string to_string(Material m) { return m == Material::speech ? "speech" : "silent"; }

Material material_from_string(const std::string& s) {
  if (s == "speech") return Material::speech;
  if (s == "silent") return Material::silent;
  throw FormatError("unknown material '" + s + "' (expected speech or silent)");
}

void DatasetManifest::validate() const {
  if (entries.empty()) throw InputError("manifest has no entries");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const std::string where = "manifest entry " + std::to_string(i) + ": ";
    for (const auto* p : {&e.audio, &e.labels, &e.geometry, &e.cameras}) {
      if (!std::filesystem::exists(*p)) throw InputError(where + "missing file " + p->string());
    }
    const WavInfo info = wav_info(e.audio);
    const ArrayGeometry geom = load_geometry(e.geometry);
    if (info.channels != geom.size()) {
      throw InputError(where + "audio has " + std::to_string(info.channels) +
                       " channels but the geometry lists " + std::to_string(geom.size()) + " mics");
    }
    if (std::abs(info.sample_rate - kSampleRate) > 1e-6) throw InputError(where + "audio is not 48 kHz");
    const auto cams = load_cameras(e.cameras);
    const auto labels = ingest_pseudo_labels(e.labels, cams);
    const auto [first, last] = full_chunk_frame_range(info.frames);
    for (const auto& r : labels) {
      if (r.frame < first || r.frame >= last) {
        throw InputError(where + "label frame " + std::to_string(r.frame) +
                         " has no full audio chunk");
      }
    }
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const auto base = path.parent_path();
  DatasetManifest m;
  try {
    for (const auto& item : j.at("entries")) {
      ManifestEntry e;
      e.audio = resolve(base, item.at("audio").get<std::string>());
      e.labels = resolve(base, item.at("labels").get<std::string>());
      e.geometry = resolve(base, item.at("geometry").get<std::string>());
      e.cameras = resolve(base, item.at("cameras").get<std::string>());
      e.split = item.value("split", "train");
      e.material = material_from_string(item.value("material", "speech"));
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return m;
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest, const std::string& provenance) {
  const auto base = path.parent_path();
  auto rel = [&](const std::filesystem::path& p) {
    return (base.empty() ? p : std::filesystem::relative(p, base)).generic_string();
  };
  nlohmann::json j;
  if (!provenance.empty()) j["provenance"] = provenance;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : manifest.entries) {
    j["entries"].push_back({{"audio", rel(e.audio)},
                            {"labels", rel(e.labels)},
                            {"geometry", rel(e.geometry)},
                            {"cameras", rel(e.cameras)},
                            {"split", e.split},
                            {"material", to_string(e.material)}});
  }
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<FrameRef> sample_training_frames(std::span<const LabelSource> sources, std::uint64_t seed) {
  std::vector<FrameRef> active_pool, silent_pool;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    for (const auto& r : sources[s].labels) {
      if (sources[s].material == Material::speech) {
        if (r.labeled_active() && r.screened) active_pool.push_back({s, r.frame, r.view_id, true, *r.x_px});
      } else if (!r.active) {
        silent_pool.push_back({s, r.frame, r.view_id, false, 0.0});
      }
    }
  }
  if (silent_pool.empty()) throw InputError("no silent material to balance against");
  if (active_pool.empty()) throw InputError("no screened active frames");

  auto key = [](const FrameRef& a) { return std::tuple(a.source, a.frame, a.view_id); };
  auto by_key = [&](const FrameRef& a, const FrameRef& b) { return key(a) < key(b); };
  std::sort(active_pool.begin(), active_pool.end(), by_key);
  std::sort(silent_pool.begin(), silent_pool.end(), by_key);

  const std::size_t count = std::min(active_pool.size(), silent_pool.size());
  Rng rng = make_rng(seed, 0x5a);
  // Partial Fisher-Yates over indices, then restore pool order.
  auto pick = [&](const std::vector<FrameRef>& pool) {
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    std::vector<FrameRef> chosen;
    chosen.reserve(count);
    for (std::size_t i : idx) chosen.push_back(pool[i]);
    return chosen;
  };
  std::vector<FrameRef> out = pick(active_pool);
  const auto silent = pick(silent_pool);
  out.insert(out.end(), silent.begin(), silent.end());
  return out;
}

std::vector<FrameRef> sample_training_frames(const DatasetManifest& manifest, std::uint64_t seed,
                                             const std::string& split) {
  std::vector<LabelSource> sources;
  std::vector<std::size_t> entry_index;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    if (e.split != split) continue;
    const auto cams = load_cameras(e.cameras);
    sources.push_back({ingest_pseudo_labels(e.labels, cams), e.material});
    entry_index.push_back(i);
  }
  auto refs = sample_training_frames(sources, seed);
  for (auto& r : refs) r.source = entry_index[r.source];
  return refs;
}

}  // namespace beamloc
