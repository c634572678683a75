#include "beamloc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "beamloc/error.hpp"
#include "beamloc/hash.hpp"
#include "beamloc/random.hpp"
#include "beamloc/scenes.hpp"
#include "json.hpp"

namespace beamloc {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// config parsing helpers

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw FormatError(where + " must be a JSON object");
  for (const auto& item : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; });
    if (!known) throw FormatError("unknown configuration key '" + where + "." + item.key() + "'");
  }
}

template <typename T>
void get(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::string norm_mode_name(NormMode m) { return m == NormMode::pooled ? "pooled" : "per_channel"; }

NormMode norm_mode_from(const std::string& s) {
  if (s == "pooled") return NormMode::pooled;
  if (s == "per_channel") return NormMode::per_channel;
  throw FormatError("features.norm_mode must be 'pooled' or 'per_channel', got '" + s + "'");
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

// ---------------------------------------------------------------------------
// run bookkeeping

class RunRecorder {
 public:
  RunRecorder(std::string subcommand, const PipelineConfig& config, fs::path out_dir)
      : subcommand_(std::move(subcommand)), config_(config), out_dir_(std::move(out_dir)) {
    if (out_dir_.empty()) throw InputError("an output directory is required");
    fs::create_directories(out_dir_);
  }

  fs::path path(const fs::path& rel) const { return out_dir_ / rel; }

  void input(const std::string& role, const fs::path& p) {
    if (!fs::exists(p)) throw InputError("missing input file " + p.string());
    // relative to the output directory, so identical layouts give identical manifests
    const auto rel = fs::absolute(p).lexically_normal().lexically_relative(fs::absolute(out_dir_).lexically_normal());
    inputs_[role] = {{"path", (rel.empty() ? p : rel).generic_string()}, {"fingerprint", file_fingerprint(p)}};
  }

  void output(const fs::path& rel) { outputs_.push_back(rel); }

  RunOutputs finish(const json& extra = json::object()) {
    const auto seeds = derive_seeds(config_.seed);
    json j;
    j["subcommand"] = subcommand_;
    j["config_hash"] = config_.hash();
    j["seed"] = config_.seed;
    j["derived_seeds"] = {{"scenes", seeds.scenes}, {"sampling", seeds.sampling}, {"trainer", seeds.trainer}};
    j["inputs"] = inputs_;
    json outs = json::object();
    for (const auto& rel : outputs_) outs[rel.generic_string()] = file_fingerprint(out_dir_ / rel);
    j["outputs"] = outs;
    if (!extra.empty()) j["summary"] = extra;
    j["config"] = json::parse(config_.to_json());
    const fs::path manifest = "run_" + subcommand_ + ".json";
    std::ofstream out(out_dir_ / manifest);
    if (!out) throw InputError("cannot write " + (out_dir_ / manifest).string());
    out << j.dump(2) << '\n';
    out.close();
    if (!out) throw InputError("write failed: " + (out_dir_ / manifest).string());
    RunOutputs r{outputs_};
    r.files.push_back(manifest);
    return r;
  }

 private:
  std::string subcommand_;
  const PipelineConfig& config_;
  fs::path out_dir_;
  json inputs_ = json::object();
  std::vector<fs::path> outputs_;
};

void say(const LogFn& log, const std::string& msg) {
  if (log) log(msg);
}

/// key=value pairs from a leading "# beamloc ..." line of a text artifact.
std::map<std::string, std::string> read_provenance(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::map<std::string, std::string> out;
  if (!std::getline(in, line) || !line.starts_with("# beamloc ")) return out;
  std::istringstream ss(line.substr(10));
  std::string item;
  while (ss >> item) {
    if (const auto eq = item.find('='); eq != std::string::npos) out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// feature index files

struct IndexRow {
  std::size_t image = 0;
  std::string scene;
  std::int64_t frame = 0;
  int view_id = 0;
  bool active = false;
  std::optional<double> x_px;
  double image_width = kImageWidthPx;
};

constexpr const char* kIndexHeader = "sample,image,scene,frame,view,active,x_px,image_width";

void write_index(const fs::path& path, const std::vector<IndexRow>& rows, const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "# " << comment << '\n' << kIndexHeader << '\n';
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << i << ',' << r.image << ',' << r.scene << ',' << r.frame << ',' << r.view_id << ',' << (r.active ? 1 : 0)
        << ',' << (r.x_px ? fmt("%.6f", *r.x_px) : std::string()) << ',' << fmt("%.17g", r.image_width) << '\n';
  }
  if (!out) throw InputError("write failed: " + path.string());
}

std::vector<IndexRow> read_index(const fs::path& path, std::size_t image_count) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  int lineno = 0;
  do {
    if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header");
    ++lineno;
  } while (line.starts_with('#'));
  if (line != kIndexHeader) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": unexpected header");
  std::vector<IndexRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() == 7 && line.back() == ',') f.emplace_back();
    const auto where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (f.size() != 8) throw FormatError(where + "expected 8 fields");
    IndexRow r;
    try {
      if (std::stoull(f[0]) != rows.size()) throw FormatError(where + "samples out of order");
      r.image = std::stoull(f[1]);
      r.scene = f[2];
      r.frame = std::stoll(f[3]);
      r.view_id = std::stoi(f[4]);
      r.active = f[5] == "1";
      if (!f[6].empty()) r.x_px = std::stod(f[6]);
      r.image_width = std::stod(f[7]);
    } catch (const std::logic_error&) {
      throw FormatError(where + "malformed field");
    }
    if (r.image >= image_count) throw FormatError(where + "image index beyond the feature cache");
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Loads a cache normalized into a half-precision bank; checks channel count.
FeatureBank load_bank(const fs::path& cache, const NormalizationStats& stats, std::size_t expected_channels,
                      const std::string& expected_front_end) {
  FeatureCacheReader reader(cache);
  if (reader.channels() != expected_channels) {
    throw InputError("config/channel mismatch: " + cache.string() + " holds " + std::to_string(reader.channels()) +
                     "-channel features but the network expects " + std::to_string(expected_channels));
  }
  const auto meta = json::parse(reader.metadata(), nullptr, false);
  if (!expected_front_end.empty() && meta.is_object() && meta.contains("front_end") &&
      meta["front_end"] != expected_front_end) {
    throw InputError("config/front-end mismatch: features were computed for '" +
                     meta["front_end"].get<std::string>() + "', configuration selects '" + expected_front_end + "'");
  }
  FeatureBank bank(reader.channels());
  bank.reserve(reader.count());
  FeatureStack stack;
  while (reader.next(stack)) bank.add(normalize(stack, stats));
  return bank;
}

std::string scene_name(const ManifestEntry& e) { return e.audio.stem().string(); }

bool same_cameras(const std::vector<CameraModel>& a, const std::vector<CameraModel>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].view_id != b[i].view_id || a[i].image_width_px != b[i].image_width_px ||
        a[i].image_height_px != b[i].image_height_px || a[i].focal_px != b[i].focal_px ||
        a[i].principal_x_px != b[i].principal_x_px) {
      return false;
    }
  }
  return true;
}

fs::path resolve_against(const fs::path& base_file, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base_file.parent_path() / path;
}

SceneSpec make_scene_spec(const SimulationSettings& s, const std::vector<CameraModel>& cams, Material material,
                          std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x5ce);
  SceneSpec spec;
  spec.duration_s = s.scene_seconds;
  spec.views = cams;
  spec.rng_seed = seed;
  spec.source_rms = s.source_rms;
  spec.noise_floor_db = uniform(rng, s.noise_floor_db_min, s.noise_floor_db_max);
  spec.trajectory.clear();
  double t = 0.0;
  double az = uniform(rng, -s.max_azimuth_deg, s.max_azimuth_deg);
  spec.trajectory.push_back({t, az});
  while (t < s.scene_seconds) {
    t += uniform(rng, 1.0, 4.0);
    az = std::clamp(az + uniform(rng, -20.0, 20.0), -s.max_azimuth_deg, s.max_azimuth_deg);
    spec.trajectory.push_back({t, az});
  }
  if (material == Material::speech) {
    double start = uniform(rng, 0.0, 0.5);
    while (start < s.scene_seconds - 0.2) {
      const double end = std::min(start + uniform(rng, 1.5, 5.0), s.scene_seconds);
      spec.speech_segments.push_back({start, end});
      start = end + uniform(rng, 0.3, 1.2);
    }
  }
  spec.validate();
  return spec;
}

/// Per-microphone sensitivity offsets the calibration step has to remove.
std::vector<double> mic_sensitivities(std::size_t n, double spread_db, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x5e5);
  std::vector<double> g(n);
  for (auto& v : g) v = std::pow(10.0, uniform(rng, -spread_db, spread_db) / 20.0);
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// front ends

std::string FrontEnd::name() const {
  switch (kind) {
    case FrontEndKind::mono:
      return "mono";
    case FrontEndKind::stereo:
      return "stereo";
    case FrontEndKind::raw16:
      return "raw16";
    case FrontEndKind::beamformed:
      for (std::size_t n : {3u, 7u, 15u}) {
        if (look_dirs.azimuths_deg() == look_direction_preset(n).azimuths_deg()) return "beamformed" + std::to_string(n);
      }
      return "beamformed";
  }
  return "beamformed";
}

std::size_t FrontEnd::channels() const {
  switch (kind) {
    case FrontEndKind::mono:
      return 1;
    case FrontEndKind::stereo:
      return 2;
    case FrontEndKind::raw16:
      return kAvaMicCount;
    case FrontEndKind::beamformed:
      return look_dirs.size();
  }
  return 0;
}

FrontEnd FrontEnd::parse(const std::string& name, const std::vector<double>& look_dirs_deg) {
  FrontEnd fe;
  if (name != "beamformed" && !look_dirs_deg.empty()) {
    throw InputError("an explicit look-direction list needs front end 'beamformed', not '" + name + "'");
  }
  fe.look_dirs = LookDirectionSet();
  if (name == "mono") {
    fe.kind = FrontEndKind::mono;
  } else if (name == "stereo") {
    fe.kind = FrontEndKind::stereo;
  } else if (name == "raw16") {
    fe.kind = FrontEndKind::raw16;
  } else if (name == "beamformed3" || name == "beamformed7" || name == "beamformed15") {
    fe.kind = FrontEndKind::beamformed;
    fe.look_dirs = look_direction_preset(std::stoul(name.substr(10)));
  } else if (name == "beamformed") {
    if (look_dirs_deg.empty()) throw InputError("front end 'beamformed' needs look_dirs_deg");
    fe.kind = FrontEndKind::beamformed;
    fe.look_dirs = LookDirectionSet(look_dirs_deg);
  } else {
    throw InputError("unknown front end '" + name +
                     "' (expected mono, stereo, raw16, beamformed3, beamformed7, beamformed15 or beamformed)");
  }
  return fe;
}

FrontEndProcessor::FrontEndProcessor(const FrontEnd& fe, const ArrayGeometry& geom, const BeamformerSettings& bf,
                                     std::optional<BeamformerDesign> weights)
    : fe_(fe) {
  switch (fe.kind) {
    case FrontEndKind::mono:
      picks_ = {center_mic_index(geom)};
      break;
    case FrontEndKind::stereo: {
      const auto [left, right] = ortf_pair_indices(geom);
      picks_ = {left, right};
      break;
    }
    case FrontEndKind::raw16:
      if (geom.size() != kAvaMicCount) {
        throw InputError("front end raw16 needs a 16-microphone geometry, got " + std::to_string(geom.size()));
      }
      for (std::size_t i = 0; i < geom.size(); ++i) picks_.push_back(i);
      break;
    case FrontEndKind::beamformed:
      if (weights) {
        if (weights->n_mics != geom.size()) throw InputError("beamformer weights do not match the array size");
        if (weights->look_dirs.azimuths_deg() != fe.look_dirs.azimuths_deg()) {
          throw InputError("beamformer weights were designed for other look directions");
        }
        design_ = std::move(weights);
      } else {
        design_ = design_sdb(geom, fe.look_dirs, bf.fft_size, kSampleRate, bf.wng_min_db);
      }
      break;
  }
}

AudioBuffer FrontEndProcessor::operator()(const AudioBuffer& mics) const {
  if (design_) {
    if (mics.channels != design_->n_mics) throw InputError("audio channel count does not match the beamformer");
    return apply_beamformer(*design_, mics);
  }
  return mics.select(picks_);
}

// ---------------------------------------------------------------------------
// configuration

void PipelineConfig::validate() const {
  if (network.in_channels != front_end.channels()) {
    throw InputError("config/channel mismatch: front end " + front_end.name() + " yields " +
                     std::to_string(front_end.channels()) + " channels but network.in_channels is " +
                     std::to_string(network.in_channels));
  }
  network.validate();
  trainer.validate();
  if (beamformer.fft_size < 16 || (beamformer.fft_size & (beamformer.fft_size - 1)) != 0) {
    throw InputError("beamformer.fft_size must be a power of two >= 16");
  }
  const auto& s = simulate;
  if (!(s.scene_seconds >= 1.0)) throw InputError("simulate.scene_seconds must be at least 1");
  if (!(s.max_azimuth_deg > 0.0 && s.max_azimuth_deg <= kMaxSceneAzimuth)) {
    throw InputError("simulate.max_azimuth_deg must lie in (0, 60]");
  }
  if (s.noise_floor_db_min > s.noise_floor_db_max) throw InputError("simulate noise floor range is reversed");
  if (s.view_offsets_px.empty() || s.view_offsets_px.size() > kViewCount) {
    throw InputError("simulate.view_offsets_px needs 1 to 11 entries");
  }
  if (s.train_speech_scenes + s.train_silent_scenes == 0) throw InputError("simulate has no training scenes");
  if (!(s.calibration_seconds > 0.0)) throw InputError("simulate.calibration_seconds must be positive");
  if (!(features.target_rms > 0.0)) throw InputError("features.target_rms must be positive");
  if (eval.threshold_count < 3) throw InputError("eval.threshold_count must be at least 3");
  if (!(eval.smooth_sigma > 0.0)) throw InputError("eval.smooth_sigma must be positive");
  if (eval.tolerance_deg && !(*eval.tolerance_deg > 0.0 && *eval.tolerance_deg < 90.0)) {
    throw InputError("eval.tolerance_deg must lie in (0, 90)");
  }
  for (const auto& name : trend.front_ends) FrontEnd::parse(name);
}

std::string PipelineConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["front_end"] = front_end.name();
  if (front_end.name() == "beamformed") j["look_dirs_deg"] = front_end.look_dirs.azimuths_deg();
  j["geometry"] = geometry;
  j["cameras"] = cameras;
  j["beamformer"] = {{"fft_size", beamformer.fft_size}, {"wng_min_db", beamformer.wng_min_db}};
  j["simulate"] = {{"train_speech_scenes", simulate.train_speech_scenes},
                   {"train_silent_scenes", simulate.train_silent_scenes},
                   {"test_speech_scenes", simulate.test_speech_scenes},
                   {"test_silent_scenes", simulate.test_silent_scenes},
                   {"scene_seconds", simulate.scene_seconds},
                   {"max_azimuth_deg", simulate.max_azimuth_deg},
                   {"noise_floor_db_min", simulate.noise_floor_db_min},
                   {"noise_floor_db_max", simulate.noise_floor_db_max},
                   {"source_rms", simulate.source_rms},
                   {"view_offsets_px", simulate.view_offsets_px},
                   {"calibration_seconds", simulate.calibration_seconds}};
  j["features"] = {{"calibrate", features.calibrate},
                   {"calibration_wav", features.calibration_wav},
                   {"target_rms", features.target_rms},
                   {"norm_mode", norm_mode_name(features.norm_mode)}};
  j["network"] = json::parse(network_config_json(network));
  j["trainer"] = {{"epochs", trainer.epochs},
                  {"batch_size", trainer.batch_size},
                  {"learning_rate", trainer.learning_rate},
                  {"adam_beta1", trainer.adam_beta1},
                  {"adam_beta2", trainer.adam_beta2},
                  {"adam_eps", trainer.adam_eps}};
  j["eval"] = {{"threshold_count", eval.threshold_count},
               {"smooth_sigma", eval.smooth_sigma},
               {"tolerance_deg", eval.tolerance_deg ? json(*eval.tolerance_deg) : json(nullptr)}};
  j["trend"] = {{"front_ends", trend.front_ends}};
  return j.dump(2) + "\n";
}

std::string PipelineConfig::hash() const { return hex64(fnv1a(to_json())); }

void PipelineConfig::set_front_end(const FrontEnd& fe) {
  front_end = fe;
  network.in_channels = fe.channels();
}

PipelineConfig PipelineConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("configuration: ") + e.what());
  }
  PipelineConfig c;
  try {
    check_keys(j, "config",
               {"seed", "front_end", "look_dirs_deg", "geometry", "cameras", "beamformer", "simulate", "features",
                "network", "trainer", "eval", "trend"});
    get(j, "seed", c.seed);
    get(j, "geometry", c.geometry);
    get(j, "cameras", c.cameras);
    std::string fe_name = c.front_end.name();
    std::vector<double> dirs;
    get(j, "front_end", fe_name);
    get(j, "look_dirs_deg", dirs);
    c.front_end = FrontEnd::parse(fe_name, dirs);

    if (j.contains("beamformer")) {
      const auto& b = j["beamformer"];
      check_keys(b, "beamformer", {"fft_size", "wng_min_db"});
      get(b, "fft_size", c.beamformer.fft_size);
      get(b, "wng_min_db", c.beamformer.wng_min_db);
    }
    if (j.contains("simulate")) {
      const auto& s = j["simulate"];
      check_keys(s, "simulate",
                 {"train_speech_scenes", "train_silent_scenes", "test_speech_scenes", "test_silent_scenes",
                  "scene_seconds", "max_azimuth_deg", "noise_floor_db_min", "noise_floor_db_max", "source_rms",
                  "view_offsets_px", "calibration_seconds"});
      auto& d = c.simulate;
      get(s, "train_speech_scenes", d.train_speech_scenes);
      get(s, "train_silent_scenes", d.train_silent_scenes);
      get(s, "test_speech_scenes", d.test_speech_scenes);
      get(s, "test_silent_scenes", d.test_silent_scenes);
      get(s, "scene_seconds", d.scene_seconds);
      get(s, "max_azimuth_deg", d.max_azimuth_deg);
      get(s, "noise_floor_db_min", d.noise_floor_db_min);
      get(s, "noise_floor_db_max", d.noise_floor_db_max);
      get(s, "source_rms", d.source_rms);
      get(s, "view_offsets_px", d.view_offsets_px);
      get(s, "calibration_seconds", d.calibration_seconds);
    }
    if (j.contains("features")) {
      const auto& f = j["features"];
      check_keys(f, "features", {"calibrate", "calibration_wav", "target_rms", "norm_mode"});
      get(f, "calibrate", c.features.calibrate);
      get(f, "calibration_wav", c.features.calibration_wav);
      get(f, "target_rms", c.features.target_rms);
      if (f.contains("norm_mode")) c.features.norm_mode = norm_mode_from(f["norm_mode"].get<std::string>());
    }
    json net = json::parse(network_config_json(c.network));
    net["in_channels"] = c.front_end.channels();
    if (j.contains("network")) {
      if (!j["network"].is_object()) throw FormatError("network must be a JSON object");
      for (const auto& item : j["network"].items()) net[item.key()] = item.value();
    }
    c.network = network_config_from_json(net.dump());
    if (j.contains("trainer")) {
      const auto& t = j["trainer"];
      check_keys(t, "trainer", {"epochs", "batch_size", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps"});
      get(t, "epochs", c.trainer.epochs);
      get(t, "batch_size", c.trainer.batch_size);
      get(t, "learning_rate", c.trainer.learning_rate);
      get(t, "adam_beta1", c.trainer.adam_beta1);
      get(t, "adam_beta2", c.trainer.adam_beta2);
      get(t, "adam_eps", c.trainer.adam_eps);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      check_keys(e, "eval", {"threshold_count", "smooth_sigma", "tolerance_deg"});
      get(e, "threshold_count", c.eval.threshold_count);
      get(e, "smooth_sigma", c.eval.smooth_sigma);
      if (e.contains("tolerance_deg") && !e["tolerance_deg"].is_null()) {
        c.eval.tolerance_deg = e["tolerance_deg"].get<double>();
      }
    }
    if (j.contains("trend")) {
      const auto& t = j["trend"];
      check_keys(t, "trend", {"front_ends"});
      get(t, "front_ends", c.trend.front_ends);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("configuration: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open configuration " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto c = PipelineConfig::from_json(ss.str());
  // relative geometry and camera paths follow the configuration file
  if (!c.geometry.empty()) c.geometry = resolve_against(path, c.geometry).generic_string();
  if (!c.cameras.empty()) c.cameras = resolve_against(path, c.cameras).generic_string();
  if (!c.features.calibration_wav.empty()) {
    c.features.calibration_wav = resolve_against(path, c.features.calibration_wav).generic_string();
  }
  return c;
}

DerivedSeeds derive_seeds(std::uint64_t seed) {
  return {mix_seed(seed, 101), mix_seed(seed, 202), mix_seed(seed, 303)};
}

std::vector<CameraModel> simulation_cameras(const SimulationSettings& settings) {
  std::vector<CameraModel> cams;
  for (std::size_t v = 0; v < settings.view_offsets_px.size(); ++v) {
    CameraModel c;
    c.view_id = static_cast<int>(v);
    c.principal_x_px = kImageWidthPx / 2.0 + settings.view_offsets_px[v];
    c.validate();
    cams.push_back(c);
  }
  return cams;
}

std::string provenance(const PipelineConfig& config, const std::vector<std::pair<std::string, std::string>>& extra) {
  std::string s = "beamloc config_hash=" + config.hash();
  for (const auto& [k, v] : extra) s += " " + k + "=" + v;
  return s;
}

std::string file_fingerprint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  Fnv1a h;
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto n = static_cast<std::size_t>(in.gcount());
    h.update(std::as_bytes(std::span(buf.data(), n)));
  }
  return hex64(h.digest());
}

// ---------------------------------------------------------------------------
// subcommands

RunOutputs run_design_bf(const PipelineConfig& config, const DesignOptions& options, const LogFn& log) {
  config.validate();
  if (config.front_end.kind != FrontEndKind::beamformed) {
    throw InputError("design-bf needs a beamformed front end, configuration selects " + config.front_end.name());
  }
  RunRecorder run("design-bf", config, options.out_dir);
  ArrayGeometry geom = default_ava_array();
  if (!config.geometry.empty()) {
    run.input("geometry", config.geometry);
    geom = load_geometry(config.geometry);
  }
  say(log, "designing " + std::to_string(config.front_end.channels()) + "-direction beamformer");
  auto design = design_sdb(geom, config.front_end.look_dirs, config.beamformer.fft_size, kSampleRate,
                           config.beamformer.wng_min_db);
  design.metadata = provenance(config, {{"front_end", config.front_end.name()}});
  std::size_t flagged = 0;
  for (auto f : design.flagged) flagged += f;
  save_weights(run.path("beamformer.bin"), design);
  const auto check = load_weights(run.path("beamformer.bin"));
  if (check.n_dirs() != design.n_dirs() || check.n_mics != geom.size()) {
    throw InternalError("weight file failed validation");
  }
  run.output("beamformer.bin");
  say(log, "wrote beamformer.bin (" + std::to_string(flagged) + " flagged bin/direction pairs)");
  return run.finish({{"flagged", flagged}});
}

RunOutputs run_simulate(const PipelineConfig& config, const SimulateOptions& options, const LogFn& log) {
  config.validate();
  RunRecorder run("simulate", config, options.out_dir);
  const auto seeds = derive_seeds(config.seed);
  const auto tag = provenance(config);
  ArrayGeometry geom = default_ava_array();
  if (!config.geometry.empty()) {
    run.input("geometry", config.geometry);
    geom = load_geometry(config.geometry);
  }
  std::vector<CameraModel> cams = simulation_cameras(config.simulate);
  if (!config.cameras.empty()) {
    run.input("cameras", config.cameras);
    cams = load_cameras(config.cameras);
  }
  fs::create_directories(run.path("scenes"));
  save_geometry(run.path("geometry.txt"), geom, tag);
  save_cameras(run.path("cameras.txt"), cams, tag);
  run.output("geometry.txt");
  run.output("cameras.txt");

  const auto sensitivity = mic_sensitivities(geom.size(), 0.5, seeds.scenes);
  auto apply_sensitivity = [&](AudioBuffer& audio) {
    for (std::size_t c = 0; c < audio.channels; ++c) {
      for (double& v : audio.channel(c)) v *= sensitivity[c];
    }
  };

  {
    // independent white noise on every mic, seen through the same sensitivities
    const auto n = static_cast<std::size_t>(std::lround(config.simulate.calibration_seconds * kSampleRate));
    AudioBuffer cal(geom.size(), n);
    Rng rng = make_rng(seeds.scenes, 0xca1);
    for (double& v : cal.samples) v = 0.01 * normal(rng);
    apply_sensitivity(cal);
    write_wav(run.path("calibration.wav"), cal, tag);
    run.output("calibration.wav");
  }

  DatasetManifest manifest;
  struct Plan {
    std::string split;
    Material material;
    std::size_t count;
  };
  const auto& s = config.simulate;
  const std::vector<Plan> plans = {{"train", Material::speech, s.train_speech_scenes},
                                   {"train", Material::silent, s.train_silent_scenes},
                                   {"test", Material::speech, s.test_speech_scenes},
                                   {"test", Material::silent, s.test_silent_scenes}};
  std::uint64_t scene_index = 0;
  for (const auto& plan : plans) {
    for (std::size_t i = 0; i < plan.count; ++i, ++scene_index) {
      char stem[64];
      std::snprintf(stem, sizeof stem, "%s_%s_%02zu", plan.split.c_str(), to_string(plan.material).c_str(), i);
      const auto spec = make_scene_spec(s, cams, plan.material, mix_seed(seeds.scenes, scene_index));
      auto scene = render_scene(spec, geom);
      apply_sensitivity(scene.audio);
      const fs::path wav = fs::path("scenes") / (std::string(stem) + ".wav");
      const fs::path csv = fs::path("scenes") / (std::string(stem) + ".csv");
      write_wav(run.path(wav), scene.audio, tag);
      write_labels(run.path(csv), scene.labels, tag);
      run.output(wav);
      run.output(csv);
      manifest.entries.push_back({run.path(wav), run.path(csv), run.path("geometry.txt"), run.path("cameras.txt"),
                                  plan.split, plan.material});
      say(log, std::string("rendered ") + stem);
    }
  }
  save_manifest(run.path("dataset.json"), manifest, tag);
  load_manifest(run.path("dataset.json")).validate();
  run.output("dataset.json");
  return run.finish({{"scenes", manifest.entries.size()}});
}

RunOutputs run_featurize(const PipelineConfig& config, const FeaturizeOptions& options, const LogFn& log) {
  config.validate();
  RunRecorder run("featurize", config, options.out_dir);
  const auto seeds = derive_seeds(config.seed);
  run.input("dataset", options.dataset);
  const auto manifest = load_manifest(options.dataset);
  manifest.validate();

  std::optional<BeamformerDesign> weights;
  if (options.weights) {
    if (config.front_end.kind != FrontEndKind::beamformed) {
      throw InputError("beamformer weights given for front end " + config.front_end.name());
    }
    run.input("weights", *options.weights);
    weights = load_weights(*options.weights);
  }

  std::vector<double> gains;
  if (config.features.calibrate) {
    const fs::path cal = config.features.calibration_wav.empty() ? options.dataset.parent_path() / "calibration.wav"
                                                                 : fs::path(config.features.calibration_wav);
    run.input("calibration", cal);
    gains = calibrate_gains(read_wav(cal), config.features.target_rms);
  }

  std::set<std::string> names;
  for (const auto& e : manifest.entries) {
    if (!names.insert(scene_name(e)).second) throw InputError("duplicate scene name " + scene_name(e));
  }

  std::map<std::string, FrontEndProcessor> processors;
  auto processed = [&](const ManifestEntry& e) {
    const auto key = e.geometry.generic_string();
    auto it = processors.find(key);
    if (it == processors.end()) {
      it = processors.emplace(key, FrontEndProcessor(config.front_end, load_geometry(e.geometry), config.beamformer,
                                                     weights)).first;
    }
    AudioBuffer audio = read_wav(e.audio);
    if (!gains.empty()) {
      if (gains.size() != audio.channels) throw InputError("calibration channel count does not match " + e.audio.string());
      apply_gains(audio, gains);
    }
    return it->second(audio);
  };

  const json meta{{"config_hash", config.hash()}, {"front_end", config.front_end.name()}};
  const auto tag = provenance(config, {{"front_end", config.front_end.name()}});
  LogMelExtractor extractor;
  const std::size_t channels = config.front_end.channels();

  // training split: balanced (frame, view) samples; one image per (scene, frame)
  const auto refs = sample_training_frames(manifest, seeds.sampling, "train");
  NormAccumulator acc(config.features.norm_mode, channels);
  std::vector<IndexRow> train_rows(refs.size());
  {
    FeatureCacheWriter writer(run.path("train.blf"), channels, meta.dump());
    std::map<std::size_t, std::map<std::int64_t, std::vector<std::size_t>>> by_source;
    for (std::size_t i = 0; i < refs.size(); ++i) by_source[refs[i].source][refs[i].frame].push_back(i);
    for (const auto& [source, frames] : by_source) {
      const auto& entry = manifest.entries[source];
      const auto cams = load_cameras(entry.cameras);
      const AudioBuffer audio = processed(entry);
      for (const auto& [frame, users] : frames) {
        const FeatureStack stack = extract_features(audio, frame, extractor);
        if (!stack.all_finite()) throw InternalError("non-finite features in " + entry.audio.string());
        const std::size_t image = writer.count();
        writer.append(stack);
        for (std::size_t u : users) {
          acc.add(stack);
          const auto& r = refs[u];
          train_rows[u] = {image, scene_name(entry), r.frame, r.view_id, r.active,
                           r.active ? std::optional<double>(r.x_px) : std::nullopt,
                           static_cast<double>(camera_for_view(cams, r.view_id).image_width_px)};
        }
      }
      say(log, "featurized " + scene_name(entry));
    }
    writer.close();
  }
  write_index(run.path("train_index.csv"), train_rows, tag);
  const auto stats = acc.finalize();
  save_stats(run.path("stats.txt"), stats, provenance(config, {{"stats", stats_fingerprint(stats)}}));

  // test split: every label record, one image per (scene, frame)
  std::vector<IndexRow> test_rows;
  {
    FeatureCacheWriter writer(run.path("test.blf"), channels, meta.dump());
    for (const auto& entry : manifest.entries) {
      if (entry.split != "test") continue;
      const auto cams = load_cameras(entry.cameras);
      const auto labels = ingest_pseudo_labels(entry.labels, cams);
      const AudioBuffer audio = processed(entry);
      std::map<std::int64_t, std::size_t> images;
      for (const auto& r : labels) {
        auto it = images.find(r.frame);
        if (it == images.end()) {
          const FeatureStack stack = extract_features(audio, r.frame, extractor);
          if (!stack.all_finite()) throw InternalError("non-finite features in " + entry.audio.string());
          it = images.emplace(r.frame, writer.count()).first;
          writer.append(stack);
        }
        test_rows.push_back({it->second, scene_name(entry), r.frame, r.view_id, r.active, r.x_px,
                             static_cast<double>(camera_for_view(cams, r.view_id).image_width_px)});
      }
      say(log, "featurized " + scene_name(entry));
    }
    writer.close();
  }
  write_index(run.path("test_index.csv"), test_rows, tag);

  if (load_stats(run.path("stats.txt")).per_bin_mean != stats.per_bin_mean ||
      FeatureCacheReader(run.path("train.blf")).count() == 0) {
    throw InternalError("feature outputs failed validation");
  }
  for (const char* f : {"train.blf", "train_index.csv", "test.blf", "test_index.csv", "stats.txt"}) run.output(f);
  return run.finish({{"train_samples", train_rows.size()}, {"test_records", test_rows.size()}});
}

RunOutputs run_train(const PipelineConfig& config, const TrainOptions& options, const LogFn& log) {
  config.validate();
  RunRecorder run("train", config, options.out_dir);
  const auto seeds = derive_seeds(config.seed);
  const auto dir = options.features_dir;
  for (const char* f : {"train.blf", "train_index.csv", "stats.txt"}) run.input(f, dir / f);
  const auto stats = load_stats(dir / "stats.txt");

  TrainingSet data{load_bank(dir / "train.blf", stats, config.network.in_channels, config.front_end.name()), {}};
  for (const auto& r : read_index(dir / "train_index.csv", data.bank.size())) {
    if (r.active && !r.x_px) throw FormatError("training sample without a position");
    data.samples.push_back({r.image, r.view_id, r.active, r.active ? *r.x_px / r.image_width : 0.0});
  }
  say(log, "training on " + std::to_string(data.samples.size()) + " samples (" +
               std::to_string(data.bank.size()) + " images, " + std::to_string(data.bank.channels()) +
               " channels)");

  TrainerConfig tc = config.trainer;
  tc.rng_seed = seeds.trainer;
  auto result = train(data, config.network, tc, [&](int epoch, double loss) {
    say(log, "epoch " + std::to_string(epoch) + "/" + std::to_string(tc.epochs) + " mean loss " + fmt("%.6f", loss));
  });
  result.model.stats_hash = stats_fingerprint(stats);
  result.model.config_hash = config.hash();
  save_checkpoint(run.path("model.blm"), result.model);
  write_loss_history(run.path("loss.csv"), result.loss_history, provenance(config));
  const auto check = load_checkpoint(run.path("model.blm"));
  if (check.stats_hash != result.model.stats_hash || !(check.config() == result.model.config())) {
    throw InternalError("checkpoint failed validation");
  }
  run.output("model.blm");
  run.output("loss.csv");
  return run.finish({{"final_loss", result.loss_history.back()}});
}

RunOutputs run_infer(const PipelineConfig& config, const InferOptions& options, const LogFn& log) {
  config.validate();
  RunRecorder run("infer", config, options.out_dir);
  const auto dir = options.features_dir;
  run.input("model", options.model);
  for (const char* f : {"test.blf", "test_index.csv", "stats.txt"}) run.input(f, dir / f);
  Model model = load_checkpoint(options.model);
  const auto stats = load_stats(dir / "stats.txt");
  const auto stats_fp = stats_fingerprint(stats);
  if (stats_fp != model.stats_hash) {
    throw InputError("feature statistics " + stats_fp + " do not match the model, which was trained with " +
                     model.stats_hash);
  }
  const FeatureBank bank = load_bank(dir / "test.blf", stats, model.config().in_channels, {});
  const auto rows = read_index(dir / "test_index.csv", bank.size());
  std::vector<SampleRef> refs;
  for (const auto& r : rows) refs.push_back({r.image, r.view_id, r.active, 0.0});
  say(log, "predicting " + std::to_string(refs.size()) + " frames");
  const auto preds = model.predict(bank, refs);

  std::vector<std::string> order;
  std::map<std::string, std::vector<Detection>> scenes;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!scenes.contains(rows[i].scene)) order.push_back(rows[i].scene);
    scenes[rows[i].scene].push_back({rows[i].frame, rows[i].view_id, preds[i].x_hat * rows[i].image_width,
                                     std::clamp(preds[i].c_hat, 0.0, 1.0)});
  }
  fs::create_directories(run.path("detections"));
  std::vector<std::pair<std::string, std::string>> extra = {{"model", file_fingerprint(options.model)},
                                                            {"stats", stats_fp}};
  if (options.smooth_sigma) extra.emplace_back("smooth_sigma", fmt("%.9g", *options.smooth_sigma));
  const auto tag = provenance(config, extra);
  for (const auto& name : order) {
    auto dets = scenes[name];
    if (options.smooth_sigma) dets = gaussian_smooth(dets, *options.smooth_sigma);
    const fs::path rel = fs::path("detections") / (name + ".csv");
    write_detections(run.path(rel), dets, tag);
    if (read_detections(run.path(rel)).size() != dets.size()) throw InternalError("detections failed validation");
    run.output(rel);
  }
  return run.finish({{"frames", rows.size()}, {"scenes", order.size()}});
}

RunOutputs run_eval(const PipelineConfig& config, const EvalRunOptions& options, MetricsReport* report_out,
                    const LogFn& log) {
  config.validate();
  RunRecorder run("eval", config, options.out_dir);

  std::optional<std::string> stats_fp, model_fp;
  if (options.stats) {
    run.input("stats", *options.stats);
    stats_fp = stats_fingerprint(load_stats(*options.stats));
  }
  if (options.model) {
    run.input("model", *options.model);
    model_fp = file_fingerprint(*options.model);
    const auto model = load_checkpoint(*options.model);
    if (stats_fp && model.stats_hash != *stats_fp) {
      throw InputError("refusing to evaluate: the model was trained with feature statistics " + model.stats_hash +
                       " but " + *stats_fp + " was given");
    }
  }
  auto check_detections = [&](const fs::path& p) {
    const auto prov = read_provenance(p);
    if (stats_fp && prov.contains("stats") && prov.at("stats") != *stats_fp) {
      throw InputError("refusing to evaluate: " + p.string() + " was produced with feature statistics " +
                       prov.at("stats") + ", not " + *stats_fp);
    }
    if (model_fp && prov.contains("model") && prov.at("model") != *model_fp) {
      throw InputError("refusing to evaluate: " + p.string() + " was produced by another model");
    }
  };

  std::vector<ScoredFrame> frames;
  std::vector<CameraModel> cams;
  if (options.dataset) {
    if (!options.detections_dir) throw InputError("eval with a dataset needs a detections directory");
    run.input("dataset", *options.dataset);
    const auto manifest = load_manifest(*options.dataset);
    bool first = true;
    for (const auto& e : manifest.entries) {
      if (e.split != "test") continue;
      const auto entry_cams = load_cameras(e.cameras);
      if (first) {
        cams = entry_cams;
        first = false;
      } else if (!same_cameras(cams, entry_cams)) {
        throw InputError("pooled evaluation needs identical camera files across test scenes");
      }
      const auto labels = ingest_pseudo_labels(e.labels, entry_cams);
      const auto det_path = *options.detections_dir / (scene_name(e) + ".csv");
      if (!fs::exists(det_path)) throw InputError("missing detections file " + det_path.string());
      check_detections(det_path);
      const auto dets = read_detections(det_path);
      const auto aligned = align(dets, labels);
      frames.insert(frames.end(), aligned.begin(), aligned.end());
    }
    if (first) throw InputError("dataset has no test scenes");
  } else {
    if (!options.detections || !options.labels) {
      throw InputError("eval needs --dataset with --detections-dir, or --detections with --labels");
    }
    run.input("detections", *options.detections);
    run.input("labels", *options.labels);
    if (options.cameras) {
      run.input("cameras", *options.cameras);
      cams = load_cameras(*options.cameras);
    } else if (!config.cameras.empty()) {
      run.input("cameras", config.cameras);
      cams = load_cameras(config.cameras);
    } else {
      cams = simulation_cameras(config.simulate);
    }
    check_detections(*options.detections);
    const auto labels = ingest_pseudo_labels(*options.labels, cams);
    frames = align(read_detections(*options.detections), labels);
  }

  EvalOptions eo;
  eo.threshold_count = config.eval.threshold_count;
  eo.custom_tolerance_deg = config.eval.tolerance_deg;
  MetricsReport report = evaluate(frames, cams, eo);
  report.config_hash = config.hash();
  write_report(run.path("report.json"), report);
  {
    std::ofstream out(run.path("pr_curve.csv"));
    out << "# " << provenance(config) << '\n' << "tolerance_deg,threshold,precision,recall,tp,fp,fn\n";
    for (const auto& [deg, curve] : {std::pair{2, &report.pr_at_2deg}, std::pair{5, &report.pr_at_5deg}}) {
      for (const auto& p : *curve) {
        out << deg << ',' << fmt("%.17g", p.threshold) << ',' << fmt("%.17g", p.precision) << ','
            << fmt("%.17g", p.recall) << ',' << p.tp << ',' << p.fp << ',' << p.fn << '\n';
      }
    }
    if (!out) throw InputError("write failed: " + run.path("pr_curve.csv").string());
  }
  {
    std::ifstream in(run.path("report.json"));
    if (!json::accept(in)) throw InternalError("report failed validation");
  }
  run.output("report.json");
  run.output("pr_curve.csv");
  say(log, "AP@2deg " + fmt("%.4f", report.ap_at_2deg) + ", AP@5deg " + fmt("%.4f", report.ap_at_5deg) + ", aD " +
               fmt("%.2f", report.ad_px) + " px (" + fmt("%.2f", report.ad_deg) + " deg), accuracy " +
               fmt("%.4f", report.cls_accuracy));
  if (report_out) *report_out = report;
  return run.finish(json::parse(report_json(report)));
}

RunOutputs run_trend(const PipelineConfig& config, const TrendOptions& options, std::vector<TrendRow>* rows_out,
                     const LogFn& log) {
  config.validate();
  if (config.trend.front_ends.empty()) throw InputError("trend.front_ends is empty");
  RunRecorder run("trend", config, options.out_dir);
  fs::path dataset;
  if (options.dataset) {
    dataset = *options.dataset;
  } else {
    say(log, "simulating the benchmark");
    run_simulate(config, {run.path("data")}, log);
    dataset = run.path("data") / "dataset.json";
  }
  run.input("dataset", dataset);

  std::vector<TrendRow> rows;
  for (std::size_t i = 0; i < config.trend.front_ends.size(); ++i) {
    const auto& name = config.trend.front_ends[i];
    PipelineConfig c = config;
    c.set_front_end(FrontEnd::parse(name));
    const fs::path dir = run.path(name);
    say(log, "front end " + name);
    run_featurize(c, {dataset, std::nullopt, dir / "features"}, log);
    run_train(c, {dir / "features", dir / "model"}, log);
    run_infer(c, {dir / "model" / "model.blm", dir / "features", std::nullopt, dir / "infer"}, log);
    TrendRow row{name, c.front_end.channels(), false, {}};
    EvalRunOptions eo;
    eo.dataset = dataset;
    eo.detections_dir = dir / "infer" / "detections";
    eo.model = dir / "model" / "model.blm";
    eo.stats = dir / "features" / "stats.txt";
    eo.out_dir = dir / "eval";
    run_eval(c, eo, &row.report, log);
    rows.push_back(row);

    if (i + 1 == config.trend.front_ends.size()) {
      run_infer(c, {dir / "model" / "model.blm", dir / "features", config.eval.smooth_sigma, dir / "infer_tc"}, log);
      TrendRow tc{name + "+tc", c.front_end.channels(), true, {}};
      eo.detections_dir = dir / "infer_tc" / "detections";
      eo.out_dir = dir / "eval_tc";
      run_eval(c, eo, &tc.report, log);
      rows.push_back(tc);
    }
  }

  auto num = [](double v, const char* pattern) { return std::isfinite(v) ? fmt(pattern, v) : std::string("nan"); };
  {
    std::ofstream out(run.path("trend.csv"));
    out << "# " << provenance(config) << '\n'
        << "front_end,channels,smoothed,ap_at_2deg,f1_at_2deg,ap_at_5deg,f1_at_5deg,ad_px,ad_deg,cls_accuracy\n";
    for (const auto& r : rows) {
      const auto& m = r.report;
      out << r.front_end << ',' << r.channels << ',' << (r.smoothed ? 1 : 0) << ',' << num(m.ap_at_2deg, "%.6f")
          << ',' << num(m.f1_at_2deg, "%.6f") << ',' << num(m.ap_at_5deg, "%.6f") << ',' << num(m.f1_at_5deg, "%.6f")
          << ',' << num(m.ad_px, "%.3f") << ',' << num(m.ad_deg, "%.4f") << ',' << num(m.cls_accuracy, "%.6f") << '\n';
    }
  }
  {
    std::ofstream out(run.path("trend.md"));
    out << "<!-- " << provenance(config) << " -->\n\n"
        << "| Front end | AP@2° | F1@2° | AP@5° | F1@5° | aD (px) | aD (°) | Accuracy |\n"
        << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      const auto& m = r.report;
      out << "| " << r.front_end << " | " << num(100 * m.ap_at_2deg, "%.1f") << " | "
          << num(100 * m.f1_at_2deg, "%.1f") << " | " << num(100 * m.ap_at_5deg, "%.1f") << " | "
          << num(100 * m.f1_at_5deg, "%.1f") << " | " << num(m.ad_px, "%.0f") << " | " << num(m.ad_deg, "%.2f")
          << " | " << num(100 * m.cls_accuracy, "%.1f") << " |\n";
    }
  }
  run.output("trend.csv");
  run.output("trend.md");
  if (rows_out) *rows_out = rows;
  json summary = json::array();
  for (const auto& r : rows) summary.push_back({{"front_end", r.front_end}, {"ap_at_2deg", r.report.ap_at_2deg}});
  return run.finish({{"rows", summary}});
}

}  // namespace beamloc
