#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "beamloc/dsp.hpp"
#include "beamloc/error.hpp"
#include "beamloc/random.hpp"
#include "beamloc/scenes.hpp"
#include "doctest.h"
#include "unit/test_support.hpp"

using namespace beamloc;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("beamloc_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Lag (in samples, sub-sample by parabolic interpolation) at which
// b best matches a, i.e. b[n] ~ a[n - lag].
double xcorr_lag(std::span<const double> a, std::span<const double> b, int max_lag) {
  std::vector<double> r(2 * max_lag + 1);
  const auto n = static_cast<int>(a.size());
  for (int lag = -max_lag; lag <= max_lag; ++lag) {
    double acc = 0.0;
    for (int i = max_lag; i < n - max_lag; ++i) acc += b[i] * a[i - lag];
    r[lag + max_lag] = acc;
  }
  const auto best = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  double offset = 0.0;
  if (best > 0 && best < 2 * max_lag) {
    const double y0 = r[best - 1], y1 = r[best], y2 = r[best + 1];
    offset = 0.5 * (y0 - y2) / (y0 - 2 * y1 + y2);
  }
  return best - max_lag + offset;
}

// Integer peak lag after pre-emphasis, which whitens the speech spectrum.
int whitened_lag(std::span<const double> a, std::span<const double> b, int max_lag) {
  std::vector<double> wa(a.size()), wb(b.size());
  for (std::size_t i = 1; i < a.size(); ++i) {
    wa[i] = a[i] - 0.95 * a[i - 1];
    wb[i] = b[i] - 0.95 * b[i - 1];
  }
  return static_cast<int>(std::lround(xcorr_lag(wa, wb, max_lag)));
}

SceneSpec talking_scene(double seconds, std::uint64_t seed) {
  SceneSpec spec;
  spec.duration_s = seconds;
  spec.trajectory = {{0.0, -20.0}, {seconds, 25.0}};
  spec.speech_segments = {{0.5, seconds / 2.0}, {seconds / 2.0 + 0.4, seconds - 0.3}};
  spec.rng_seed = seed;
  return spec;
}

}  // namespace

TEST_SUITE("scenes") {
  TEST_CASE("silent scene: noise only and every label inactive") {
    SceneSpec spec;
    spec.duration_s = 2.0;
    spec.noise_floor_db = -30.0;
    spec.rng_seed = 5;
    const auto scene = render_scene(spec, default_ava_array());
    CHECK(scene.audio.channels == 16);
    CHECK(scene.audio.frames == 96000);
    const double expected = spec.source_rms * std::pow(10.0, -30.0 / 20.0);
    for (std::size_t c = 0; c < 16; ++c) {
      CHECK(dsp::rms(scene.audio.channel(c)) == doctest::Approx(expected).epsilon(0.02));
    }
    REQUIRE_FALSE(scene.labels.empty());
    for (const auto& r : scene.labels) CHECK_FALSE(r.active);
  }

  TEST_CASE("static source at 0 deg is labeled at the principal point") {
    SceneSpec spec = talking_scene(3.0, 2);
    spec.trajectory = {{0.0, 0.0}};
    const auto scene = render_scene(spec, default_ava_array());
    int active = 0;
    for (const auto& r : scene.labels) {
      if (!r.active) continue;
      ++active;
      REQUIRE(r.x_px.has_value());
      CHECK(*r.x_px == spec.views[0].principal_x_px);
    }
    CHECK(active > 40);
  }

  TEST_CASE("labels cover full-chunk frames and follow the 30 fps clock") {
    SceneSpec spec = talking_scene(4.0, 3);
    CameraModel side;
    side.view_id = 3;
    side.principal_x_px = 1224.0 + 1200.0;
    spec.views.push_back(side);
    const auto scene = render_scene(spec, default_ava_array());
    const auto [first, last] = full_chunk_frame_range(scene.audio.frames);
    CHECK(first == 3);
    CHECK(frame_center_sample(first) - 4000 >= 0);
    CHECK(frame_center_sample(last - 1) + 4000 <= static_cast<std::int64_t>(scene.audio.frames));
    CHECK(frame_center_sample(last) + 4000 > static_cast<std::int64_t>(scene.audio.frames));
    CHECK(scene.labels.size() == static_cast<std::size_t>(2 * (last - first)));
    int unlabeled = 0;
    for (const auto& r : scene.labels) {
      const double t = static_cast<double>(r.frame) / 30.0;
      CHECK(r.active == spec.active_at(t));
      if (r.active && r.x_px) {
        const auto& cam = camera_for_view(spec.views, r.view_id);
        CHECK(*r.x_px == doctest::Approx(azimuth_to_pixel(cam, spec.azimuth_at(t))));
      }
      if (r.active && !r.x_px) ++unlabeled;
    }
    // view 3 looks left; the source ends up right of its frame
    CHECK(unlabeled > 0);
  }

  TEST_CASE("rendering is deterministic under the seed") {
    const auto a = render_scene(talking_scene(1.5, 9), default_ava_array());
    const auto b = render_scene(talking_scene(1.5, 9), default_ava_array());
    const auto c = render_scene(talking_scene(1.5, 10), default_ava_array());
    CHECK(a.audio.samples == b.audio.samples);
    CHECK(a.labels == b.labels);
    CHECK(a.audio.samples != c.audio.samples);
  }

  TEST_CASE("active-segment level over the noise floor matches the SNR") {
    for (double floor_db : {-10.0, -20.0, -30.0}) {
      SceneSpec spec;
      spec.duration_s = 6.0;
      spec.trajectory = {{0.0, 15.0}};
      spec.speech_segments = {{1.0, 5.0}};
      spec.noise_floor_db = floor_db;
      spec.rng_seed = 21;
      const auto scene = render_scene(spec, default_ava_array());
      const auto x = scene.audio.channel(4);
      const double active = dsp::rms(x.subspan(48000 + 480, 4 * 48000 - 960));
      const double noise = dsp::rms(x.subspan(0, 48000));
      const double measured = 20.0 * std::log10(active / noise);
      const double expected = 10.0 * std::log10(1.0 + std::pow(10.0, -floor_db / 10.0));
      MESSAGE("floor " << floor_db << " dB: measured " << measured << " dB");
      CHECK(std::abs(measured - expected) <= 0.5);
      CHECK(std::abs(measured - (-floor_db)) <= 0.5);
    }
  }

  TEST_CASE("cross-correlation lags recover the 30 deg steering delays") {
    const ArrayGeometry g = default_ava_array();
    SceneSpec spec;
    spec.duration_s = 1.0;
    spec.trajectory = {{0.0, 30.0}};
    spec.speech_segments = {{0.0, 1.0}};
    spec.noise_floor_db = -200.0;
    Rng rng = make_rng(4);
    std::vector<double> noise(48000);
    for (double& v : noise) v = normal(rng);
    // band-limit so the correlation peak is smooth enough to interpolate
    for (int pass = 0; pass < 4; ++pass) dsp::Biquad::lowpass(4000.0, 0.7071, kSampleRate).process(noise);
    spec.source_signal = noise;
    const auto scene = render_scene(spec, g);
    const auto delays = steering_delays(g, 30.0);
    for (std::size_t m = 1; m < g.size(); ++m) {
      const double lag = xcorr_lag(scene.audio.channel(0), scene.audio.channel(m), 40);
      const double expected = (delays[m] - delays[0]) * kSampleRate;
      CHECK(std::abs(lag - expected) < 0.05);
    }
  }

  TEST_CASE("ORTF pair lag of a 20 deg talker matches geometry within one sample") {
    const ArrayGeometry g = default_ava_array();
    SceneSpec spec = talking_scene(3.0, 12);
    spec.trajectory = {{0.0, 20.0}};
    spec.speech_segments = {{0.0, 3.0}};
    spec.noise_floor_db = -25.0;
    const auto scene = render_scene(spec, g);
    const auto [l, r] = ortf_pair_indices(g);
    const auto delays = steering_delays(g, 20.0);
    const double expected = (delays[r] - delays[l]) * kSampleRate;
    const int lag = whitened_lag(scene.audio.channel(l), scene.audio.channel(r), 40);
    MESSAGE("expected " << expected << " samples, measured " << lag);
    CHECK(std::abs(lag - expected) <= 1.0);
  }

  TEST_CASE("scene validation") {
    SceneSpec spec = talking_scene(3.0, 1);
    spec.speech_segments = {{0.0, 2.0}, {1.5, 2.5}};
    CHECK_THROWS_AS(spec.validate(), InputError);
    spec = talking_scene(3.0, 1);
    spec.speech_segments = {{2.0, 3.5}};
    CHECK_THROWS_AS(spec.validate(), InputError);
    spec = talking_scene(3.0, 1);
    spec.trajectory = {{0.0, 65.0}};
    CHECK_THROWS_AS(spec.validate(), InputError);
    spec = talking_scene(3.0, 1);
    CHECK(spec.azimuth_at(1.5) == doctest::Approx(2.5));
    CHECK(spec.azimuth_at(-1.0) == -20.0);
    CHECK(spec.azimuth_at(10.0) == 25.0);
  }

  TEST_CASE("pseudo-label CSV parsing") {
    const auto dir = temp_dir("labels");
    std::vector<CameraModel> cams(4);
    for (int i = 0; i < 4; ++i) cams[i].view_id = i;

    std::ofstream(dir / "ok.csv") << "frame,view,active,x_px\n12,3,1,1224.0\n12,3,0,\n";
    CHECK_THROWS_AS(ingest_pseudo_labels(dir / "ok.csv", cams), FormatError);  // duplicate key

    std::ofstream(dir / "ok2.csv") << "frame,view,active,x_px\n12,3,1,1224.0\n13,3,0,\n";
    const auto recs = ingest_pseudo_labels(dir / "ok2.csv", cams);
    REQUIRE(recs.size() == 2);
    CHECK(recs[0].frame == 12);
    CHECK(recs[0].view_id == 3);
    CHECK(recs[0].active);
    CHECK(*recs[0].x_px == 1224.0);
    CHECK_FALSE(recs[1].active);
    CHECK_FALSE(recs[1].x_px.has_value());

    std::ofstream(dir / "wide.csv") << "frame,view,active,x_px\n12,3,1,3000\n";
    try {
      ingest_pseudo_labels(dir / "wide.csv", cams);
      FAIL("expected a validation error");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("2448") != std::string::npos);
      CHECK(msg.find(":2:") != std::string::npos);
    }

    std::ofstream(dir / "mixed.csv") << "frame,view,active,x_px,screened\n1,0,1,10,1\n2,7,1,10,1\nx,0,0,,1\n"
                                        "3,0,0,5,1\n4,0,1,,0\n";
    try {
      ingest_pseudo_labels(dir / "mixed.csv", cams);
      FAIL("expected a validation error");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find(":3: unknown view id 7") != std::string::npos);
      CHECK(msg.find(":4: bad frame") != std::string::npos);
      CHECK(msg.find(":5: inactive record") != std::string::npos);
      CHECK(msg.find(":6:") == std::string::npos);
    }

    std::ofstream(dir / "hdr.csv") << "frame,view,x_px\n";
    CHECK_THROWS_AS(ingest_pseudo_labels(dir / "hdr.csv", cams), FormatError);
  }

  TEST_CASE("label write/ingest round trip keeps screening and unlabeled actives") {
    const auto dir = temp_dir("labels_rt");
    std::vector<LabelRecord> recs = {{5, 0, true, 100.25, true}, {5, 1, true, std::nullopt, true},
                                     {6, 0, false, std::nullopt, true}, {6, 1, true, 2000.5, false}};
    std::vector<CameraModel> cams(2);
    cams[1].view_id = 1;
    write_labels(dir / "l.csv", recs);
    CHECK(ingest_pseudo_labels(dir / "l.csv", cams) == recs);
  }

  TEST_CASE("balanced sampling: 100 active + 300 silent gives 100 + 100") {
    std::vector<LabelSource> sources(2);
    for (int f = 0; f < 100; ++f) sources[0].labels.push_back({f, 0, true, 500.0 + f, true});
    // unscreened and inactive speech-material frames are never drawn
    sources[0].labels.push_back({200, 0, true, 10.0, false});
    sources[0].labels.push_back({201, 0, false, std::nullopt, true});
    sources[1].material = Material::silent;
    for (int f = 0; f < 300; ++f) sources[1].labels.push_back({f, 0, false, std::nullopt, true});

    const auto picked = sample_training_frames(sources, 42);
    REQUIRE(picked.size() == 200);
    int active = 0;
    for (const auto& r : picked) {
      if (r.active) {
        ++active;
        CHECK(r.source == 0);
        CHECK(r.frame < 100);
      } else {
        CHECK(r.source == 1);
      }
    }
    CHECK(active == 100);
    CHECK(sample_training_frames(sources, 42) == picked);
    CHECK(sample_training_frames(sources, 43) != picked);

    sources[1].material = Material::speech;
    CHECK_THROWS_AS(sample_training_frames(sources, 1), InputError);
  }

  TEST_CASE("silent selections are uniform over the silent file") {
    std::vector<LabelSource> sources(2);
    for (int f = 0; f < 100; ++f) sources[0].labels.push_back({f, 0, true, 1.0, true});
    sources[1].material = Material::silent;
    for (int f = 0; f < 300; ++f) sources[1].labels.push_back({f, 0, false, std::nullopt, true});

    constexpr int kBins = 30;
    std::vector<double> hist(kBins, 0.0);
    double draws = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      for (const auto& r : sample_training_frames(sources, seed)) {
        if (r.active) continue;
        hist[r.frame * kBins / 300] += 1.0;
        draws += 1.0;
      }
    }
    CHECK(draws == 10000.0);
    double chi2 = 0.0;
    const double expected = draws / kBins;
    for (double h : hist) chi2 += (h - expected) * (h - expected) / expected;
    const boost::math::chi_squared dist(kBins - 1);
    const double p = boost::math::cdf(boost::math::complement(dist, chi2));
    MESSAGE("chi2 " << chi2 << " p " << p);
    CHECK(p > 0.01);
  }

  TEST_CASE("manifest round trip, validation and sampling") {
    const auto dir = temp_dir("manifest");
    const ArrayGeometry g = default_ava_array();
    save_geometry(dir / "array.txt", g);
    std::vector<CameraModel> cams(1);
    save_cameras(dir / "cams.txt", cams);

    DatasetManifest m;
    SceneSpec speech = talking_scene(2.0, 7);
    speech.trajectory = {{0.0, 5.0}};
    SceneSpec silent;
    silent.duration_s = 2.0;
    silent.rng_seed = 8;
    int i = 0;
    for (const auto* spec : {&speech, &silent}) {
      const auto scene = render_scene(*spec, g);
      const auto stem = "s" + std::to_string(i++);
      write_wav(dir / (stem + ".wav"), scene.audio);
      write_labels(dir / (stem + ".csv"), scene.labels);
      m.entries.push_back({dir / (stem + ".wav"), dir / (stem + ".csv"), dir / "array.txt",
                           dir / "cams.txt", "train", spec == &speech ? Material::speech : Material::silent});
    }
    save_manifest(dir / "manifest.json", m);
    const auto back = load_manifest(dir / "manifest.json");
    REQUIRE(back.entries.size() == 2);
    CHECK(std::filesystem::equivalent(back.entries[0].audio, m.entries[0].audio));
    CHECK(back.entries[1].material == Material::silent);
    CHECK_NOTHROW(back.validate());

    const auto refs = sample_training_frames(back, 3);
    REQUIRE_FALSE(refs.empty());
    std::size_t n_active = 0;
    for (const auto& r : refs) n_active += r.active ? 1 : 0;
    CHECK(2 * n_active == refs.size());

    // a 15-channel recording cannot pair with the 16-mic geometry
    write_wav(dir / "s0.wav", AudioBuffer(15, 96000));
    CHECK_THROWS_AS(back.validate(), InputError);
  }

  TEST_CASE("WAV round trip at float32 precision") {
    const auto dir = temp_dir("wav");
    AudioBuffer a(3, 1000);
    Rng rng = make_rng(1);
    for (double& v : a.samples) v = 0.3 * normal(rng);
    write_wav(dir / "a.wav", a);
    const auto info = wav_info(dir / "a.wav");
    CHECK(info.channels == 3);
    CHECK(info.frames == 1000);
    const auto b = read_wav(dir / "a.wav");
    REQUIRE(b.samples.size() == a.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
      CHECK(b.samples[i] == static_cast<double>(static_cast<float>(a.samples[i])));
    }
  }
}
