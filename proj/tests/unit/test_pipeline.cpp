#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "beamloc/error.hpp"
#include "beamloc/pipeline.hpp"
#include "beamloc/scenes.hpp"
#include "doctest.h"

using namespace beamloc;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

PipelineConfig tiny_config(std::uint64_t seed = 3) {
  auto c = PipelineConfig::from_json(R"({
    "simulate": {"train_speech_scenes": 2, "train_silent_scenes": 1, "test_speech_scenes": 1,
                 "test_silent_scenes": 1, "scene_seconds": 3},
    "trainer": {"epochs": 1, "batch_size": 16}})");
  c.seed = seed;
  return c;
}

/// Runs every stage once into `root`.
struct TinyRun {
  fs::path root;
  PipelineConfig config = tiny_config();

  explicit TinyRun(const fs::path& dir) : root(dir) {
    fs::remove_all(root);
    run_simulate(config, {root / "data"});
    run_design_bf(config, {root / "bf"});
    run_featurize(config, {root / "data" / "dataset.json", root / "bf" / "beamformer.bin", root / "feat"});
    run_train(config, {root / "feat", root / "model"});
    run_infer(config, {root / "model" / "model.blm", root / "feat", std::nullopt, root / "infer"});
    EvalRunOptions eo;
    eo.dataset = root / "data" / "dataset.json";
    eo.detections_dir = root / "infer" / "detections";
    eo.out_dir = root / "eval";
    run_eval(config, eo);
  }
};

const TinyRun& tiny_run() {
  static const TinyRun run(fs::temp_directory_path() / "beamloc_pipeline_a");
  return run;
}

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
  const auto log = fs::temp_directory_path() / "beamloc_cli.log";
  const std::string cmd = std::string(BEAMLOC_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (output) *output = slurp(log);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("front end names and channel counts") {
    CHECK(FrontEnd::parse("mono").channels() == 1);
    CHECK(FrontEnd::parse("stereo").channels() == 2);
    CHECK(FrontEnd::parse("raw16").channels() == 16);
    CHECK(FrontEnd::parse("beamformed3").channels() == 3);
    CHECK(FrontEnd::parse("beamformed7").channels() == 7);
    CHECK(FrontEnd::parse("beamformed15").channels() == 15);
    CHECK(FrontEnd::parse("beamformed7").look_dirs.azimuths_deg() ==
          std::vector<double>{-45, -30, -15, 0, 15, 30, 45});
    CHECK(FrontEnd::parse("beamformed3").look_dirs.azimuths_deg() == std::vector<double>{-20, 0, 20});
    const auto custom = FrontEnd::parse("beamformed", {-10, 10});
    CHECK(custom.channels() == 2);
    CHECK(custom.name() == "beamformed");
    CHECK(FrontEnd::parse("beamformed", {-20, 0, 20}).name() == "beamformed3");
    CHECK_THROWS_AS(FrontEnd::parse("quad"), InputError);
    CHECK_THROWS_AS(FrontEnd::parse("beamformed"), InputError);
    CHECK_THROWS_AS(FrontEnd::parse("mono", {0.0}), InputError);
  }

  TEST_CASE("front end processors pick the documented signals") {
    const auto geom = default_ava_array();
    AudioBuffer mics(16, 4096);
    for (std::size_t c = 0; c < 16; ++c) {
      for (double& v : mics.channel(c)) v = static_cast<double>(c);
    }
    const BeamformerSettings bf;
    const auto mono = FrontEndProcessor(FrontEnd::parse("mono"), geom, bf)(mics);
    REQUIRE(mono.channels == 1);
    CHECK(mono.channel(0)[0] == static_cast<double>(center_mic_index(geom)));
    const auto stereo = FrontEndProcessor(FrontEnd::parse("stereo"), geom, bf)(mics);
    REQUIRE(stereo.channels == 2);
    CHECK(geom.mic_positions[static_cast<std::size_t>(stereo.channel(0)[0])].x == doctest::Approx(-0.0883));
    CHECK(geom.mic_positions[static_cast<std::size_t>(stereo.channel(1)[0])].x == doctest::Approx(0.0883));
    const auto raw = FrontEndProcessor(FrontEnd::parse("raw16"), geom, bf)(mics);
    CHECK(raw.samples == mics.samples);
    const auto beams = FrontEndProcessor(FrontEnd::parse("beamformed3"), geom, bf)(mics);
    CHECK(beams.channels == 3);
    CHECK(beams.frames == mics.frames);

    auto other = design_sdb(geom, look_direction_preset(7));
    CHECK_THROWS_AS(FrontEndProcessor(FrontEnd::parse("beamformed3"), geom, bf, other), InputError);
  }

  TEST_CASE("configuration defaults, overrides and validation") {
    const PipelineConfig defaults;
    CHECK(defaults.front_end.name() == "beamformed15");
    CHECK(defaults.network.in_channels == 15);
    CHECK(defaults.trainer.epochs == 25);
    CHECK(defaults.trainer.batch_size == 64);
    CHECK(defaults.trainer.learning_rate == 2e-4);
    CHECK(defaults.beamformer.wng_min_db == -10.0);
    CHECK(defaults.eval.threshold_count == 201);

    const auto bare = PipelineConfig::from_json("{}");
    CHECK(bare.hash() == defaults.hash());
    CHECK(PipelineConfig::from_json(defaults.to_json()).to_json() == defaults.to_json());

    const auto mono = PipelineConfig::from_json(R"({"front_end": "mono", "seed": 9})");
    CHECK(mono.network.in_channels == 1);
    CHECK(mono.seed == 9);
    CHECK(mono.hash() != defaults.hash());

    const auto custom = PipelineConfig::from_json(R"({"front_end": "beamformed", "look_dirs_deg": [-30, 0, 30]})");
    CHECK(custom.front_end.channels() == 3);
    CHECK(PipelineConfig::from_json(custom.to_json()).hash() == custom.hash());

    CHECK_THROWS_AS(PipelineConfig::from_json(R"({"front_end": "mono", "network": {"in_channels": 15}})"),
                    InputError);
    CHECK_THROWS_AS(PipelineConfig::from_json(R"({"trainer": {"epoch": 3}})"), FormatError);
    CHECK_THROWS_AS(PipelineConfig::from_json(R"({"colour": 1})"), FormatError);
    CHECK_THROWS_AS(PipelineConfig::from_json(R"({"seed": "x"})"), FormatError);
    CHECK_THROWS_AS(PipelineConfig::from_json("{"), FormatError);

    PipelineConfig c;
    c.set_front_end(FrontEnd::parse("stereo"));
    CHECK(c.network.in_channels == 2);
    CHECK_NOTHROW(c.validate());
  }

  TEST_CASE("every artifact embeds the configuration hash") {
    const auto& run = tiny_run();
    const auto hash = run.config.hash();
    std::size_t checked = 0;
    for (const auto& rel : files_under(run.root)) {
      INFO(rel.string());
      CHECK(slurp(run.root / rel).find(hash) != std::string::npos);
      ++checked;
    }
    CHECK(checked > 20);
    const auto info = wav_info(run.root / "data" / "scenes" / "train_speech_00.wav");
    CHECK(info.comment.find(hash) != std::string::npos);
  }

  TEST_CASE("infer and eval refuse mismatched statistics") {
    const auto& run = tiny_run();
    const auto root = fs::temp_directory_path() / "beamloc_pipeline_mismatch";
    fs::remove_all(root);
    fs::create_directories(root / "feat");
    for (const auto& e : fs::directory_iterator(run.root / "feat")) fs::copy(e.path(), root / "feat" / e.path().filename());
    auto stats = load_stats(root / "feat" / "stats.txt");
    stats.global_std *= 1.01;
    save_stats(root / "feat" / "stats.txt", stats);

    const auto model = run.root / "model" / "model.blm";
    CHECK_THROWS_AS(run_infer(run.config, {model, root / "feat", std::nullopt, root / "infer"}), InputError);

    EvalRunOptions eo;
    eo.dataset = run.root / "data" / "dataset.json";
    eo.detections_dir = run.root / "infer" / "detections";
    eo.model = model;
    eo.stats = root / "feat" / "stats.txt";
    eo.out_dir = root / "eval";
    CHECK_THROWS_AS(run_eval(run.config, eo), InputError);
    eo.stats = run.root / "feat" / "stats.txt";
    CHECK_NOTHROW(run_eval(run.config, eo));
  }

  TEST_CASE("training refuses features of another front end") {
    const auto& run = tiny_run();
    auto mono = run.config;
    mono.set_front_end(FrontEnd::parse("mono"));
    const auto out = fs::temp_directory_path() / "beamloc_pipeline_mono_model";
    CHECK_THROWS_AS(run_train(mono, {run.root / "feat", out}), InputError);
  }

  TEST_CASE("eval on perfect detections reports AP 1 at both tolerances") {
    const auto& run = tiny_run();
    const auto labels_path = run.root / "data" / "scenes" / "test_speech_00.csv";
    const auto cams = load_cameras(run.root / "data" / "cameras.txt");
    std::vector<Detection> dets;
    for (const auto& r : ingest_pseudo_labels(labels_path, cams)) {
      dets.push_back({r.frame, r.view_id, r.x_px.value_or(0.0), r.active ? 1.0 : 0.0});
    }
    const auto root = fs::temp_directory_path() / "beamloc_pipeline_perfect";
    fs::create_directories(root);
    write_detections(root / "perfect.csv", dets);
    EvalRunOptions eo;
    eo.detections = root / "perfect.csv";
    eo.labels = labels_path;
    eo.cameras = run.root / "data" / "cameras.txt";
    eo.out_dir = root / "eval";
    MetricsReport report;
    run_eval(run.config, eo, &report);
    CHECK(report.ap_at_2deg == 1.0);
    CHECK(report.ap_at_5deg == 1.0);
    CHECK(report.cls_accuracy == 1.0);
    CHECK(slurp(root / "eval" / "report.json").find("\"ap_at_2deg\": 1.0") != std::string::npos);
  }

  TEST_CASE("re-running every subcommand gives byte-identical files") {
    const auto& a = tiny_run();
    const TinyRun b(fs::temp_directory_path() / "beamloc_pipeline_b");
    const auto files = files_under(a.root);
    REQUIRE(files == files_under(b.root));
    for (const auto& rel : files) {
      INFO(rel.string());
      CHECK(slurp(a.root / rel) == slurp(b.root / rel));
    }
  }

  TEST_CASE("a different seed changes the data") {
    const auto& a = tiny_run();
    const auto root = fs::temp_directory_path() / "beamloc_pipeline_seed";
    fs::remove_all(root);
    run_simulate(tiny_config(4), {root});
    CHECK(slurp(root / "scenes" / "train_speech_00.wav") !=
          slurp(a.root / "data" / "scenes" / "train_speech_00.wav"));
  }

  TEST_CASE("trend writes a comparison over front ends") {
    const auto& a = tiny_run();
    auto config = a.config;
    config.trend.front_ends = {"mono", "beamformed3"};
    const auto root = fs::temp_directory_path() / "beamloc_pipeline_trend";
    fs::remove_all(root);
    std::vector<TrendRow> rows;
    run_trend(config, {a.root / "data" / "dataset.json", root}, &rows);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].front_end == "mono");
    CHECK(rows[1].front_end == "beamformed3");
    CHECK(rows[2].front_end == "beamformed3+tc");
    CHECK(rows[2].smoothed);
    const auto table = slurp(root / "trend.md");
    CHECK(table.find("| mono |") != std::string::npos);
    CHECK(slurp(root / "trend.csv").find("beamformed3+tc,3,1,") != std::string::npos);
  }

  TEST_CASE("command-line exit status") {
    const auto& a = tiny_run();
    const auto out = fs::temp_directory_path() / "beamloc_cli_out";
    std::string log;
    CHECK(run_cli("show-config --front-end stereo", &log) == 0);
    CHECK(log.find("\"front_end\": \"stereo\"") != std::string::npos);

    CHECK(run_cli("train --front-end mono --features " + (a.root / "feat").string() + " --out-dir " + out.string(),
                  &log) == 1);
    CHECK(log.find("config/channel mismatch") != std::string::npos);

    CHECK(run_cli("eval --out-dir " + out.string(), &log) == 1);
    CHECK(run_cli("featurize --out-dir " + out.string() + " --dataset /nonexistent.json", &log) != 0);
    CHECK(run_cli("bogus", &log) != 0);

    // non-finite features make training fail with a diagnostic
    const auto bad = fs::temp_directory_path() / "beamloc_cli_nan";
    fs::remove_all(bad);
    fs::create_directories(bad);
    for (const char* f : {"train_index.csv", "stats.txt"}) fs::copy(a.root / "feat" / f, bad / f);
    {
      FeatureCacheReader reader(a.root / "feat" / "train.blf");
      FeatureCacheWriter writer(bad / "train.blf", reader.channels(), reader.metadata());
      FeatureStack s;
      while (reader.next(s)) {
        s.values[7] = std::nan("");
        writer.append(s);
      }
    }
    const auto cfg = bad / "config.json";
    std::ofstream(cfg) << a.config.to_json();
    CHECK(run_cli("train --config " + cfg.string() + " --features " + bad.string() + " --out-dir " +
                      (bad / "model").string(),
                  &log) == 3);
    CHECK(log.find("training failed: epoch 1") != std::string::npos);
    CHECK_FALSE(fs::exists(bad / "model" / "model.blm"));
  }
}
