// beamloc: command-line driver for the localization pipeline.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "beamloc/error.hpp"
#include "beamloc/pipeline.hpp"

namespace fs = std::filesystem;
using namespace beamloc;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> front_end;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& common, bool needs_out_dir = true) {
  cmd->add_option("--config", common.config, "Pipeline configuration (JSON); defaults apply to missing keys")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", common.seed, "Override the configuration seed");
  cmd->add_option("--front-end", common.front_end,
                  "mono, stereo, raw16, beamformed3, beamformed7 or beamformed15");
  auto* out = cmd->add_option("--out-dir", common.out_dir, "Directory for artifacts and the run manifest");
  if (needs_out_dir) out->required();
}

PipelineConfig resolve_config(const Common& common) {
  PipelineConfig config = common.config.empty() ? PipelineConfig{} : load_pipeline_config(common.config);
  if (common.seed) config.seed = *common.seed;
  if (common.front_end) config.set_front_end(FrontEnd::parse(*common.front_end));
  config.validate();
  return config;
}

void log_line(const std::string& msg) { std::cerr << "beamloc: " << msg << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sound source localization from microphone-array audio"};
  app.require_subcommand(1);

  Common common;
  std::string dataset, weights, features, model, detections_dir, detections, labels, cameras, stats;
  std::optional<double> smooth, tolerance_deg;

  auto* show = app.add_subcommand("show-config", "Print the effective configuration with every default");
  add_common(show, common, false);

  auto* design = app.add_subcommand("design-bf", "Design superdirective beamformer weights");
  add_common(design, common);

  auto* simulate = app.add_subcommand("simulate", "Render the synthetic benchmark (audio, labels, manifest)");
  add_common(simulate, common);

  auto* featurize = app.add_subcommand("featurize", "Compute feature caches and normalization statistics");
  add_common(featurize, common);
  featurize->add_option("--dataset", dataset, "Dataset manifest")->required()->check(CLI::ExistingFile);
  featurize->add_option("--weights", weights, "Beamformer weight file (designed on the fly if omitted)")
      ->check(CLI::ExistingFile);

  auto* train = app.add_subcommand("train", "Train the network on a feature directory");
  add_common(train, common);
  train->add_option("--features", features, "Output directory of featurize")->required()->check(CLI::ExistingDirectory);

  auto* infer = app.add_subcommand("infer", "Write per-scene detections for the test features");
  add_common(infer, common);
  infer->add_option("--model", model, "Checkpoint written by train")->required()->check(CLI::ExistingFile);
  infer->add_option("--features", features, "Output directory of featurize")->required()->check(CLI::ExistingDirectory);
  infer->add_option("--smooth", smooth, "Temporal Gaussian smoothing, sigma in frames");

  auto* eval = app.add_subcommand("eval", "Score detections against labels");
  add_common(eval, common);
  eval->add_option("--dataset", dataset, "Dataset manifest (test split is pooled)")->check(CLI::ExistingFile);
  eval->add_option("--detections-dir", detections_dir, "Directory of per-scene detection files")
      ->check(CLI::ExistingDirectory);
  eval->add_option("--detections", detections, "Single detections CSV")->check(CLI::ExistingFile);
  eval->add_option("--labels", labels, "Label CSV for --detections")->check(CLI::ExistingFile);
  eval->add_option("--cameras", cameras, "Camera file for --detections")->check(CLI::ExistingFile);
  eval->add_option("--model", model, "Checkpoint to cross-check against --stats and the detections")
      ->check(CLI::ExistingFile);
  eval->add_option("--stats", stats, "Normalization statistics to cross-check")->check(CLI::ExistingFile);
  eval->add_option("--tolerance-deg", tolerance_deg, "Extra localization tolerance (2 and 5 are always reported)");

  auto* trend = app.add_subcommand("trend", "Compare front ends on one benchmark");
  add_common(trend, common);
  trend->add_option("--dataset", dataset, "Existing benchmark; simulated if omitted")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    PipelineConfig config = resolve_config(common);
    const fs::path out_dir = common.out_dir;
    auto opt_path = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<fs::path>(s); };

    if (*show) {
      std::cout << config.to_json();
    } else if (*design) {
      run_design_bf(config, {out_dir}, log_line);
    } else if (*simulate) {
      run_simulate(config, {out_dir}, log_line);
    } else if (*featurize) {
      run_featurize(config, {dataset, opt_path(weights), out_dir}, log_line);
    } else if (*train) {
      run_train(config, {features, out_dir}, log_line);
    } else if (*infer) {
      if (smooth && !(*smooth > 0.0)) throw InputError("--smooth needs a positive sigma");
      run_infer(config, {model, features, smooth, out_dir}, log_line);
    } else if (*eval) {
      if (tolerance_deg) {
        config.eval.tolerance_deg = tolerance_deg;
        config.validate();
      }
      EvalRunOptions o;
      o.dataset = opt_path(dataset);
      o.detections_dir = opt_path(detections_dir);
      o.detections = opt_path(detections);
      o.labels = opt_path(labels);
      o.cameras = opt_path(cameras);
      o.model = opt_path(model);
      o.stats = opt_path(stats);
      o.out_dir = out_dir;
      run_eval(config, o, nullptr, log_line);
    } else if (*trend) {
      run_trend(config, {opt_path(dataset), out_dir}, nullptr, log_line);
    }
  } catch (const TrainingError& e) {
    std::cerr << "beamloc: training failed: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "beamloc: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
