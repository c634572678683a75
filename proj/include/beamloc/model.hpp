#pragma once

// Student model: position/confidence targets and loss, a compact feature
// bank for training sets, the deterministic training loop, gradient
// checking and checkpoint files.

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "beamloc/features.hpp"
#include "beamloc/network.hpp"

namespace beamloc {

struct TrainSample {
  FeatureStack features;
  int view_id = 0;
  bool active = false;
  /// Horizontal position normalized by the image width; used when active.
  double x = 0.0;
};

struct Prediction {
  double x_hat = 0.5;
  double c_hat = 0.5;
};

struct TrainerConfig {
  int epochs = 25;
  std::size_t batch_size = 64;
  double learning_rate = 2e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t rng_seed = 0;

  void validate() const;
  bool operator==(const TrainerConfig&) const = default;
};

/// 1 - |x - x_hat| for an active source, 0 otherwise.
double target_confidence(bool active, double x, double x_hat);

struct LossTerms {
  double position = 0.0;
  double confidence = 0.0;
  double total() const { return position + confidence; }
};

/// Squared position error (active only) plus squared confidence error
/// against target_confidence.
LossTerms loss(const Prediction& pred, bool active, double x);
inline LossTerms loss(const Prediction& pred, const TrainSample& sample) {
  return loss(pred, sample.active, sample.x);
}

/// One-hot row for a camera view; throws InputError for ids outside [0, len).
std::vector<double> view_onehot(int view_id, std::size_t len);

/// Feature images stored at half precision, shared between samples.
class FeatureBank {
 public:
  explicit FeatureBank(std::size_t channels = 0) : channels_(channels) {}

  std::size_t channels() const { return channels_; }
  std::size_t size() const { return channels_ == 0 ? 0 : data_.size() / (channels_ * FeatureStack::plane()); }
  std::size_t add(const FeatureStack& stack);
  void reserve(std::size_t images) { data_.reserve(images * channels_ * FeatureStack::plane()); }
  FeatureStack get(std::size_t index) const;

  /// Writes image `index` into rows [row, row + 4096) of a planar batch.
  template <typename T>
  void copy_to(std::size_t index, Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& batch, Eigen::Index row) const {
    const std::size_t plane = FeatureStack::plane();
    const Eigen::half* src = data_.data() + index * channels_ * plane;
    for (std::size_t c = 0; c < channels_; ++c) {
      T* dst = batch.col(static_cast<Eigen::Index>(c)).data() + row;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<T>(static_cast<float>(src[c * plane + i]));
    }
  }

 private:
  std::size_t channels_;
  std::vector<Eigen::half> data_;
};

struct SampleRef {
  std::size_t image = 0;
  int view_id = 0;
  bool active = false;
  double x = 0.0;
};

struct TrainingSet {
  FeatureBank bank;
  std::vector<SampleRef> samples;

  static TrainingSet from_samples(std::span<const TrainSample> samples);
};

/// Float network plus the identifiers of the data it was trained on.
class Model {
 public:
  explicit Model(const NetworkConfig& config) : net_(config) {}

  const NetworkConfig& config() const { return net_.config(); }
  Network<float>& network() { return net_; }
  const Network<float>& network() const { return net_; }

  /// Hash of the normalization statistics the inputs must be scaled with.
  std::string stats_hash;
  /// Hash of the pipeline configuration that produced the model.
  std::string config_hash;

  /// Eval-mode predictions in batches. Not thread-safe: the network keeps
  /// its activations, so use one Model per thread.
  std::vector<Prediction> predict(const FeatureBank& bank, std::span<const SampleRef> refs,
                                  std::size_t batch_size = 64);
  Prediction predict(const FeatureStack& features, int view_id);

 private:
  Network<float> net_;
};

struct TrainResult {
  Model model;
  /// Mean per-sample loss of every epoch.
  std::vector<double> loss_history;
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Adam on shuffled mini-batches; bit-identical for a fixed seed. The
/// confidence target is computed from the current position estimate and
/// held constant in the backward pass. Throws TrainingError on a
/// non-finite loss.
TrainResult train(const TrainingSet& data, const NetworkConfig& net_config, const TrainerConfig& config,
                  const EpochCallback& on_epoch = {});
TrainResult train(std::span<const TrainSample> samples, const NetworkConfig& net_config,
                  const TrainerConfig& config, const EpochCallback& on_epoch = {});

struct GradientCheckOptions {
  std::size_t parameters = 200;
  double step = 1e-4;
  std::uint64_t seed = 0;
  /// Hold ReLU gates and max-pool switches at the base point while
  /// differencing. Without this, a step of 1e-4 routinely crosses ReLU
  /// kinks in conv layers with thousands of activations.
  bool freeze_activations = true;
};

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t checked = 0;
  bool all_finite = true;
};

/// Central finite differences against backprop on randomly chosen entries
/// (every tensor at least once), with batch-norm on its running statistics
/// and dropout off. Relative error is |a - n| / max(|a|, |n|, 1e-7).
GradientCheckResult gradient_check(Network<double>& net, std::span<const TrainSample> batch,
                                   const GradientCheckOptions& options = {});

// Checkpoint: "BLMODEL1" magic, u32 version, JSON metadata string, u32
// tensor count, then per tensor name, u32 rows, u32 cols, float32 values
// (column-major). Parameters precede batch-norm buffers.
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

/// "epoch,mean_loss" CSV with 1-based epochs, optionally preceded by one '#'
/// comment line.
void write_loss_history(const std::filesystem::path& path, std::span<const double> history,
                        const std::string& comment = {});

std::string network_config_json(const NetworkConfig& config);
NetworkConfig network_config_from_json(const std::string& text);

}  // namespace beamloc
