#include "beamloc/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "beamloc/binio.hpp"
#include "beamloc/error.hpp"
#include "json.hpp"

namespace beamloc {
namespace {

constexpr char kCheckpointMagic[9] = "BLMODEL1";
constexpr std::uint32_t kCheckpointVersion = 1;

using nlohmann::json;

json to_json_value(const NetworkConfig& c) {
  return json{{"in_channels", c.in_channels},     {"image_size", c.image_size},   {"conv_channels", c.conv_channels},
              {"pool_after", c.pool_after},       {"fc_sizes", c.fc_sizes},       {"head_hidden", c.head_hidden},
              {"onehot_len", c.onehot_len},       {"dropout", c.dropout},         {"bn_momentum", c.bn_momentum},
              {"bn_eps", c.bn_eps}};
}

NetworkConfig from_json_value(const json& j) {
  if (!j.is_object()) throw FormatError("network configuration must be a JSON object");
  NetworkConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "in_channels") c.in_channels = value.get<std::size_t>();
    else if (key == "image_size") c.image_size = value.get<std::size_t>();
    else if (key == "conv_channels") c.conv_channels = value.get<std::vector<std::size_t>>();
    else if (key == "pool_after") c.pool_after = value.get<std::vector<std::size_t>>();
    else if (key == "fc_sizes") c.fc_sizes = value.get<std::vector<std::size_t>>();
    else if (key == "head_hidden") c.head_hidden = value.get<std::size_t>();
    else if (key == "onehot_len") c.onehot_len = value.get<std::size_t>();
    else if (key == "dropout") c.dropout = value.get<double>();
    else if (key == "bn_momentum") c.bn_momentum = value.get<double>();
    else if (key == "bn_eps") c.bn_eps = value.get<double>();
    else throw FormatError("unknown network setting '" + key + "'");
  }
  return c;
}

template <typename T>
void fill_batch(const std::vector<const TrainSample*>& samples, const NetworkConfig& config,
                Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& images,
                Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& onehot) {
  const std::size_t plane = FeatureStack::plane();
  images.resize(static_cast<Eigen::Index>(samples.size() * plane), static_cast<Eigen::Index>(config.in_channels));
  onehot.setZero(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(config.onehot_len));
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& s = *samples[b];
    if (s.features.channels != config.in_channels) {
      throw InputError("sample has " + std::to_string(s.features.channels) + " channels, network expects " +
                       std::to_string(config.in_channels));
    }
    for (std::size_t c = 0; c < config.in_channels; ++c) {
      const auto src = s.features.channel(c);
      T* dst = images.col(static_cast<Eigen::Index>(c)).data() + b * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<T>(src[i]);
    }
    const auto row = view_onehot(s.view_id, config.onehot_len);
    for (std::size_t k = 0; k < row.size(); ++k) onehot(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k)) = row[k];
  }
}

void check_sample(int view_id, bool active, double x, std::size_t onehot_len) {
  if (view_id < 0 || static_cast<std::size_t>(view_id) >= onehot_len) {
    throw InputError("view id " + std::to_string(view_id) + " outside the one-hot range");
  }
  if (active && !(x >= 0.0 && x <= 1.0)) throw InputError("active sample position must lie in [0, 1]");
}

}  // namespace

void TrainerConfig::validate() const {
  if (epochs <= 0) throw InputError("epochs must be positive");
  if (batch_size == 0) throw InputError("batch size must be positive");
  if (!(learning_rate > 0.0)) throw InputError("learning rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw InputError("Adam decay rates must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw InputError("Adam epsilon must be positive");
}

double target_confidence(bool active, double x, double x_hat) { return active ? 1.0 - std::abs(x - x_hat) : 0.0; }

LossTerms loss(const Prediction& pred, bool active, double x) {
  LossTerms terms;
  if (active) terms.position = (x - pred.x_hat) * (x - pred.x_hat);
  const double c = target_confidence(active, x, pred.x_hat);
  terms.confidence = (c - pred.c_hat) * (c - pred.c_hat);
  return terms;
}

std::vector<double> view_onehot(int view_id, std::size_t len) {
  if (view_id < 0 || static_cast<std::size_t>(view_id) >= len) {
    throw InputError("view id " + std::to_string(view_id) + " outside [0, " + std::to_string(len) + ")");
  }
  std::vector<double> row(len, 0.0);
  row[static_cast<std::size_t>(view_id)] = 1.0;
  return row;
}

std::size_t FeatureBank::add(const FeatureStack& stack) {
  if (channels_ == 0) channels_ = stack.channels;
  if (stack.channels != channels_) {
    throw InputError("feature bank holds " + std::to_string(channels_) + "-channel images, got " +
                     std::to_string(stack.channels));
  }
  const std::size_t index = size();
  for (double v : stack.values) data_.push_back(static_cast<Eigen::half>(static_cast<float>(v)));
  return index;
}

FeatureStack FeatureBank::get(std::size_t index) const {
  if (index >= size()) throw InputError("feature bank index out of range");
  FeatureStack out(channels_);
  const Eigen::half* src = data_.data() + index * out.values.size();
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = static_cast<float>(src[i]);
  return out;
}

TrainingSet TrainingSet::from_samples(std::span<const TrainSample> samples) {
  TrainingSet set;
  for (const auto& s : samples) {
    set.samples.push_back({set.bank.add(s.features), s.view_id, s.active, s.x});
  }
  return set;
}

std::vector<Prediction> Model::predict(const FeatureBank& bank, std::span<const SampleRef> refs,
                                       std::size_t batch_size) {
  if (batch_size == 0) throw InputError("batch size must be positive");
  if (!refs.empty() && bank.channels() != config().in_channels) {
    throw InputError("features have " + std::to_string(bank.channels()) + " channels, model expects " +
                     std::to_string(config().in_channels));
  }
  std::vector<Prediction> out;
  out.reserve(refs.size());
  Network<float>::Matrix images, onehot;
  const auto plane = static_cast<Eigen::Index>(FeatureStack::plane());
  for (std::size_t start = 0; start < refs.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, refs.size() - start);
    images.resize(static_cast<Eigen::Index>(n) * plane, static_cast<Eigen::Index>(bank.channels()));
    onehot.setZero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(config().onehot_len));
    for (std::size_t b = 0; b < n; ++b) {
      const auto& r = refs[start + b];
      check_sample(r.view_id, false, 0.0, config().onehot_len);
      bank.copy_to(r.image, images, static_cast<Eigen::Index>(b) * plane);
      onehot(static_cast<Eigen::Index>(b), r.view_id) = 1.0f;
    }
    const auto y = net_.forward(images, onehot, Mode::eval);
    for (Eigen::Index b = 0; b < y.rows(); ++b) out.push_back({y(b, 0), y(b, 1)});
  }
  return out;
}

Prediction Model::predict(const FeatureStack& features, int view_id) {
  FeatureBank bank(features.channels);
  bank.add(features);
  const SampleRef ref{0, view_id, false, 0.0};
  return predict(bank, std::span<const SampleRef>(&ref, 1)).front();
}

TrainResult train(const TrainingSet& data, const NetworkConfig& net_config, const TrainerConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  net_config.validate();
  if (data.samples.empty()) throw InputError("training set is empty");
  if (data.bank.channels() != net_config.in_channels) {
    throw InputError("training features have " + std::to_string(data.bank.channels()) +
                     " channels, network expects " + std::to_string(net_config.in_channels));
  }
  for (const auto& s : data.samples) {
    check_sample(s.view_id, s.active, s.x, net_config.onehot_len);
    if (s.image >= data.bank.size()) throw InputError("sample references a missing feature image");
  }
#if defined(__GLIBC__)
  // batches reallocate large activation buffers; keep them off mmap
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif

  TrainResult result{Model(net_config), {}};
  auto& net = result.model.network();
  net.initialize(config.rng_seed);
  Rng order_rng = make_rng(config.rng_seed, 1);
  Rng dropout_rng = make_rng(config.rng_seed, 2);

  using Matrix = Network<float>::Matrix;
  std::vector<Matrix> first_moment, second_moment;
  for (const auto& p : net.parameters()) {
    first_moment.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    second_moment.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }

  const std::size_t n = data.samples.size();
  const auto plane = static_cast<Eigen::Index>(FeatureStack::plane());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Matrix images, onehot, grad;
  long step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle(std::span<std::size_t>(order), order_rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t b_n = std::min(config.batch_size, n - start);
      images.resize(static_cast<Eigen::Index>(b_n) * plane, static_cast<Eigen::Index>(net_config.in_channels));
      onehot.setZero(static_cast<Eigen::Index>(b_n), static_cast<Eigen::Index>(net_config.onehot_len));
      for (std::size_t b = 0; b < b_n; ++b) {
        const auto& s = data.samples[order[start + b]];
        data.bank.copy_to(s.image, images, static_cast<Eigen::Index>(b) * plane);
        onehot(static_cast<Eigen::Index>(b), s.view_id) = 1.0f;
      }
      const Matrix y = net.forward(images, onehot, Mode::train, &dropout_rng);
      grad.resize(y.rows(), 2);
      double batch_loss = 0.0;
      const double scale = 2.0 / static_cast<double>(b_n);
      for (std::size_t b = 0; b < b_n; ++b) {
        const auto& s = data.samples[order[start + b]];
        const auto i = static_cast<Eigen::Index>(b);
        const Prediction p{y(i, 0), y(i, 1)};
        batch_loss += loss(p, s.active, s.x).total();
        const double target = target_confidence(s.active, s.x, p.x_hat);
        grad(i, 0) = s.active ? static_cast<float>(scale * (p.x_hat - s.x)) : 0.0f;
        grad(i, 1) = static_cast<float>(scale * (p.c_hat - target));
      }
      if (!std::isfinite(batch_loss)) throw TrainingError(epoch, "loss became non-finite");
      total += batch_loss;
      net.backward(grad);

      ++step;
      const double lr = config.learning_rate * std::sqrt(1.0 - std::pow(config.adam_beta2, step)) /
                        (1.0 - std::pow(config.adam_beta1, step));
      const auto b1 = static_cast<float>(config.adam_beta1), b2 = static_cast<float>(config.adam_beta2);
      const auto eps = static_cast<float>(config.adam_eps);
      auto& params = net.parameters();
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto& m = first_moment[k];
        auto& v = second_moment[k];
        const auto& g = params[k].grad;
        m = b1 * m + (1.0f - b1) * g;
        v = b2 * v + (1.0f - b2) * g.cwiseAbs2();
        params[k].value.array() -= static_cast<float>(lr) * m.array() / (v.array().sqrt() + eps);
      }
    }
    const double mean = total / static_cast<double>(n);
    if (!std::isfinite(mean)) throw TrainingError(epoch, "loss became non-finite");
    result.loss_history.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  return result;
}

TrainResult train(std::span<const TrainSample> samples, const NetworkConfig& net_config, const TrainerConfig& config,
                  const EpochCallback& on_epoch) {
  if (samples.empty()) throw InputError("training set is empty");
  return train(TrainingSet::from_samples(samples), net_config, config, on_epoch);
}

GradientCheckResult gradient_check(Network<double>& net, std::span<const TrainSample> batch,
                                   const GradientCheckOptions& options) {
  if (batch.empty()) throw InputError("gradient check needs at least one sample");
  if (!(options.step > 0.0)) throw InputError("finite-difference step must be positive");
  const auto& config = net.config();
  std::vector<const TrainSample*> ptrs;
  for (const auto& s : batch) {
    check_sample(s.view_id, s.active, s.x, config.onehot_len);
    ptrs.push_back(&s);
  }
  Network<double>::Matrix images, onehot;
  fill_batch(ptrs, config, images, onehot);

  const auto b_n = static_cast<double>(batch.size());
  const auto base = net.forward(images, onehot, Mode::eval);
  std::vector<double> targets;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    targets.push_back(target_confidence(batch[b].active, batch[b].x, base(static_cast<Eigen::Index>(b), 0)));
  }
  // the confidence target is frozen at the base point, as in training
  auto objective = [&] {
    const auto y = net.forward(images, onehot, Mode::eval);
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto i = static_cast<Eigen::Index>(b);
      if (batch[b].active) total += (batch[b].x - y(i, 0)) * (batch[b].x - y(i, 0));
      total += (targets[b] - y(i, 1)) * (targets[b] - y(i, 1));
    }
    return total / b_n;
  };

  Network<double>::Matrix grad(base.rows(), 2);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto i = static_cast<Eigen::Index>(b);
    grad(i, 0) = batch[b].active ? 2.0 * (base(i, 0) - batch[b].x) / b_n : 0.0;
    grad(i, 1) = 2.0 * (base(i, 1) - targets[b]) / b_n;
  }
  net.backward(grad);
  auto& params = net.parameters();
  std::vector<Network<double>::Matrix> analytic;
  for (const auto& p : params) analytic.push_back(p.grad);

  Rng rng = make_rng(options.seed, 0x6c);
  std::vector<std::pair<std::size_t, Eigen::Index>> picks;
  for (std::size_t k = 0; k < params.size(); ++k) {
    picks.emplace_back(k, static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(params[k].value.size()))));
  }
  while (picks.size() < options.parameters) {
    const std::size_t k = uniform_index(rng, params.size());
    picks.emplace_back(k, static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(params[k].value.size()))));
  }

  struct PatternGuard {
    Network<double>& net;
    ~PatternGuard() { net.freeze_activation_pattern(false); }
  } guard{net};
  net.freeze_activation_pattern(options.freeze_activations);

  GradientCheckResult result;
  for (const auto& [k, idx] : picks) {
    double& value = params[k].value.data()[idx];
    const double original = value;
    value = original + options.step;
    const double up = objective();
    value = original - options.step;
    const double down = objective();
    value = original;
    const double numeric = (up - down) / (2.0 * options.step);
    const double a = analytic[k].data()[idx];
    if (!std::isfinite(a) || !std::isfinite(numeric)) result.all_finite = false;
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-7});
    if (!(rel <= result.max_relative_error)) {
      result.max_relative_error = rel;
      result.worst_parameter = params[k].name + "[" + std::to_string(idx) + "]";
    }
    ++result.checked;
  }
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  const json meta{{"network", to_json_value(model.config())},
                  {"stats_hash", model.stats_hash},
                  {"config_hash", model.config_hash}};
  out.write(kCheckpointMagic, 8);
  binio::write<std::uint32_t>(out, kCheckpointVersion);
  binio::write_string(out, meta.dump());
  const auto& net = model.network();
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(net.parameters().size() + net.buffers().size()));
  for (const auto* group : {&net.parameters(), &net.buffers()}) {
    for (const auto& t : *group) {
      binio::write_string(out, t.name);
      binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rows()));
      binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.cols()));
      for (Eigen::Index i = 0; i < t.value.size(); ++i) binio::write<float>(out, t.value.data()[i]);
    }
  }
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  binio::expect_magic(in, kCheckpointMagic, "model checkpoint");
  const auto version = binio::read<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  json meta;
  try {
    meta = json::parse(binio::read_string(in));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  Model model(from_json_value(meta.at("network")));
  model.stats_hash = meta.value("stats_hash", "");
  model.config_hash = meta.value("config_hash", "");
  auto& net = model.network();
  const auto count = binio::read<std::uint32_t>(in);
  if (count != net.parameters().size() + net.buffers().size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, network needs " +
                      std::to_string(net.parameters().size() + net.buffers().size()));
  }
  for (auto* group : {&net.parameters(), &net.buffers()}) {
    for (auto& t : *group) {
      const auto name = binio::read_string(in);
      const auto rows = binio::read<std::uint32_t>(in);
      const auto cols = binio::read<std::uint32_t>(in);
      if (name != t.name || rows != t.value.rows() || cols != t.value.cols()) {
        throw FormatError("checkpoint tensor '" + name + "' does not match network tensor '" + t.name + "'");
      }
      for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = binio::read<float>(in);
    }
  }
  return model;
}

void write_loss_history(const std::filesystem::path& path, std::span<const double> history,
                        const std::string& comment) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "epoch,mean_loss\n";
  char buf[64];
  for (std::size_t i = 0; i < history.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i + 1, history[i]);
    out << buf;
  }
}

std::string network_config_json(const NetworkConfig& config) { return to_json_value(config).dump(); }

NetworkConfig network_config_from_json(const std::string& text) {
  try {
    return from_json_value(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("network configuration: ") + e.what());
  }
}

}  // namespace beamloc
