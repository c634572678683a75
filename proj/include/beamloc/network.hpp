#pragma once

// Convolutional student network: a stack of 3x3 conv blocks over the
// log-mel image, fully connected reduction, concatenation with the camera
// view one-hot and a two-output sigmoid head. Templated on the scalar type so
// training can run in float and gradient checks in double.

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "beamloc/random.hpp"

namespace beamloc {

struct NetworkConfig {
  std::size_t in_channels = 15;
  std::size_t image_size = 64;
  /// Output channels of each 3x3 conv block.
  std::vector<std::size_t> conv_channels = {8, 16, 16, 32, 32, 64, 512};
  /// 1-based conv layers followed by a stride-2 max pool.
  std::vector<std::size_t> pool_after = {1, 2, 5, 6};
  std::vector<std::size_t> fc_sizes = {128, 64, 32, 16};
  /// Width of the hidden head layer; 0 gives a single linear head layer.
  std::size_t head_hidden = 16;
  std::size_t onehot_len = 11;
  double dropout = 0.2;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;

  /// The wide schedule in->32->64->128->256->512->512->512.
  static NetworkConfig wide(std::size_t in_channels);
  /// No conv or FC layers: per-channel image means + one-hot into one
  /// linear layer and the sigmoid.
  static NetworkConfig linear_head(std::size_t in_channels);

  /// Throws InputError when the layer plan is inconsistent.
  void validate() const;
  std::size_t feature_length() const;
  bool operator==(const NetworkConfig&) const = default;
};

enum class Mode { train, eval };

/// Named parameter or buffer tensor with its gradient.
template <typename T>
struct Tensor {
  using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  std::string name;
  Matrix value;
  Matrix grad;
};

template <typename T>
class Network {
 public:
  using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

  explicit Network(NetworkConfig config);

  const NetworkConfig& config() const { return config_; }
  std::vector<Tensor<T>>& parameters() { return params_; }
  const std::vector<Tensor<T>>& parameters() const { return params_; }
  /// Batch-norm running statistics (not learned).
  std::vector<Tensor<T>>& buffers() { return buffers_; }
  const std::vector<Tensor<T>>& buffers() const { return buffers_; }
  std::size_t parameter_count() const;

  /// Uniform +-1/sqrt(fan_in) weights and biases; BN scale 1, shift 0.
  void initialize(std::uint64_t seed);
  void fill_zero();

  /// images: [batch * size * size, in_channels], one plane per column,
  /// samples stacked along rows (row = (b * size + mel) * size + time).
  /// onehot: [batch, onehot_len]. Returns [batch, 2] sigmoid outputs
  /// (position, confidence). `rng` drives dropout in train mode.
  Matrix forward(const Matrix& images, const Matrix& onehot, Mode mode, Rng* rng = nullptr);

  /// Gradient of the loss w.r.t. the last forward's outputs. Overwrites
  /// every parameter gradient.
  void backward(const Matrix& d_output);

  /// While frozen, forward passes reuse the ReLU gates and pooling
  /// switches of the last unfrozen pass, so the output is a smooth function
  /// of the parameters (used for finite-difference checks).
  void freeze_activation_pattern(bool frozen) { frozen_ = frozen; }

  template <typename U>
  void copy_from(const Network<U>& other) {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = other.parameters()[i].value.template cast<T>();
    for (std::size_t i = 0; i < buffers_.size(); ++i) buffers_[i].value = other.buffers()[i].value.template cast<T>();
  }

 private:
  struct ConvState {
    std::size_t weight, bias, gamma, beta, run_mean, run_var;
    std::size_t in_ch, out_ch, size;
    bool pool;
    Matrix col, pre, gate, xhat;
    RowVector inv_std;
    std::vector<std::int32_t> argmax;
  };
  struct DenseState {
    std::size_t weight, bias;
    bool relu;
    Matrix input, pre, mask;
  };

  void add_param(std::string name, std::size_t rows, std::size_t cols);
  void add_buffer(std::string name, std::size_t rows, std::size_t cols, T fill);
  Matrix dense_forward(DenseState& layer, const Matrix& in);
  Matrix dense_backward(DenseState& layer, const Matrix& d_out, bool need_input_grad);

  NetworkConfig config_;
  std::vector<Tensor<T>> params_;
  std::vector<Tensor<T>> buffers_;
  std::vector<ConvState> convs_;
  std::vector<DenseState> fcs_;
  std::vector<DenseState> head_;
  std::size_t batch_ = 0;
  std::size_t gap_size_ = 0;
  Mode mode_ = Mode::eval;
  bool frozen_ = false;
  Matrix output_;
};

extern template class Network<float>;
extern template class Network<double>;

}  // namespace beamloc
