#include "beamloc/network.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "beamloc/error.hpp"

namespace beamloc {

NetworkConfig NetworkConfig::wide(std::size_t in_channels) {
  NetworkConfig c;
  c.in_channels = in_channels;
  c.conv_channels = {32, 64, 128, 256, 512, 512, 512};
  return c;
}

NetworkConfig NetworkConfig::linear_head(std::size_t in_channels) {
  NetworkConfig c;
  c.in_channels = in_channels;
  c.conv_channels.clear();
  c.pool_after.clear();
  c.fc_sizes.clear();
  c.head_hidden = 0;
  return c;
}

void NetworkConfig::validate() const {
  if (in_channels == 0 || image_size == 0) throw InputError("network input must have channels and pixels");
  if (onehot_len == 0) throw InputError("one-hot length must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InputError("dropout rate must lie in [0, 1)");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw InputError("batch-norm momentum must lie in [0, 1)");
  if (!(bn_eps > 0.0)) throw InputError("batch-norm epsilon must be positive");
  for (auto c : conv_channels) {
    if (c == 0) throw InputError("conv layers need at least one output channel");
  }
  for (auto c : fc_sizes) {
    if (c == 0) throw InputError("fully connected layers need at least one unit");
  }
  const std::set<std::size_t> pools(pool_after.begin(), pool_after.end());
  if (pools.size() != pool_after.size()) throw InputError("duplicate pooling layer index");
  std::size_t size = image_size;
  for (std::size_t layer : pools) {
    if (layer < 1 || layer > conv_channels.size()) {
      throw InputError("pooling index " + std::to_string(layer) + " does not name a conv layer");
    }
    if (size % 2 != 0) throw InputError("max pooling needs an even feature map size");
    size /= 2;
  }
}

std::size_t NetworkConfig::feature_length() const {
  const std::size_t conv_out = conv_channels.empty() ? in_channels : conv_channels.back();
  return fc_sizes.empty() ? conv_out : fc_sizes.back();
}

namespace {

template <typename M>
void im2col(const M& in, std::size_t batch, std::size_t s, M& col) {
  using T = typename M::Scalar;
  const auto channels = static_cast<std::size_t>(in.cols());
  col.resize(static_cast<Eigen::Index>(batch * s * s), static_cast<Eigen::Index>(channels * 9));
  const auto n = static_cast<std::ptrdiff_t>(s);
  for (std::size_t ci = 0; ci < channels; ++ci) {
    const T* src = in.col(static_cast<Eigen::Index>(ci)).data();
    for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
      for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
        T* dst = col.col(static_cast<Eigen::Index>(ci * 9 + ky * 3 + kx)).data();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::ptrdiff_t y = 0; y < n; ++y) {
            T* drow = dst + (static_cast<std::ptrdiff_t>(b) * n + y) * n;
            const std::ptrdiff_t yy = y + ky - 1;
            if (yy < 0 || yy >= n) {
              std::fill(drow, drow + n, T(0));
              continue;
            }
            const T* srow = src + (static_cast<std::ptrdiff_t>(b) * n + yy) * n;
            const std::ptrdiff_t dx = kx - 1;
            const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -dx);
            const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n, n - dx);
            std::fill(drow, drow + lo, T(0));
            std::copy(srow + lo + dx, srow + hi + dx, drow + lo);
            std::fill(drow + hi, drow + n, T(0));
          }
        }
      }
    }
  }
}

template <typename M>
M col2im(const M& col, std::size_t batch, std::size_t s, std::size_t channels) {
  using T = typename M::Scalar;
  M out = M::Zero(static_cast<Eigen::Index>(batch * s * s), static_cast<Eigen::Index>(channels));
  const auto n = static_cast<std::ptrdiff_t>(s);
  for (std::size_t ci = 0; ci < channels; ++ci) {
    T* dst = out.col(static_cast<Eigen::Index>(ci)).data();
    for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
      for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
        const T* src = col.col(static_cast<Eigen::Index>(ci * 9 + ky * 3 + kx)).data();
        const std::ptrdiff_t dx = kx - 1;
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n, n - dx);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::ptrdiff_t y = 0; y < n; ++y) {
            const std::ptrdiff_t yy = y + ky - 1;
            if (yy < 0 || yy >= n) continue;
            const T* srow = src + (static_cast<std::ptrdiff_t>(b) * n + y) * n;
            T* drow = dst + (static_cast<std::ptrdiff_t>(b) * n + yy) * n;
            for (std::ptrdiff_t x = lo; x < hi; ++x) drow[x + dx] += srow[x];
          }
        }
      }
    }
  }
  return out;
}

template <typename M>
M max_pool(const M& in, std::size_t batch, std::size_t s, std::vector<std::int32_t>& argmax) {
  using T = typename M::Scalar;
  const std::size_t h = s / 2;
  const auto channels = static_cast<std::size_t>(in.cols());
  M out(static_cast<Eigen::Index>(batch * h * h), in.cols());
  argmax.resize(batch * h * h * channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = in.col(static_cast<Eigen::Index>(c)).data();
    T* dst = out.col(static_cast<Eigen::Index>(c)).data();
    std::int32_t* arg = argmax.data() + c * batch * h * h;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t oy = 0; oy < h; ++oy) {
        for (std::size_t ox = 0; ox < h; ++ox) {
          const std::size_t i0 = (b * s + 2 * oy) * s + 2 * ox;
          std::size_t best = i0;
          for (std::size_t cand : {i0 + 1, i0 + s, i0 + s + 1}) {
            if (src[cand] > src[best]) best = cand;
          }
          const std::size_t o = (b * h + oy) * h + ox;
          dst[o] = src[best];
          arg[o] = static_cast<std::int32_t>(best);
        }
      }
    }
  }
  return out;
}

template <typename M>
M gather_pool(const M& in, const std::vector<std::int32_t>& argmax) {
  const auto rows = static_cast<Eigen::Index>(argmax.size()) / in.cols();
  M out(rows, in.cols());
  for (Eigen::Index c = 0; c < in.cols(); ++c) {
    const auto* arg = argmax.data() + c * rows;
    for (Eigen::Index o = 0; o < rows; ++o) out(o, c) = in(arg[o], c);
  }
  return out;
}

template <typename M>
M unpool(const M& d_out, const std::vector<std::int32_t>& argmax, std::size_t in_rows) {
  M d_in = M::Zero(static_cast<Eigen::Index>(in_rows), d_out.cols());
  const auto rows = static_cast<std::size_t>(d_out.rows());
  for (Eigen::Index c = 0; c < d_out.cols(); ++c) {
    const auto* arg = argmax.data() + static_cast<std::size_t>(c) * rows;
    for (std::size_t o = 0; o < rows; ++o) d_in(arg[o], c) += d_out(static_cast<Eigen::Index>(o), c);
  }
  return d_in;
}

// Bernoulli keep decisions, four per 64-bit draw with 16-bit resolution.
class DropoutMask {
 public:
  DropoutMask(Rng& rng, double rate)
      : rng_(rng), threshold_(static_cast<std::uint32_t>(std::lround((1.0 - rate) * 65536.0))) {}
  bool keep() {
    if (left_ == 0) {
      bits_ = rng_();
      left_ = 4;
    }
    const auto u = static_cast<std::uint32_t>(bits_ & 0xffffu);
    bits_ >>= 16;
    --left_;
    return u < threshold_;
  }

 private:
  Rng& rng_;
  std::uint32_t threshold_;
  std::uint64_t bits_ = 0;
  int left_ = 0;
};

}  // namespace

template <typename T>
Network<T>::Network(NetworkConfig config) : config_(std::move(config)) {
  config_.validate();
  std::size_t size = config_.image_size;
  std::size_t channels = config_.in_channels;
  for (std::size_t i = 0; i < config_.conv_channels.size(); ++i) {
    const auto tag = std::to_string(i + 1);
    ConvState layer{};
    layer.in_ch = channels;
    layer.out_ch = config_.conv_channels[i];
    layer.size = size;
    layer.pool = std::find(config_.pool_after.begin(), config_.pool_after.end(), i + 1) != config_.pool_after.end();
    layer.weight = params_.size();
    add_param("conv" + tag + ".weight", channels * 9, layer.out_ch);
    layer.bias = params_.size();
    add_param("conv" + tag + ".bias", 1, layer.out_ch);
    layer.gamma = params_.size();
    add_param("bn" + tag + ".gamma", 1, layer.out_ch);
    layer.beta = params_.size();
    add_param("bn" + tag + ".beta", 1, layer.out_ch);
    layer.run_mean = buffers_.size();
    add_buffer("bn" + tag + ".running_mean", 1, layer.out_ch, T(0));
    layer.run_var = buffers_.size();
    add_buffer("bn" + tag + ".running_var", 1, layer.out_ch, T(1));
    convs_.push_back(std::move(layer));
    channels = config_.conv_channels[i];
    if (convs_.back().pool) size /= 2;
  }
  gap_size_ = size;

  for (std::size_t i = 0; i < config_.fc_sizes.size(); ++i) {
    const auto tag = "fc" + std::to_string(i + 1);
    DenseState layer{};
    layer.weight = params_.size();
    add_param(tag + ".weight", channels, config_.fc_sizes[i]);
    layer.bias = params_.size();
    add_param(tag + ".bias", 1, config_.fc_sizes[i]);
    layer.relu = true;
    fcs_.push_back(std::move(layer));
    channels = config_.fc_sizes[i];
  }

  std::size_t width = channels + config_.onehot_len;
  std::vector<std::size_t> head_sizes;
  if (config_.head_hidden > 0) head_sizes.push_back(config_.head_hidden);
  head_sizes.push_back(2);
  for (std::size_t i = 0; i < head_sizes.size(); ++i) {
    const auto tag = "head" + std::to_string(i + 1);
    DenseState layer{};
    layer.weight = params_.size();
    add_param(tag + ".weight", width, head_sizes[i]);
    layer.bias = params_.size();
    add_param(tag + ".bias", 1, head_sizes[i]);
    layer.relu = i + 1 < head_sizes.size();
    head_.push_back(std::move(layer));
    width = head_sizes[i];
  }
}

template <typename T>
void Network<T>::add_param(std::string name, std::size_t rows, std::size_t cols) {
  const auto r = static_cast<Eigen::Index>(rows), c = static_cast<Eigen::Index>(cols);
  params_.push_back({std::move(name), Matrix::Zero(r, c), Matrix::Zero(r, c)});
}

template <typename T>
void Network<T>::add_buffer(std::string name, std::size_t rows, std::size_t cols, T fill) {
  const auto r = static_cast<Eigen::Index>(rows), c = static_cast<Eigen::Index>(cols);
  buffers_.push_back({std::move(name), Matrix::Constant(r, c, fill), Matrix()});
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

template <typename T>
void Network<T>::initialize(std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x1417);
  auto fill_uniform = [&](Matrix& m, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(uniform(rng, -bound, bound));
  };
  for (const auto& layer : convs_) {
    fill_uniform(params_[layer.weight].value, layer.in_ch * 9);
    fill_uniform(params_[layer.bias].value, layer.in_ch * 9);
    params_[layer.gamma].value.setOnes();
    params_[layer.beta].value.setZero();
    buffers_[layer.run_mean].value.setZero();
    buffers_[layer.run_var].value.setOnes();
  }
  for (auto* group : {&fcs_, &head_}) {
    for (const auto& layer : *group) {
      const auto fan_in = static_cast<std::size_t>(params_[layer.weight].value.rows());
      fill_uniform(params_[layer.weight].value, fan_in);
      fill_uniform(params_[layer.bias].value, fan_in);
    }
  }
}

template <typename T>
void Network<T>::fill_zero() {
  for (auto& p : params_) p.value.setZero();
  for (const auto& layer : convs_) {
    buffers_[layer.run_mean].value.setZero();
    buffers_[layer.run_var].value.setOnes();
  }
}

template <typename T>
typename Network<T>::Matrix Network<T>::dense_forward(DenseState& layer, const Matrix& in) {
  layer.input = in;
  layer.pre.noalias() = in * params_[layer.weight].value;
  layer.pre.rowwise() += params_[layer.bias].value.row(0);
  if (!layer.relu) return layer.pre;
  if (!frozen_) layer.mask = (layer.pre.array() > T(0)).template cast<T>().matrix();
  return layer.pre.cwiseProduct(layer.mask);
}

template <typename T>
typename Network<T>::Matrix Network<T>::dense_backward(DenseState& layer, const Matrix& d_out,
                                                       bool need_input_grad) {
  const Matrix d_pre = layer.relu ? Matrix(d_out.cwiseProduct(layer.mask)) : d_out;
  params_[layer.weight].grad.noalias() = layer.input.transpose() * d_pre;
  params_[layer.bias].grad = d_pre.colwise().sum();
  if (!need_input_grad) return {};
  return d_pre * params_[layer.weight].value.transpose();
}

template <typename T>
typename Network<T>::Matrix Network<T>::forward(const Matrix& images, const Matrix& onehot, Mode mode, Rng* rng) {
  const std::size_t plane = config_.image_size * config_.image_size;
  batch_ = static_cast<std::size_t>(onehot.rows());
  if (batch_ == 0) throw InputError("empty batch");
  if (static_cast<std::size_t>(onehot.cols()) != config_.onehot_len) {
    throw InputError("one-hot width " + std::to_string(onehot.cols()) + " does not match " +
                     std::to_string(config_.onehot_len));
  }
  if (static_cast<std::size_t>(images.cols()) != config_.in_channels ||
      static_cast<std::size_t>(images.rows()) != batch_ * plane) {
    throw InputError("feature batch has shape " + std::to_string(images.rows()) + "x" +
                     std::to_string(images.cols()) + ", expected " + std::to_string(batch_ * plane) + "x" +
                     std::to_string(config_.in_channels));
  }
  const bool dropout = mode == Mode::train && config_.dropout > 0.0;
  if (dropout && rng == nullptr) throw InputError("training mode with dropout needs a random stream");
  mode_ = mode;

  Matrix act = images;
  const T eps = static_cast<T>(config_.bn_eps);
  const T momentum = static_cast<T>(config_.bn_momentum);
  for (auto& layer : convs_) {
    im2col(act, batch_, layer.size, layer.col);
    layer.pre.noalias() = layer.col * params_[layer.weight].value;
    layer.pre.rowwise() += params_[layer.bias].value.row(0);
    // fused ReLU and dropout; the gate is reused by the backward pass
    if (frozen_ && layer.gate.rows() != layer.pre.rows()) {
      throw InputError("frozen activation pattern belongs to a different batch shape");
    }
    if (!frozen_) {
      layer.gate.resize(layer.pre.rows(), layer.pre.cols());
      const T* pre = layer.pre.data();
      T* gate = layer.gate.data();
      const auto n = layer.pre.size();
      if (dropout) {
        DropoutMask mask(*rng, config_.dropout);
        const T scale = static_cast<T>(1.0 / (1.0 - config_.dropout));
        for (Eigen::Index i = 0; i < n; ++i) gate[i] = mask.keep() && pre[i] > T(0) ? scale : T(0);
      } else {
        for (Eigen::Index i = 0; i < n; ++i) gate[i] = pre[i] > T(0) ? T(1) : T(0);
      }
    }

    auto& run_mean = buffers_[layer.run_mean].value;
    auto& run_var = buffers_[layer.run_var].value;
    const auto& gamma = params_[layer.gamma].value;
    const auto& beta = params_[layer.beta].value;
    const Eigen::Index rows = layer.pre.rows();
    const auto n = static_cast<T>(rows);
    layer.xhat.resize(rows, layer.pre.cols());
    layer.inv_std.resize(layer.pre.cols());
    Matrix y(rows, layer.pre.cols());
    for (Eigen::Index c = 0; c < layer.pre.cols(); ++c) {
      const T* pre = layer.pre.col(c).data();
      const T* gate = layer.gate.col(c).data();
      T* xh = layer.xhat.col(c).data();
      T mean, inv;
      if (mode == Mode::train) {
        double sum = 0.0;
        for (Eigen::Index i = 0; i < rows; ++i) {
          xh[i] = pre[i] * gate[i];
          sum += xh[i];
        }
        mean = static_cast<T>(sum / static_cast<double>(rows));
        double sq = 0.0;
        for (Eigen::Index i = 0; i < rows; ++i) {
          const double d = xh[i] - mean;
          sq += d * d;
        }
        const T var = static_cast<T>(sq / static_cast<double>(rows));
        inv = T(1) / std::sqrt(var + eps);
        const T unbias = rows > 1 ? n / (n - T(1)) : T(1);
        run_mean(0, c) = momentum * run_mean(0, c) + (T(1) - momentum) * mean;
        run_var(0, c) = momentum * run_var(0, c) + (T(1) - momentum) * unbias * var;
      } else {
        for (Eigen::Index i = 0; i < rows; ++i) xh[i] = pre[i] * gate[i];
        mean = run_mean(0, c);
        inv = T(1) / std::sqrt(run_var(0, c) + eps);
      }
      layer.inv_std(c) = inv;
      T* out = y.col(c).data();
      const T g = gamma(0, c), bt = beta(0, c);
      for (Eigen::Index i = 0; i < rows; ++i) {
        xh[i] = (xh[i] - mean) * inv;
        out[i] = xh[i] * g + bt;
      }
    }
    if (!layer.pool) {
      act = std::move(y);
    } else if (frozen_) {
      act = gather_pool(y, layer.argmax);
    } else {
      act = max_pool(y, batch_, layer.size, layer.argmax);
    }
  }

  // global average pool (or per-channel image mean without conv layers)
  const std::size_t area = gap_size_ * gap_size_;
  Matrix feat(static_cast<Eigen::Index>(batch_), act.cols());
  for (std::size_t b = 0; b < batch_; ++b) {
    feat.row(static_cast<Eigen::Index>(b)) =
        act.middleRows(static_cast<Eigen::Index>(b * area), static_cast<Eigen::Index>(area)).colwise().mean();
  }
  for (auto& layer : fcs_) feat = dense_forward(layer, feat);

  Matrix h(feat.rows(), feat.cols() + onehot.cols());
  h << feat, onehot;
  for (auto& layer : head_) h = dense_forward(layer, h);
  output_ = (T(1) / (T(1) + (-h.array()).exp())).matrix();
  return output_;
}

template <typename T>
void Network<T>::backward(const Matrix& d_output) {
  if (d_output.rows() != output_.rows() || d_output.cols() != 2) {
    throw InputError("output gradient does not match the last forward pass");
  }
  Matrix d = (d_output.array() * output_.array() * (T(1) - output_.array())).matrix();
  for (std::size_t i = head_.size(); i-- > 0;) d = dense_backward(head_[i], d, true);
  Matrix d_feat = d.leftCols(d.cols() - static_cast<Eigen::Index>(config_.onehot_len));
  for (std::size_t i = fcs_.size(); i-- > 0;) d_feat = dense_backward(fcs_[i], d_feat, i > 0 || !convs_.empty());
  if (convs_.empty()) return;

  const std::size_t area = gap_size_ * gap_size_;
  Matrix d_act(static_cast<Eigen::Index>(batch_ * area), d_feat.cols());
  for (std::size_t b = 0; b < batch_; ++b) {
    d_act.middleRows(static_cast<Eigen::Index>(b * area), static_cast<Eigen::Index>(area)).rowwise() =
        d_feat.row(static_cast<Eigen::Index>(b)) / static_cast<T>(area);
  }

  for (std::size_t i = convs_.size(); i-- > 0;) {
    auto& layer = convs_[i];
    const std::size_t rows = batch_ * layer.size * layer.size;
    Matrix d_y = layer.pool ? unpool(d_act, layer.argmax, rows) : std::move(d_act);
    params_[layer.gamma].grad.resize(1, d_y.cols());
    params_[layer.beta].grad.resize(1, d_y.cols());
    // batch-norm, dropout and ReLU backward in one pass per channel
    Matrix& d_x = d_y;
    const T n = static_cast<T>(rows);
    for (Eigen::Index c = 0; c < d_x.cols(); ++c) {
      T* d = d_x.col(c).data();
      const T* xh = layer.xhat.col(c).data();
      const T* gate = layer.gate.col(c).data();
      double sum_d = 0.0, sum_dx = 0.0;
      for (std::size_t i = 0; i < rows; ++i) {
        sum_d += d[i];
        sum_dx += d[i] * xh[i];
      }
      params_[layer.gamma].grad(0, c) = static_cast<T>(sum_dx);
      params_[layer.beta].grad(0, c) = static_cast<T>(sum_d);
      const T g = params_[layer.gamma].value(0, c);
      if (mode_ == Mode::train) {
        const T k = g * layer.inv_std(c) / n;
        const T sd = static_cast<T>(sum_d), sdx = static_cast<T>(sum_dx);
        for (std::size_t i = 0; i < rows; ++i) d[i] = gate[i] * k * (n * d[i] - sd - xh[i] * sdx);
      } else {
        const T k = g * layer.inv_std(c);
        for (std::size_t i = 0; i < rows; ++i) d[i] = gate[i] * k * d[i];
      }
    }
    params_[layer.weight].grad.noalias() = layer.col.transpose() * d_x;
    params_[layer.bias].grad = d_x.colwise().sum();
    if (i > 0) {
      const Matrix d_col = d_x * params_[layer.weight].value.transpose();
      d_act = col2im(d_col, batch_, layer.size, layer.in_ch);
    }
  }
}

template class Network<float>;
template class Network<double>;

}  // namespace beamloc
