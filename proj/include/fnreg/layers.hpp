#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fnreg/error.hpp"
#include "fnreg/rng.hpp"
#include "fnreg/tensor.hpp"

namespace fnreg {

enum class Mode { Train, Test };

enum class LayerKind { Conv2D, MaxPool2D, FullyConnected, ReLU, Dropout, SoftmaxXEnt };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::MaxPool2D: return "MaxPool2D";
    case LayerKind::FullyConnected: return "FullyConnected";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::Dropout: return "Dropout";
    case LayerKind::SoftmaxXEnt: return "SoftmaxXEnt";
  }
  return "?";
}

/// A trainable tensor. Layers hold parameters through shared pointers so that
/// a loss-stripped network aliases the training network's weights.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool is_bias = false;
};

template <typename T>
using ParamPtr = std::shared_ptr<Parameter<T>>;

/// Per-layer state recorded by forward and consumed by backward.
template <typename T>
struct LayerCache {
  Buffer<T> scratch;                 // dropout mask, loss gradient
  std::vector<std::uint32_t> index;  // max-pool argmax
  double loss = 0.0;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using RowVectorMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;
template <typename T>
using ConstRowVectorMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

}  // namespace detail

/// Result of a softmax cross-entropy evaluation over a batch.
template <typename T>
struct SoftmaxXEntResult {
  double loss = 0.0;  // mean over the batch
  Tensor<T> grad;     // d loss / d logits, same shape as logits
};

/// Mean negative log-likelihood of `labels` under softmax(logits), with its
/// gradient (softmax - onehot) / batch.
template <typename T>
SoftmaxXEntResult<T> softmax_xent(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax_xent expects [batch x classes] logits, got " + to_string(logits.shape()));
  }
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  }
  SoftmaxXEntResult<T> result{0.0, Tensor<T>(logits.shape())};
  std::vector<double> prob(classes);
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ValueError("label " + std::to_string(label) + " out of range [0, " +
                       std::to_string(classes) + ")");
    }
    const auto row = logits.sample(b);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (T v : row) max_logit = std::max(max_logit, static_cast<double>(v));
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      prob[c] = std::exp(static_cast<double>(row[c]) - max_logit);
      denom += prob[c];
    }
    result.loss += std::log(denom) - (static_cast<double>(row[static_cast<std::size_t>(label)]) - max_logit);
    auto grad = result.grad.sample(b);
    for (std::size_t c = 0; c < classes; ++c) {
      const double onehot = static_cast<std::size_t>(label) == c ? 1.0 : 0.0;
      grad[c] = static_cast<T>((prob[c] / denom - onehot) / static_cast<double>(batch));
    }
  }
  result.loss /= static_cast<double>(batch);
  return result;
}

/// One stage of a network. Layers are immutable apart from their parameter
/// tensors; activations live outside the layer so a layer can be shared by
/// several networks.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;

  /// Per-sample output shape for a per-sample input shape. Throws ShapeError
  /// when the input is incompatible. The loss layer returns an empty shape.
  virtual Shape output_shape(const Shape& in) const = 0;

  virtual void forward(const Tensor<T>& in, Tensor<T>& out, LayerCache<T>& cache, Mode mode,
                       Rng& rng, std::span<const int> labels) const = 0;

  /// Writes d/d(in) into `grad_in` and d/d(param) into `param_grads`, which
  /// has one entry per parameter, each already shaped like the parameter.
  virtual void backward(const Tensor<T>& in, const Tensor<T>& out, const Tensor<T>& grad_out,
                        const LayerCache<T>& cache, Tensor<T>& grad_in,
                        std::span<Tensor<T>> param_grads) const = 0;

  virtual std::vector<ParamPtr<T>> parameters() const { return {}; }
};

/// 2-D convolution over NHWC inputs, no padding. Weights are
/// [kernel, kernel, in_channels, out_channels].
template <typename T>
class Conv2D final : public Layer<T> {
 public:
  Conv2D(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride = 1)
      : in_channels_(in_channels), out_channels_(out_channels), kernel_(kernel), stride_(stride) {
    if (stride == 0 || kernel == 0) throw ValueError("Conv2D kernel and stride must be positive");
    weight_ = std::make_shared<Parameter<T>>(
        Parameter<T>{"conv.weight", Tensor<T>({kernel, kernel, in_channels, out_channels}), false});
    bias_ = std::make_shared<Parameter<T>>(Parameter<T>{"conv.bias", Tensor<T>({out_channels}), true});
  }

  LayerKind kind() const override { return LayerKind::Conv2D; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3 || in[2] != in_channels_ || in[0] < kernel_ || in[1] < kernel_) {
      throw ShapeError("Conv2D expects [H x W x " + std::to_string(in_channels_) + "] with H, W >= " +
                       std::to_string(kernel_) + ", got " + to_string(in));
    }
    return {(in[0] - kernel_) / stride_ + 1, (in[1] - kernel_) / stride_ + 1, out_channels_};
  }

  void forward(const Tensor<T>& in, Tensor<T>& out, LayerCache<T>&, Mode, Rng&,
               std::span<const int>) const override {
    const Geometry g = geometry(in);
    Buffer<T> cols;
    im2col(in, g, cols);
    out = Tensor<T>({g.batch, g.out_h, g.out_w, out_channels_});
    detail::ConstMatrixMap<T> patches(cols.data(), static_cast<Eigen::Index>(g.rows()),
                                      static_cast<Eigen::Index>(g.patch()));
    detail::ConstMatrixMap<T> w(weight_->value.data(), static_cast<Eigen::Index>(g.patch()),
                                static_cast<Eigen::Index>(out_channels_));
    detail::MatrixMap<T> result(out.data(), static_cast<Eigen::Index>(g.rows()),
                                static_cast<Eigen::Index>(out_channels_));
    result.noalias() = patches * w;
    result.rowwise() += detail::ConstRowVectorMap<T>(bias_->value.data(),
                                                     static_cast<Eigen::Index>(out_channels_));
  }

  void backward(const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& grad_out, const LayerCache<T>&,
                Tensor<T>& grad_in, std::span<Tensor<T>> param_grads) const override {
    const Geometry g = geometry(in);
    Buffer<T> cols;
    im2col(in, g, cols);
    const auto rows = static_cast<Eigen::Index>(g.rows());
    const auto patch = static_cast<Eigen::Index>(g.patch());
    const auto channels = static_cast<Eigen::Index>(out_channels_);
    detail::ConstMatrixMap<T> patches(cols.data(), rows, patch);
    detail::ConstMatrixMap<T> dout(grad_out.data(), rows, channels);
    detail::ConstMatrixMap<T> w(weight_->value.data(), patch, channels);

    detail::MatrixMap<T>(param_grads[0].data(), patch, channels).noalias() = patches.transpose() * dout;
    detail::RowVectorMap<T>(param_grads[1].data(), channels) = dout.colwise().sum();

    Buffer<T> dcols(cols.size());
    detail::MatrixMap<T>(dcols.data(), rows, patch).noalias() = dout * w.transpose();
    grad_in = Tensor<T>(in.shape());
    col2im(dcols, g, grad_in);
  }

  std::vector<ParamPtr<T>> parameters() const override { return {weight_, bias_}; }

  std::size_t kernel() const noexcept { return kernel_; }

 private:
  struct Geometry {
    std::size_t batch, in_h, in_w, channels, out_h, out_w, kernel;
    std::size_t rows() const { return batch * out_h * out_w; }
    std::size_t patch() const { return kernel * kernel * channels; }
  };

  Geometry geometry(const Tensor<T>& in) const {
    const Shape out = output_shape(in.sample_shape());
    return {in.dim(0), in.dim(1), in.dim(2), in_channels_, out[0], out[1], kernel_};
  }

  void im2col(const Tensor<T>& in, const Geometry& g, Buffer<T>& cols) const {
    cols.resize(g.rows() * g.patch());
    const std::size_t run = kernel_ * g.channels;
    T* dst = cols.data();
    for (std::size_t b = 0; b < g.batch; ++b) {
      const T* image = in.data() + b * g.in_h * g.in_w * g.channels;
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          for (std::size_t ky = 0; ky < kernel_; ++ky) {
            const T* src = image + ((oy * stride_ + ky) * g.in_w + ox * stride_) * g.channels;
            dst = std::copy_n(src, run, dst);
          }
        }
      }
    }
  }

  void col2im(const Buffer<T>& cols, const Geometry& g, Tensor<T>& grad_in) const {
    const std::size_t run = kernel_ * g.channels;
    const T* src = cols.data();
    for (std::size_t b = 0; b < g.batch; ++b) {
      T* image = grad_in.data() + b * g.in_h * g.in_w * g.channels;
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          for (std::size_t ky = 0; ky < kernel_; ++ky) {
            T* dst = image + ((oy * stride_ + ky) * g.in_w + ox * stride_) * g.channels;
            for (std::size_t i = 0; i < run; ++i) dst[i] += src[i];
            src += run;
          }
        }
      }
    }
  }

  std::size_t in_channels_, out_channels_, kernel_, stride_;
  ParamPtr<T> weight_, bias_;
};

/// Max pooling over NHWC inputs (floor semantics, no padding).
template <typename T>
class MaxPool2D final : public Layer<T> {
 public:
  explicit MaxPool2D(std::size_t size, std::size_t stride = 0) : size_(size), stride_(stride ? stride : size) {
    if (size == 0) throw ValueError("MaxPool2D size must be positive");
  }

  LayerKind kind() const override { return LayerKind::MaxPool2D; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3 || in[0] < size_ || in[1] < size_) {
      throw ShapeError("MaxPool2D expects [H x W x C] with H, W >= " + std::to_string(size_) + ", got " +
                       to_string(in));
    }
    return {(in[0] - size_) / stride_ + 1, (in[1] - size_) / stride_ + 1, in[2]};
  }

  void forward(const Tensor<T>& in, Tensor<T>& out, LayerCache<T>& cache, Mode, Rng&,
               std::span<const int>) const override {
    const Shape os = output_shape(in.sample_shape());
    const std::size_t batch = in.dim(0), h = in.dim(1), w = in.dim(2), c = in.dim(3);
    out = Tensor<T>(batched(batch, os));
    cache.index.resize(out.size());
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t oy = 0; oy < os[0]; ++oy) {
        for (std::size_t ox = 0; ox < os[1]; ++ox) {
          for (std::size_t ch = 0; ch < c; ++ch, ++o) {
            std::size_t best = ((b * h + oy * stride_) * w + ox * stride_) * c + ch;
            for (std::size_t py = 0; py < size_; ++py) {
              for (std::size_t px = 0; px < size_; ++px) {
                const std::size_t idx = ((b * h + oy * stride_ + py) * w + ox * stride_ + px) * c + ch;
                if (in[idx] > in[best]) best = idx;
              }
            }
            out[o] = in[best];
            cache.index[o] = static_cast<std::uint32_t>(best);
          }
        }
      }
    }
  }

  void backward(const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& grad_out, const LayerCache<T>& cache,
                Tensor<T>& grad_in, std::span<Tensor<T>>) const override {
    grad_in = Tensor<T>(in.shape());
    for (std::size_t o = 0; o < grad_out.size(); ++o) grad_in[cache.index[o]] += grad_out[o];
  }

 private:
  std::size_t size_, stride_;
};

/// Affine map of the flattened per-sample input. Weights are [in, out].
template <typename T>
class FullyConnected final : public Layer<T> {
 public:
  FullyConnected(std::size_t in_features, std::size_t out_features)
      : in_(in_features), out_(out_features) {
    weight_ = std::make_shared<Parameter<T>>(Parameter<T>{"fc.weight", Tensor<T>({in_features, out_features}), false});
    bias_ = std::make_shared<Parameter<T>>(Parameter<T>{"fc.bias", Tensor<T>({out_features}), true});
  }

  LayerKind kind() const override { return LayerKind::FullyConnected; }

  Shape output_shape(const Shape& in) const override {
    if (shape_size(in) != in_ || in.empty()) {
      throw ShapeError("FullyConnected expects " + std::to_string(in_) + " input features, got " + to_string(in));
    }
    return {out_};
  }

  void forward(const Tensor<T>& in, Tensor<T>& out, LayerCache<T>&, Mode, Rng&,
               std::span<const int>) const override {
    output_shape(in.sample_shape());
    const auto batch = static_cast<Eigen::Index>(in.dim(0));
    out = Tensor<T>({in.dim(0), out_});
    detail::MatrixMap<T> result(out.data(), batch, static_cast<Eigen::Index>(out_));
    result.noalias() = detail::ConstMatrixMap<T>(in.data(), batch, static_cast<Eigen::Index>(in_)) * weights();
    result.rowwise() += detail::ConstRowVectorMap<T>(bias_->value.data(), static_cast<Eigen::Index>(out_));
  }

  void backward(const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& grad_out, const LayerCache<T>&,
                Tensor<T>& grad_in, std::span<Tensor<T>> param_grads) const override {
    const auto batch = static_cast<Eigen::Index>(in.dim(0));
    const auto n_in = static_cast<Eigen::Index>(in_);
    const auto n_out = static_cast<Eigen::Index>(out_);
    detail::ConstMatrixMap<T> x(in.data(), batch, n_in);
    detail::ConstMatrixMap<T> dout(grad_out.data(), batch, n_out);
    detail::MatrixMap<T>(param_grads[0].data(), n_in, n_out).noalias() = x.transpose() * dout;
    detail::RowVectorMap<T>(param_grads[1].data(), n_out) = dout.colwise().sum();
    grad_in = Tensor<T>(in.shape());
    detail::MatrixMap<T>(grad_in.data(), batch, n_in).noalias() = dout * weights().transpose();
  }

  std::vector<ParamPtr<T>> parameters() const override { return {weight_, bias_}; }

 private:
  detail::ConstMatrixMap<T> weights() const {
    return detail::ConstMatrixMap<T>(weight_->value.data(), static_cast<Eigen::Index>(in_),
                                     static_cast<Eigen::Index>(out_));
  }

  std::size_t in_, out_;
  ParamPtr<T> weight_, bias_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::ReLU; }

  Shape output_shape(const Shape& in) const override { return in; }

  void forward(const Tensor<T>& in, Tensor<T>& out, LayerCache<T>&, Mode, Rng&,
               std::span<const int>) const override {
    out = in;
    for (T& v : out.values()) v = v > T(0) ? v : T(0);
  }

  void backward(const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& grad_out, const LayerCache<T>&,
                Tensor<T>& grad_in, std::span<Tensor<T>>) const override {
    grad_in = grad_out;
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (!(in[i] > T(0))) grad_in[i] = T(0);
    }
  }
};

/// Inverted dropout: in train mode each activation is zeroed with
/// probability `rate` and survivors are scaled by 1/(1-rate); identity in
/// test mode.
template <typename T>
class Dropout final : public Layer<T> {
 public:
  explicit Dropout(double rate) : rate_(rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ValueError("dropout rate must be in [0, 1)");
  }

  LayerKind kind() const override { return LayerKind::Dropout; }

  double rate() const noexcept { return rate_; }

  Shape output_shape(const Shape& in) const override { return in; }

  void forward(const Tensor<T>& in, Tensor<T>& out, LayerCache<T>& cache, Mode mode, Rng& rng,
               std::span<const int>) const override {
    out = in;
    cache.scratch.clear();
    if (mode == Mode::Test || rate_ == 0.0) return;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
    cache.scratch.resize(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
      cache.scratch[i] = rng.uniform() < rate_ ? T(0) : keep_scale;
      out[i] *= cache.scratch[i];
    }
  }

  void backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>& grad_out, const LayerCache<T>& cache,
                Tensor<T>& grad_in, std::span<Tensor<T>>) const override {
    grad_in = grad_out;
    if (cache.scratch.empty()) return;
    for (std::size_t i = 0; i < grad_in.size(); ++i) grad_in[i] *= cache.scratch[i];
  }

 private:
  double rate_;
};

/// Terminal loss layer: consumes [batch x classes] logits plus labels and
/// outputs the mean cross-entropy as a one-element tensor.
template <typename T>
class SoftmaxXEnt final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::SoftmaxXEnt; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 1) throw ShapeError("SoftmaxXEnt expects [classes] input, got " + to_string(in));
    return {};
  }

  void forward(const Tensor<T>& in, Tensor<T>& out, LayerCache<T>& cache, Mode, Rng&,
               std::span<const int> labels) const override {
    auto result = softmax_xent(in, labels);
    cache.loss = result.loss;
    cache.scratch = std::move(result.grad.storage());
    out = Tensor<T>({1}, static_cast<T>(result.loss));
  }

  void backward(const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& grad_out, const LayerCache<T>& cache,
                Tensor<T>& grad_in, std::span<Tensor<T>>) const override {
    grad_in = Tensor<T>(in.shape());
    const T seed = grad_out[0];
    for (std::size_t i = 0; i < grad_in.size(); ++i) grad_in[i] = seed * cache.scratch[i];
  }
};

}  // namespace fnreg
