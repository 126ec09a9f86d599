#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fnreg/error.hpp"
#include "fnreg/layers.hpp"
#include "fnreg/rng.hpp"
#include "fnreg/tensor.hpp"

namespace fnreg {

/// Everything a forward pass produced: `values[0]` is the input batch,
/// `values[i + 1]` the output of layer i.
template <typename T>
struct Activations {
  std::vector<Tensor<T>> values;
  std::vector<LayerCache<T>> caches;

  const Tensor<T>& output() const { return values.back(); }
};

/// Ordered stack of layers. Copying a Network copies the layer handles, not
/// the layers: copies share parameters.
template <typename T>
class Network {
 public:
  using LayerPtr = std::shared_ptr<Layer<T>>;

  Network(Shape input_shape, std::vector<LayerPtr> layers)
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
    shapes_.push_back(input_shape_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (i + 1 < layers_.size() && layers_[i]->kind() == LayerKind::SoftmaxXEnt) {
        throw ShapeError("SoftmaxXEnt must be the last layer", i);
      }
      try {
        shapes_.push_back(layers_[i]->output_shape(shapes_.back()));
      } catch (const ShapeError& e) {
        throw ShapeError("layer " + std::to_string(i) + " (" + to_string(layers_[i]->kind()) + "): " + e.what(), i);
      }
    }
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  /// Per-sample output shape (empty for a loss-terminated network).
  const Shape& output_shape() const noexcept { return shapes_.back(); }
  /// Per-sample input shape of layer i (i == size() gives the output shape).
  const Shape& shape_at(std::size_t i) const { return shapes_.at(i); }

  std::size_t size() const noexcept { return layers_.size(); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }
  const std::vector<LayerPtr>& layers() const noexcept { return layers_; }

  bool has_loss() const { return !layers_.empty() && layers_.back()->kind() == LayerKind::SoftmaxXEnt; }

  /// The regularization network: this network without its terminal loss
  /// layer, sharing every remaining layer and parameter.
  Network strip_loss() const {
    if (!has_loss()) throw ShapeError("strip_loss: network does not end in SoftmaxXEnt");
    return Network(input_shape_, std::vector<LayerPtr>(layers_.begin(), layers_.end() - 1));
  }

  std::vector<ParamPtr<T>> parameters() const {
    std::vector<ParamPtr<T>> out;
    for (const auto& layer : layers_) {
      auto p = layer->parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p->value.size();
    return n;
  }

  /// Runs every layer. `labels` is required only when the network ends in
  /// SoftmaxXEnt. Test mode disables dropout.
  Activations<T> forward(const Tensor<T>& x, Mode mode, Rng& rng, std::span<const int> labels = {}) const {
    if (x.rank() != input_shape_.size() + 1 || x.sample_shape() != input_shape_) {
      throw ShapeError("layer 0: expected input batch [B x " + to_string(input_shape_).substr(1) + ", got " +
                           to_string(x.shape()),
                       0);
    }
    Activations<T> acts;
    acts.values.reserve(layers_.size() + 1);
    acts.caches.resize(layers_.size());
    acts.values.push_back(x);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Tensor<T> out;
      layers_[i]->forward(acts.values.back(), out, acts.caches[i], mode, rng, labels);
      acts.values.push_back(std::move(out));
    }
    return acts;
  }

  /// Gradient of <seed, output> with respect to every parameter, aligned
  /// with parameters(). If `input_grad` is given it receives d/d(input).
  std::vector<Tensor<T>> backward(const Activations<T>& acts, const Tensor<T>& seed,
                                  Tensor<T>* input_grad = nullptr) const {
    if (acts.values.size() != layers_.size() + 1 || acts.caches.size() != layers_.size()) {
      throw ValueError("backward: activations do not match this network (" + std::to_string(acts.values.size()) +
                       " values for " + std::to_string(layers_.size()) + " layers)");
    }
    if (seed.shape() != acts.output().shape()) {
      throw ShapeError("backward: seed gradient shape " + to_string(seed.shape()) + " != output shape " +
                           to_string(acts.output().shape()),
                       layers_.size() - 1);
    }
    std::vector<Tensor<T>> grads;
    std::vector<std::size_t> first_param(layers_.size() + 1, 0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      for (const auto& p : layers_[i]->parameters()) grads.emplace_back(p->value.shape());
      first_param[i + 1] = grads.size();
    }
    Tensor<T> grad = seed;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      Tensor<T> grad_in;
      std::span<Tensor<T>> param_grads(grads.data() + first_param[i], first_param[i + 1] - first_param[i]);
      layers_[i]->backward(acts.values[i], acts.values[i + 1], grad, acts.caches[i], grad_in, param_grads);
      grad = std::move(grad_in);
    }
    if (input_grad) *input_grad = std::move(grad);
    return grads;
  }

 private:
  Shape input_shape_;
  std::vector<LayerPtr> layers_;
  std::vector<Shape> shapes_;
};

/// Fraction of samples whose label is not among the k largest logits. Ties
/// rank the lower class index first; NaN logits rank below everything.
template <typename T>
double topk_error(const Tensor<T>& logits, std::span<const int> labels, std::size_t k) {
  if (logits.rank() != 2) throw ShapeError("topk_error expects [batch x classes] logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (k == 0 || k > classes) {
    throw ValueError("topk_error: k = " + std::to_string(k) + " outside [1, " + std::to_string(classes) + "]");
  }
  if (labels.size() != batch) throw ShapeError("topk_error: label count does not match batch");
  auto score = [](T v) {
    return std::isnan(v) ? -std::numeric_limits<double>::infinity() : static_cast<double>(v);
  };
  std::size_t misses = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ValueError("topk_error: label " + std::to_string(label) + " out of range");
    }
    const auto row = logits.sample(b);
    const double target = score(row[static_cast<std::size_t>(label)]);
    std::size_t ahead = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double s = score(row[c]);
      if (s > target || (s == target && c < static_cast<std::size_t>(label))) ++ahead;
    }
    if (ahead >= k) ++misses;
  }
  return static_cast<double>(misses) / static_cast<double>(batch);
}

enum class DatasetKind { Mnist, Cifar10 };

struct LeNetOptions {
  DatasetKind dataset = DatasetKind::Mnist;
  /// When positive, a Dropout layer follows the hidden ReLU.
  double dropout_rate = 0.0;
  /// Standard deviation of the Gaussian weight initialization.
  double init_stddev = 0.01;
};

/// Fills every weight tensor with N(0, stddev^2) and every bias with zero.
template <typename T>
void initialize_gaussian(const Network<T>& net, double stddev, Rng& rng) {
  for (const auto& p : net.parameters()) {
    for (T& v : p->value.values()) v = p->is_bias ? T(0) : static_cast<T>(rng.normal(0.0, stddev));
  }
}

/// LeNet as shipped with MatConvNet's examples:
///   Conv5x5x20 - MaxPool2 - Conv5x5x50 - MaxPool2 - FC500 - ReLU - FC10 - SoftmaxXEnt
/// MNIST takes 28x28x1 inputs; CIFAR-10 takes 32x32x3 and the first FC layer
/// sees 5x5x50 instead of 4x4x50 features.
template <typename T>
Network<T> build_lenet(const LeNetOptions& options, Rng& rng) {
  const bool mnist = options.dataset == DatasetKind::Mnist;
  const Shape input = mnist ? Shape{28, 28, 1} : Shape{32, 32, 3};
  const std::size_t pooled = mnist ? 4 : 5;
  std::vector<typename Network<T>::LayerPtr> layers;
  layers.push_back(std::make_shared<Conv2D<T>>(input[2], 20, 5));
  layers.push_back(std::make_shared<MaxPool2D<T>>(2));
  layers.push_back(std::make_shared<Conv2D<T>>(20, 50, 5));
  layers.push_back(std::make_shared<MaxPool2D<T>>(2));
  layers.push_back(std::make_shared<FullyConnected<T>>(pooled * pooled * 50, 500));
  layers.push_back(std::make_shared<ReLU<T>>());
  if (options.dropout_rate > 0.0) layers.push_back(std::make_shared<Dropout<T>>(options.dropout_rate));
  layers.push_back(std::make_shared<FullyConnected<T>>(500, 10));
  layers.push_back(std::make_shared<SoftmaxXEnt<T>>());
  Network<T> net(input, std::move(layers));
  initialize_gaussian(net, options.init_stddev, rng);
  return net;
}

}  // namespace fnreg
