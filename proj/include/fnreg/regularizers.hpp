#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fnreg/error.hpp"
#include "fnreg/layers.hpp"
#include "fnreg/tensor.hpp"

namespace fnreg {

enum class Method { WeightDecay, WeightDecayDropout, FnNormDataDist, FnNormSlice };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::WeightDecay: return "weight_decay";
    case Method::WeightDecayDropout: return "weight_decay_dropout";
    case Method::FnNormDataDist: return "fn_norm_data";
    case Method::FnNormSlice: return "fn_norm_slice";
  }
  return "?";
}

inline std::optional<Method> parse_method(const std::string& s) {
  for (Method m : {Method::WeightDecay, Method::WeightDecayDropout, Method::FnNormDataDist, Method::FnNormSlice}) {
    if (s == to_string(m)) return m;
  }
  return std::nullopt;
}

inline bool uses_function_norm(Method m) { return m == Method::FnNormDataDist || m == Method::FnNormSlice; }

/// Which regularizer a run uses and how strongly.
struct RegularizerSpec {
  Method method = Method::WeightDecay;
  /// Function-norm weight; ignored by the weight-decay methods.
  double lambda = 0.0;
  /// Weight-decay coefficient, active for every method.
  double decay = 5e-4;
  /// Used only by WeightDecayDropout.
  double dropout_rate = 0.0;
  /// Optional "1:N" train:regularization batch composition (stores N).
  std::optional<std::size_t> reg_ratio;

  void validate() const {
    if (!(lambda >= 0.0)) throw ValueError("lambda must be nonnegative");
    if (!(decay >= 0.0)) throw ValueError("decay must be nonnegative");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValueError("dropout_rate must be in [0, 1)");
    if (reg_ratio && *reg_ratio == 0) throw ValueError("reg_ratio must be positive");
  }

  /// Dropout rate the network should be built with.
  double effective_dropout() const { return method == Method::WeightDecayDropout ? dropout_rate : 0.0; }
};

/// decay * W for weight tensors, zero for biases.
template <typename T>
std::vector<Tensor<T>> weight_decay_grad(std::span<const ParamPtr<T>> params, double decay) {
  if (!(decay >= 0.0)) throw ValueError("decay must be nonnegative");
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    Tensor<T> g(p->value.shape());
    if (!p->is_bias) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<T>(decay) * p->value[i];
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Mean squared Euclidean norm of the per-sample outputs: the Monte Carlo
/// estimate of the function norm over the batch.
template <typename T>
double fn_norm_penalty(const Tensor<T>& outputs) {
  if (outputs.batch() == 0) throw ValueError("fn_norm_penalty: empty batch");
  return squared_norm(outputs.values()) / static_cast<double>(outputs.batch());
}

/// Gradient of fn_norm_penalty with respect to the outputs, (2 / batch) * f.
/// Seeding backward with it yields the penalty's parameter gradient.
template <typename T>
Tensor<T> fn_norm_seed_grad(const Tensor<T>& outputs) {
  if (outputs.batch() == 0) throw ValueError("fn_norm_seed_grad: empty batch");
  Tensor<T> seed = outputs;
  const T scale = static_cast<T>(2.0 / static_cast<double>(outputs.batch()));
  for (T& v : seed.values()) v *= scale;
  return seed;
}

}  // namespace fnreg
