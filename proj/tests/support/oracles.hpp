#pragma once

// Independent reference computations used by the unit and acceptance
// suites. Nothing here calls backward(): gradients come from central
// differences of forward().

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "fnreg/network.hpp"
#include "fnreg/regularizers.hpp"

namespace fnreg::testing {

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

template <typename T>
std::vector<double> flatten(const std::vector<Tensor<T>>& tensors) {
  std::vector<double> out;
  for (const auto& t : tensors) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

template <typename T>
std::vector<double> flatten(const Tensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

/// Scalar functional of a forward pass. The Rng is re-seeded for every
/// evaluation so stochastic layers see the same mask each time.
using Functional = std::function<double(const Network<double>&, const Tensor<double>&)>;

/// <seed, output> for a forward pass in train mode with Rng(rng_seed).
inline Functional seeded_output(const Tensor<double>& seed, std::vector<int> labels, std::uint64_t rng_seed) {
  return [seed, labels = std::move(labels), rng_seed](const Network<double>& net, const Tensor<double>& x) {
    Rng rng(rng_seed);
    const auto acts = net.forward(x, Mode::Train, rng, labels);
    double dot = 0;
    for (std::size_t i = 0; i < seed.size(); ++i) dot += seed[i] * acts.output()[i];
    return dot;
  };
}

/// Mean squared output norm, the function-norm penalty, computed directly.
inline Functional penalty_of_output(std::uint64_t rng_seed) {
  return [rng_seed](const Network<double>& net, const Tensor<double>& x) {
    Rng rng(rng_seed);
    const auto acts = net.forward(x, Mode::Train, rng);
    double s = 0;
    for (double v : acts.output().values()) s += v * v;
    return s / static_cast<double>(acts.output().batch());
  };
}

/// Central-difference gradient with respect to every parameter, in
/// parameters() order.
inline std::vector<double> fd_param_grad(const Network<double>& net, const Tensor<double>& x, const Functional& f,
                                         double h = 1e-5) {
  std::vector<double> out;
  for (const auto& p : net.parameters()) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double plus = f(net, x);
      p->value[i] = saved - h;
      const double minus = f(net, x);
      p->value[i] = saved;
      out.push_back((plus - minus) / (2 * h));
    }
  }
  return out;
}

/// Central-difference gradient with respect to the input batch.
inline std::vector<double> fd_input_grad(const Network<double>& net, const Tensor<double>& x, const Functional& f,
                                         double h = 1e-5) {
  Tensor<double> probe = x;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double plus = f(net, probe);
    probe[i] = x[i] - h;
    const double minus = f(net, probe);
    probe[i] = x[i];
    out[i] = (plus - minus) / (2 * h);
  }
  return out;
}

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(shape);
  for (T& v : t.values()) v = static_cast<T>(rng.normal(0.0, scale));
  return t;
}

template <typename T>
void randomize_parameters(const Network<T>& net, Rng& rng, double scale = 0.5) {
  for (const auto& p : net.parameters()) {
    for (T& v : p->value.values()) v = static_cast<T>(rng.normal(0.0, scale));
  }
}

/// Copies parameter values between two networks of the same architecture.
template <typename From, typename To>
void copy_parameters(const Network<From>& from, const Network<To>& to) {
  const auto a = from.parameters();
  const auto b = to.parameters();
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k]->value.size(); ++i) b[k]->value[i] = static_cast<To>(a[k]->value[i]);
  }
}

/// Upper critical value of the chi-square distribution.
inline double chi_square_critical(double dof, double alpha) {
  return boost::math::quantile(boost::math::complement(boost::math::chi_squared(dof), alpha));
}

inline double chi_square_statistic(std::span<const double> observed, std::span<const double> expected) {
  double s = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) s += (observed[i] - expected[i]) * (observed[i] - expected[i]) / expected[i];
  return s;
}

struct Moments {
  double mean = 0;
  double variance = 0;
};

inline Moments moments(std::span<const double> xs) {
  Moments m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  for (double x : xs) m.variance += (x - m.mean) * (x - m.mean);
  m.variance /= static_cast<double>(xs.size() - 1);
  return m;
}

/// Standard error of the mean of a correlated series via non-overlapping
/// batch means (MCMC output is autocorrelated).
inline double batch_means_standard_error(std::span<const double> xs, std::size_t batches = 50) {
  const std::size_t per = xs.size() / batches;
  std::vector<double> means(batches, 0.0);
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t i = 0; i < per; ++i) means[b] += xs[b * per + i];
    means[b] /= static_cast<double>(per);
  }
  return std::sqrt(moments(means).variance / static_cast<double>(batches));
}

}  // namespace fnreg::testing
