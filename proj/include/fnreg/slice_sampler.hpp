#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fnreg/error.hpp"
#include "fnreg/network.hpp"
#include "fnreg/rng.hpp"
#include "fnreg/tensor.hpp"

namespace fnreg {

/// Unnormalized non-negative density over the flattened input space.
template <typename T>
using Density = std::function<double(std::span<const T>)>;

/// Axis-aligned sampling box.
struct Bounds {
  std::vector<double> lo;
  std::vector<double> hi;
};

struct SliceConfig {
  /// Per-dimension width of the initial hyperrectangle.
  std::vector<double> width;
  /// Cap on the total number of step-out moves per update (split randomly
  /// between the lower and the upper corner).
  std::size_t max_stepout = 8;
  /// Updates discarded before the first sample is returned.
  std::size_t burn_in = 20;
  /// Stepping out treats the corners as single points, which keeps an update
  /// at two density evaluations per move but is only reversible in one
  /// dimension. Turning it off gives Neal's exact random-placement update.
  bool step_out = true;
  std::optional<Bounds> bounds;
  std::uint64_t seed = 0;

  void validate(std::size_t dim) const {
    if (width.size() != dim) throw ValueError("slice width has " + std::to_string(width.size()) + " entries, expected " + std::to_string(dim));
    for (double w : width) {
      if (!(w > 0.0) || !std::isfinite(w)) throw ValueError("slice widths must be positive and finite");
    }
    if (max_stepout == 0) throw ValueError("max_stepout must be positive");
    if (bounds) {
      if (bounds->lo.size() != dim || bounds->hi.size() != dim) throw ValueError("slice bounds dimension mismatch");
      for (std::size_t i = 0; i < dim; ++i) {
        if (!(bounds->lo[i] < bounds->hi[i])) throw ValueError("slice bounds need lo < hi on every axis");
      }
    }
  }
};

/// State of one multivariate slice-sampling chain. The chain keeps its own
/// random stream, so chains with the same seed, config and density visit the
/// same points.
template <typename T>
class SliceChain {
 public:
  using Initializer = std::function<std::vector<T>(Rng&)>;

  /// Chain that (re)starts from points produced by `init`.
  SliceChain(SliceConfig config, Initializer init)
      : config_(std::move(config)), init_(std::move(init)), rng_(config_.seed) {
    config_.validate(config_.width.size());
    restart();
  }

  /// Chain that starts, and restarts, at a fixed point.
  SliceChain(SliceConfig config, std::vector<T> start)
      : SliceChain(std::move(config), [start](Rng&) { return start; }) {}

  const SliceConfig& config() const noexcept { return config_; }
  const std::vector<T>& current() const noexcept { return current_; }
  std::size_t dim() const noexcept { return current_.size(); }
  std::size_t steps_taken() const noexcept { return steps_; }
  std::size_t restarts() const noexcept { return restarts_; }
  bool burned_in() const noexcept { return burned_in_; }

  /// Slice level y used by the most recent update, and the density of the
  /// point it accepted (always > level).
  double last_level() const noexcept { return last_level_; }
  double last_density() const noexcept { return last_density_; }

  /// Draws a fresh starting point and requires burn-in again.
  void restart() {
    current_ = init_(rng_);
    if (current_.size() != config_.width.size()) {
      throw ValueError("slice chain start has dimension " + std::to_string(current_.size()) + ", expected " +
                       std::to_string(config_.width.size()));
    }
    if (config_.bounds) {
      for (std::size_t i = 0; i < current_.size(); ++i) {
        current_[i] = static_cast<T>(std::clamp(static_cast<double>(current_[i]), config_.bounds->lo[i], config_.bounds->hi[i]));
      }
    }
    burned_in_ = false;
    ++restarts_;
  }

  void mark_burned_in() noexcept { burned_in_ = true; }

 private:
  template <typename U>
  friend const std::vector<U>& slice_step(const Density<U>& g, SliceChain<U>& chain);

  SliceConfig config_;
  Initializer init_;
  Rng rng_;
  std::vector<T> current_;
  std::size_t steps_ = 0;
  std::size_t restarts_ = 0;
  bool burned_in_ = false;
  double last_level_ = 0.0;
  double last_density_ = 0.0;
};

namespace detail {

inline bool inside(double level, double density) { return std::isfinite(density) && density > level; }

}  // namespace detail

/// One stepping-out / shrinking-in update of the chain:
///  1. level y ~ Uniform(0, g(x0));
///  2. hyperrectangle of the configured widths placed uniformly at random
///     around x0, intersected with the bounds;
///  3. the lower and upper corners step out by one width per move while they
///     are inside the slice {g > y}, at most max_stepout moves in total
///     (skipped when step_out is off);
///  4. uniform proposals from the box; every rejection shrinks each axis
///     toward x0 until a proposal lands inside the slice.
template <typename T>
const std::vector<T>& slice_step(const Density<T>& g, SliceChain<T>& chain) {
  const SliceConfig& cfg = chain.config_;
  Rng& rng = chain.rng_;
  const std::size_t dim = chain.current_.size();
  const std::vector<T>& x0 = chain.current_;

  const double g0 = g(x0);
  if (!(g0 > 0.0) || !std::isfinite(g0)) {
    throw ChainRestartError("slice_step: density at the current point is " + std::to_string(g0));
  }
  const double level = rng.uniform_open() * g0;

  auto clamp_axis = [&](std::size_t i, double v) {
    return cfg.bounds ? std::clamp(v, cfg.bounds->lo[i], cfg.bounds->hi[i]) : v;
  };

  std::vector<double> lower(dim), upper(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    const double x = static_cast<double>(x0[i]);
    const double lo = x - rng.uniform() * cfg.width[i];
    lower[i] = clamp_axis(i, lo);
    upper[i] = clamp_axis(i, lo + cfg.width[i]);
  }

  std::vector<T> probe(dim);
  auto density_at = [&](const std::vector<double>& point) {
    for (std::size_t i = 0; i < dim; ++i) probe[i] = static_cast<T>(point[i]);
    return g(std::span<const T>(probe));
  };
  auto step_corner = [&](std::vector<double>& corner, double direction) {
    bool moved = false;
    for (std::size_t i = 0; i < dim; ++i) {
      const double next = clamp_axis(i, corner[i] + direction * cfg.width[i]);
      moved = moved || next != corner[i];
      corner[i] = next;
    }
    return moved;
  };

  if (cfg.step_out) {
    std::size_t left_moves = static_cast<std::size_t>(std::floor(static_cast<double>(cfg.max_stepout) * rng.uniform()));
    std::size_t right_moves = cfg.max_stepout - 1 - left_moves;
    while (left_moves > 0 && detail::inside(level, density_at(lower)) && step_corner(lower, -1.0)) --left_moves;
    while (right_moves > 0 && detail::inside(level, density_at(upper)) && step_corner(upper, 1.0)) --right_moves;
  }

  constexpr std::size_t max_shrinks = 100000;
  std::vector<T> proposal(dim);
  for (std::size_t attempt = 0; attempt < max_shrinks; ++attempt) {
    for (std::size_t i = 0; i < dim; ++i) {
      proposal[i] = static_cast<T>(lower[i] + rng.uniform() * (upper[i] - lower[i]));
    }
    const double g1 = g(std::span<const T>(proposal));
    if (detail::inside(level, g1)) {
      chain.current_ = proposal;
      chain.last_level_ = level;
      chain.last_density_ = g1;
      ++chain.steps_;
      return chain.current_;
    }
    bool collapsed = true;
    for (std::size_t i = 0; i < dim; ++i) {
      const double x = static_cast<double>(x0[i]);
      const double p = static_cast<double>(proposal[i]);
      if (p < x) {
        lower[i] = p;
      } else {
        upper[i] = p;
      }
      const double scale = std::max(1.0, std::abs(x));
      if (upper[i] - lower[i] > std::numeric_limits<double>::epsilon() * scale) collapsed = false;
    }
    if (collapsed) break;
  }
  throw DegenerateSliceError("slice_step: shrinkage collapsed onto the current point without an accepted proposal");
}

/// Advances the chain `count` times (after burn-in on first use) and returns
/// the visited points as a [count x sample_shape] batch. Degenerate steps
/// restart the chain; the fourth restart within one call fails the batch.
template <typename T>
Tensor<T> sample_batch(const Density<T>& g, SliceChain<T>& chain, std::size_t count, const Shape& sample_shape) {
  if (count == 0) throw ValueError("sample_batch: count must be at least 1");
  if (shape_size(sample_shape) != chain.dim()) throw ShapeError("sample_batch: sample shape does not match chain dimension");
  constexpr std::size_t max_restarts = 3;
  std::size_t restarts = 0;
  auto guarded_step = [&]() {
    for (;;) {
      try {
        return slice_step(g, chain);
      } catch (const SliceError& e) {
        if (++restarts > max_restarts) {
          throw SliceError(std::string("sample_batch failed after 3 chain restarts: ") + e.what());
        }
        chain.restart();
      }
    }
  };
  Tensor<T> out(batched(count, sample_shape));
  std::size_t filled = 0;
  while (filled < count) {
    if (!chain.burned_in()) {
      for (std::size_t i = 0; i < chain.config().burn_in; ++i) guarded_step();
      chain.mark_burned_in();
    }
    const std::size_t restarts_before = restarts;
    const auto& point = guarded_step();
    if (restarts != restarts_before && !chain.burned_in()) continue;  // restarted mid-batch: burn in again
    std::copy(point.begin(), point.end(), out.sample(filled).begin());
    ++filled;
  }
  return out;
}

template <typename T>
Tensor<T> sample_batch(const Density<T>& g, SliceChain<T>& chain, std::size_t count) {
  return sample_batch(g, chain, count, Shape{chain.dim()});
}

/// x -> ||f(x)||^2 for a loss-stripped network, evaluated in test mode with
/// the network's current weights.
template <typename T>
Density<T> density_from_network(const Network<T>& net_reg) {
  if (net_reg.has_loss()) throw ValueError("density_from_network needs a loss-stripped network");
  return [net = net_reg](std::span<const T> x) {
    Tensor<T> input(batched(1, net.input_shape()), std::vector<T>(x.begin(), x.end()));
    Rng unused(0);
    const auto acts = net.forward(input, Mode::Test, unused);
    return squared_norm(acts.output().values());
  };
}

/// Sampling box and widths derived from a data batch: per-dimension
/// [min, max] widened by 10% of the range on each side (half-width 0.05 for
/// constant dimensions) and per-dimension standard deviation as width
/// (1.0 where the data is constant).
template <typename T>
SliceConfig slice_config_from_data(const Tensor<T>& data, std::uint64_t seed, std::size_t burn_in = 20,
                                   std::size_t max_stepout = 8) {
  if (data.batch() == 0) throw ValueError("slice_config_from_data: empty data");
  const std::size_t n = data.batch(), dim = data.sample_size();
  SliceConfig cfg;
  cfg.seed = seed;
  cfg.burn_in = burn_in;
  cfg.max_stepout = max_stepout;
  cfg.width.assign(dim, 0.0);
  Bounds box{std::vector<double>(dim, std::numeric_limits<double>::infinity()),
             std::vector<double>(dim, -std::numeric_limits<double>::infinity())};
  std::vector<double> mean(dim, 0.0), sq(dim, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const auto x = data.sample(s);
    for (std::size_t i = 0; i < dim; ++i) {
      const double v = static_cast<double>(x[i]);
      box.lo[i] = std::min(box.lo[i], v);
      box.hi[i] = std::max(box.hi[i], v);
      mean[i] += v;
      sq[i] += v * v;
    }
  }
  for (std::size_t i = 0; i < dim; ++i) {
    const double range = box.hi[i] - box.lo[i];
    const double margin = range > 0.0 ? 0.1 * range : 0.05;
    box.lo[i] -= margin;
    box.hi[i] += margin;
    const double m = mean[i] / static_cast<double>(n);
    const double var = std::max(0.0, sq[i] / static_cast<double>(n) - m * m);
    const double sd = std::sqrt(var);
    cfg.width[i] = sd > 1e-12 ? sd : 1.0;
  }
  cfg.bounds = std::move(box);
  return cfg;
}

}  // namespace fnreg
