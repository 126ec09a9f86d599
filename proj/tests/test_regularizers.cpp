#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "fnreg/regularizers.hpp"
#include "fnreg/trainer.hpp"
#include "support/oracles.hpp"

namespace fnreg {
namespace {

using testing::fd_param_grad;
using testing::flatten;
using testing::penalty_of_output;
using testing::random_tensor;
using testing::randomize_parameters;
using testing::relative_error;

template <typename T>
using Layers = std::vector<std::shared_ptr<Layer<T>>>;

TEST(WeightDecay, ZeroDecayIsZero) {
  Rng rng(0);
  const auto net = build_lenet<double>({}, rng);
  const auto params = net.parameters();
  for (const auto& g : weight_decay_grad<double>(params, 0.0)) {
    for (double v : g.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(WeightDecay, ScalesWeightsAndSkipsBiases) {
  Network<double> net({1}, Layers<double>{std::make_shared<FullyConnected<double>>(1, 2)});
  const auto params = net.parameters();
  params[0]->value = Tensor<double>({1, 2}, {2, -4});
  params[1]->value = Tensor<double>({2}, {5, 5});
  const auto g = weight_decay_grad<double>(params, 0.5);
  EXPECT_EQ(g[0].to_vector(), (std::vector<double>{1, -2}));
  EXPECT_EQ(g[1].to_vector(), (std::vector<double>{0, 0}));
  EXPECT_THROW(weight_decay_grad<double>(params, -1.0), ValueError);
}

TEST(WeightDecay, MatchesGradientOfHalfSquaredNorm) {
  Network<double> net({3}, Layers<double>{std::make_shared<FullyConnected<double>>(3, 4), std::make_shared<ReLU<double>>(),
                                          std::make_shared<FullyConnected<double>>(4, 3), std::make_shared<SoftmaxXEnt<double>>()});
  Rng rng(3);
  randomize_parameters(net, rng);
  const auto x = random_tensor<double>({5, 3}, rng);
  const std::vector<int> labels{0, 1, 2, 1, 0};
  const double decay = 0.3;
  const auto params = net.parameters();

  auto grads = net.backward(net.forward(x, Mode::Train, rng, labels), Tensor<double>({1}, 1.0));
  const auto wd = weight_decay_grad<double>(params, decay);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    for (std::size_t i = 0; i < grads[k].size(); ++i) grads[k][i] += wd[k][i];
  }
  const auto objective = [&](const Network<double>& n, const Tensor<double>& in) {
    Rng r(0);
    double value = n.forward(in, Mode::Train, r, labels).output()[0];
    for (const auto& p : n.parameters()) {
      if (!p->is_bias) value += 0.5 * decay * squared_norm(p->value.values());
    }
    return value;
  };
  EXPECT_LE(relative_error(flatten(grads), fd_param_grad(net, x, objective)), 1e-6);
}

TEST(FnNormPenalty, Examples) {
  EXPECT_DOUBLE_EQ(fn_norm_penalty(Tensor<double>({1, 2}, {3, 4})), 25.0);
  EXPECT_DOUBLE_EQ(fn_norm_penalty(Tensor<double>({2, 2}, {1, 0, 0, 1})), 1.0);
  EXPECT_DOUBLE_EQ(fn_norm_penalty(Tensor<double>({3, 4})), 0.0);
  EXPECT_THROW(fn_norm_penalty(Tensor<double>()), ValueError);
}

TEST(FnNormSeed, Examples) {
  EXPECT_EQ(fn_norm_seed_grad(Tensor<double>({1, 2}, {3, 4})).to_vector(), (std::vector<double>{6, 8}));
  const auto zero = fn_norm_seed_grad(Tensor<double>({2, 3}));
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(fn_norm_seed_grad(Tensor<double>()), ValueError);
}

TEST(FnNormSeed, LinearNetworkClosedForm) {
  // f(x) = x W + b with [in x out] weights; the penalty gradient is
  // dW = (2/m) sum_s x_s^T f(x_s) and db = (2/m) sum_s f(x_s).
  Network<double> net({4}, Layers<double>{std::make_shared<FullyConnected<double>>(4, 3)});
  Rng rng(9);
  randomize_parameters(net, rng);
  const auto x = random_tensor<double>({6, 4}, rng);
  const auto acts = net.forward(x, Mode::Test, rng);
  const auto grads = net.backward(acts, fn_norm_seed_grad(acts.output()));

  const auto& w = net.parameters()[0]->value;
  const auto& b = net.parameters()[1]->value;
  std::vector<double> dw(12, 0.0), db(3, 0.0);
  for (std::size_t s = 0; s < 6; ++s) {
    double f[3];
    for (std::size_t j = 0; j < 3; ++j) {
      f[j] = b[j];
      for (std::size_t i = 0; i < 4; ++i) f[j] += x[s * 4 + i] * w[i * 3 + j];
    }
    for (std::size_t j = 0; j < 3; ++j) {
      db[j] += 2.0 / 6.0 * f[j];
      for (std::size_t i = 0; i < 4; ++i) dw[i * 3 + j] += 2.0 / 6.0 * x[s * 4 + i] * f[j];
    }
  }
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(grads[0][i], dw[i], 1e-10);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(grads[1][j], db[j], 1e-10);
}

TEST(FnNormSeed, SeededBackwardMatchesPenaltyFiniteDifferences) {
  Network<double> net({6, 6, 1}, Layers<double>{std::make_shared<Conv2D<double>>(1, 3, 3), std::make_shared<MaxPool2D<double>>(2),
                                                std::make_shared<FullyConnected<double>>(12, 5), std::make_shared<ReLU<double>>(),
                                                std::make_shared<FullyConnected<double>>(5, 4)});
  ASSERT_LE(net.parameter_count(), 1000u);
  Rng rng(13);
  randomize_parameters(net, rng);
  const auto x = random_tensor<double>({4, 6, 6, 1}, rng);
  Rng fwd(0);
  const auto acts = net.forward(x, Mode::Train, fwd);
  const auto analytic = flatten(net.backward(acts, fn_norm_seed_grad(acts.output())));
  EXPECT_LE(relative_error(analytic, fd_param_grad(net, x, penalty_of_output(0))), 1e-6);
}

// Mini-batches drawn uniformly with replacement from a pool give an unbiased
// estimate of the pool-average squared output norm.
TEST(FnNormPenalty, PoolEstimateIsUnbiased) {
  Network<double> net({3}, Layers<double>{std::make_shared<FullyConnected<double>>(3, 2)});
  Rng rng(17);
  randomize_parameters(net, rng);
  UnlabeledPool<double> pool{random_tensor<double>({1000, 3}, rng)};

  double exact = 0.0;
  for (std::size_t s = 0; s < pool.size(); ++s) {
    const auto out = net.forward(pool.images.gather(std::vector<std::size_t>{s}), Mode::Test, rng).output();
    exact += squared_norm(out.values());
  }
  exact /= static_cast<double>(pool.size());

  PoolSource<double> source(pool, 5);
  const std::size_t k = 10000;
  std::vector<double> estimates(k);
  for (auto& e : estimates) e = fn_norm_penalty(net.forward(source.next(10), Mode::Test, rng).output());
  const auto m = testing::moments(estimates);
  EXPECT_NEAR(m.mean, exact, 3 * std::sqrt(m.variance / k));
}

}  // namespace
}  // namespace fnreg
