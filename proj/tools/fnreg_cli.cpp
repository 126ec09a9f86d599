// fnreg: train LeNet with weight decay, dropout or the function-norm penalty.
//
//   fnreg run     --config run.cfg [--out DIR] [--seed N]
//   fnreg sweep   --config run.cfg --lambda-list 50,5,0.5 [--out DIR] [--seed N]
//   fnreg compare --config a.cfg --config b.cfg ... [--out DIR] [--seed N]
//
// Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fnreg/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitIo = 4;

fnreg::ExperimentConfig load(const std::string& path, const std::optional<std::uint64_t>& seed) {
  auto c = fnreg::load_config(path);
  if (seed) c.seed = *seed;
  return c;
}

void print_epoch(const fnreg::ExperimentConfig& c, const fnreg::EpochReport& r) {
  std::fprintf(stderr, "[%s] epoch %zu loss %.4f penalty %.4f top1 %.4f time %.1fs\n", c.name.c_str(), r.epoch, r.train_loss,
               r.penalty, r.top1, r.elapsed);
}

void print_summary(const fnreg::RunResult& r) {
  std::printf("%s: accuracy %.2f%% (top-5 %.2f%%) after %zu epochs%s\n", r.config.name.c_str(), r.accuracy_pct(),
              r.top5_accuracy_pct(), r.history.size(), r.diverged ? ", diverged" : "");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train LeNet with weight decay, dropout or the function-norm penalty"};
  app.require_subcommand(1);

  std::vector<std::string> configs;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<double> lambdas;

  auto* run = app.add_subcommand("run", "Train one configuration");
  run->add_option("--config", configs, "Config file")->required()->expected(1);
  auto* sweep = app.add_subcommand("sweep", "Train one configuration for each lambda");
  sweep->add_option("--config", configs, "Base config file")->required()->expected(1);
  sweep->add_option("--lambda-list", lambdas, "Comma-separated lambda values")->required()->delimiter(',');
  auto* compare = app.add_subcommand("compare", "Train several configurations on a shared split");
  compare->add_option("--config", configs, "Config file, once per method")->required();
  for (auto* sub : {run, sweep, compare}) {
    sub->add_option("--out", out, "Output directory (overrides out_dir)");
    sub->add_option("--seed", seed, "Seed (overrides seed)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (run->parsed()) {
      auto c = load(configs.front(), seed);
      if (!out.empty()) c.out_dir = out;
      const auto data = fnreg::load_experiment_data<float>(c);
      const auto r = fnreg::run_experiment<float>(c, data, [&](const fnreg::EpochReport& e) { print_epoch(c, e); });
      fnreg::write_run_artifacts(c.out_dir, r);
      print_summary(r);
      if (r.diverged) {
        std::cerr << r.failure << "\n";
        return kExitDivergence;
      }
      return 0;
    }
    std::vector<fnreg::ExperimentConfig> loaded;
    for (const auto& path : configs) loaded.push_back(load(path, seed));
    const std::string dir = out.empty() ? loaded.front().out_dir : out;
    const auto results = sweep->parsed() ? fnreg::run_sweep<float>(loaded.front(), lambdas, dir, print_epoch)
                                         : fnreg::run_compare<float>(loaded, dir, print_epoch);
    for (const auto& r : results) print_summary(r);
    return 0;
  } catch (const fnreg::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const fnreg::ValueError& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fnreg::DivergenceError& e) {
    std::cerr << e.what() << "\n";
    return kExitDivergence;
  } catch (const fnreg::DataError& e) {
    std::cerr << e.what() << "\n";
    return kExitIo;
  } catch (const fnreg::IoError& e) {
    std::cerr << e.what() << "\n";
    return kExitIo;
  }
}
