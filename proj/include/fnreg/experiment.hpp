#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include "fnreg/datasets.hpp"
#include "fnreg/error.hpp"
#include "fnreg/network.hpp"
#include "fnreg/regularizers.hpp"
#include "fnreg/rng.hpp"
#include "fnreg/slice_sampler.hpp"
#include "fnreg/trainer.hpp"

namespace fnreg {

/// Everything needed to reproduce one training run. Text form is one
/// `key = value` per line; `#` starts a comment line.
struct ExperimentConfig {
  std::string name = "run";
  DatasetKind dataset = DatasetKind::Mnist;
  /// Directory with the standard file names; train_files / test_files
  /// override it (MNIST: images then labels; CIFAR-10: batch files).
  std::string data_dir;
  std::vector<std::string> train_files;
  std::vector<std::string> test_files;
  std::size_t n_train = 100;
  Method method = Method::WeightDecay;
  double lambda = 0.0;
  double decay = 5e-4;
  double dropout_rate = 0.0;
  std::optional<std::size_t> reg_ratio;
  std::size_t batch_size = 100;
  std::size_t epochs = 100;
  LrSchedule::Kind lr_schedule = LrSchedule::Kind::Constant;
  double lr = 0.01;
  double lr_kappa = 0.0;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  std::size_t eval_batch = 500;
  /// Evaluate on the test set every this many epochs (always after the last).
  std::size_t eval_every = 1;
  double init_stddev = 0.01;
  std::size_t slice_burn_in = 20;
  std::size_t slice_max_stepout = 8;
  bool slice_step_out = true;

  bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::invalid_argument("expected a number, got '" + s + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw std::invalid_argument("expected a nonnegative integer, got '" + s + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

inline std::vector<std::string> parse_list(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (item.empty()) throw std::invalid_argument("empty list entry");
    out.push_back(item);
  }
  return out;
}

inline std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

inline const char* to_string(DatasetKind k) { return k == DatasetKind::Mnist ? "mnist" : "cifar10"; }
inline const char* to_string(LrSchedule::Kind k) { return k == LrSchedule::Kind::Constant ? "constant" : "inverse"; }

struct ConfigField {
  const char* key;
  std::function<void(ExperimentConfig&, const std::string&)> parse;
  std::function<std::string(const ExperimentConfig&)> format;
};

template <typename M>
ConfigField uint_field(const char* key, M ExperimentConfig::*member) {
  return {key, [member](ExperimentConfig& c, const std::string& v) { c.*member = static_cast<M>(parse_uint(v)); },
          [member](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

inline ConfigField double_field(const char* key, double ExperimentConfig::*member) {
  return {key, [member](ExperimentConfig& c, const std::string& v) { c.*member = parse_double(v); },
          [member](const ExperimentConfig& c) { return format_double(c.*member); }};
}

inline ConfigField string_field(const char* key, std::string ExperimentConfig::*member) {
  return {key, [member](ExperimentConfig& c, const std::string& v) { c.*member = v; },
          [member](const ExperimentConfig& c) { return c.*member; }};
}

inline ConfigField list_field(const char* key, std::vector<std::string> ExperimentConfig::*member) {
  return {key, [member](ExperimentConfig& c, const std::string& v) { c.*member = parse_list(v); },
          [member](const ExperimentConfig& c) { return join(c.*member); }};
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      string_field("name", &ExperimentConfig::name),
      {"dataset",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "mnist") c.dataset = DatasetKind::Mnist;
         else if (v == "cifar10") c.dataset = DatasetKind::Cifar10;
         else throw std::invalid_argument("expected mnist or cifar10, got '" + v + "'");
       },
       [](const ExperimentConfig& c) { return std::string(to_string(c.dataset)); }},
      string_field("data_dir", &ExperimentConfig::data_dir),
      list_field("train_files", &ExperimentConfig::train_files),
      list_field("test_files", &ExperimentConfig::test_files),
      uint_field("n_train", &ExperimentConfig::n_train),
      {"method",
       [](ExperimentConfig& c, const std::string& v) {
         const auto m = parse_method(v);
         if (!m) throw std::invalid_argument("unknown method '" + v + "'");
         c.method = *m;
       },
       [](const ExperimentConfig& c) { return std::string(to_string(c.method)); }},
      double_field("lambda", &ExperimentConfig::lambda),
      double_field("decay", &ExperimentConfig::decay),
      double_field("dropout_rate", &ExperimentConfig::dropout_rate),
      {"reg_ratio",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "auto") c.reg_ratio.reset();
         else c.reg_ratio = parse_uint(v);
       },
       [](const ExperimentConfig& c) { return c.reg_ratio ? std::to_string(*c.reg_ratio) : std::string("auto"); }},
      uint_field("batch_size", &ExperimentConfig::batch_size),
      uint_field("epochs", &ExperimentConfig::epochs),
      {"lr_schedule",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "constant") c.lr_schedule = LrSchedule::Kind::Constant;
         else if (v == "inverse") c.lr_schedule = LrSchedule::Kind::Inverse;
         else throw std::invalid_argument("expected constant or inverse, got '" + v + "'");
       },
       [](const ExperimentConfig& c) { return std::string(to_string(c.lr_schedule)); }},
      double_field("lr", &ExperimentConfig::lr),
      double_field("lr_kappa", &ExperimentConfig::lr_kappa),
      double_field("momentum", &ExperimentConfig::momentum),
      uint_field("seed", &ExperimentConfig::seed),
      string_field("out_dir", &ExperimentConfig::out_dir),
      uint_field("eval_batch", &ExperimentConfig::eval_batch),
      uint_field("eval_every", &ExperimentConfig::eval_every),
      double_field("init_stddev", &ExperimentConfig::init_stddev),
      uint_field("slice_burn_in", &ExperimentConfig::slice_burn_in),
      uint_field("slice_max_stepout", &ExperimentConfig::slice_max_stepout),
      {"slice_step_out", [](ExperimentConfig& c, const std::string& v) { c.slice_step_out = parse_bool(v); },
       [](const ExperimentConfig& c) { return std::string(c.slice_step_out ? "true" : "false"); }},
  };
  return fields;
}

}  // namespace detail

/// Checks value ranges. `lines` maps keys to the line they were read from,
/// so errors can point at it.
inline void validate(const ExperimentConfig& c, const std::map<std::string, std::size_t>& lines = {}) {
  auto fail = [&](const std::string& field, const std::string& what) {
    const auto it = lines.find(field);
    throw ConfigError(field, it == lines.end() ? 0 : it->second, what);
  };
  if (c.name.empty() || c.name.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-") != std::string::npos) {
    fail("name", "must be non-empty and use only letters, digits, '_', '.', '-'");
  }
  if (c.train_files.empty() != c.test_files.empty()) fail(c.train_files.empty() ? "train_files" : "test_files", "train_files and test_files go together");
  if (c.train_files.empty() && c.data_dir.empty()) fail("data_dir", "set data_dir or train_files/test_files");
  if (c.dataset == DatasetKind::Mnist && !c.train_files.empty()) {
    if (c.train_files.size() != 2) fail("train_files", "MNIST needs an image file and a label file");
    if (c.test_files.size() != 2) fail("test_files", "MNIST needs an image file and a label file");
  }
  if (c.n_train == 0) fail("n_train", "must be positive");
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) fail("lambda", "must be finite and nonnegative");
  if (c.lambda != 0.0 && !uses_function_norm(c.method)) fail("lambda", "only function-norm methods use lambda");
  if (!(c.decay >= 0.0) || !std::isfinite(c.decay)) fail("decay", "must be finite and nonnegative");
  if (!(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0)) fail("dropout_rate", "must be in [0, 1)");
  if (c.dropout_rate != 0.0 && c.method != Method::WeightDecayDropout) fail("dropout_rate", "only weight_decay_dropout uses dropout");
  if (c.method == Method::WeightDecayDropout && c.dropout_rate == 0.0) fail("dropout_rate", "weight_decay_dropout needs a positive rate");
  if (c.reg_ratio && *c.reg_ratio == 0) fail("reg_ratio", "must be positive or auto");
  if (c.batch_size < 2) fail("batch_size", "must be at least 2");
  if (c.epochs == 0) fail("epochs", "must be positive");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) fail("lr", "must be positive");
  if (!(c.lr_kappa >= 0.0) || !std::isfinite(c.lr_kappa)) fail("lr_kappa", "must be nonnegative");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) fail("momentum", "must be in [0, 1)");
  if (c.out_dir.empty()) fail("out_dir", "must not be empty");
  if (c.eval_batch == 0) fail("eval_batch", "must be positive");
  if (c.eval_every == 0) fail("eval_every", "must be positive");
  if (!(c.init_stddev > 0.0) || !std::isfinite(c.init_stddev)) fail("init_stddev", "must be positive");
  if (c.slice_max_stepout == 0) fail("slice_max_stepout", "must be positive");
}

/// Parses config text; unknown and repeated keys are errors.
inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig c;
  std::map<std::string, std::size_t> lines;
  std::size_t line_no = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("", line_no, "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto& fields = detail::config_fields();
    const auto field = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return key == f.key; });
    if (field == fields.end()) throw ConfigError(key, line_no, "unknown key");
    if (lines.count(key)) throw ConfigError(key, line_no, "repeated key (first set on line " + std::to_string(lines[key]) + ")");
    lines[key] = line_no;
    try {
      field->parse(c, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(key, line_no, e.what());
    } catch (const std::out_of_range& e) {
      throw ConfigError(key, line_no, e.what());
    }
  }
  validate(c, lines);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  return parse_config(in);
}

/// Resolved config with every key, in a form parse_config reads back.
inline std::string to_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += std::string(f.key) + " = " + f.format(c) + "\n";
  return out;
}

/// Train/test file lists after applying data_dir defaults.
inline std::pair<std::vector<std::string>, std::vector<std::string>> dataset_files(const ExperimentConfig& c) {
  if (!c.train_files.empty()) return {c.train_files, c.test_files};
  const std::filesystem::path dir = c.data_dir;
  if (c.dataset == DatasetKind::Mnist) {
    return {{(dir / "train-images-idx3-ubyte").string(), (dir / "train-labels-idx1-ubyte").string()},
            {(dir / "t10k-images-idx3-ubyte").string(), (dir / "t10k-labels-idx1-ubyte").string()}};
  }
  std::vector<std::string> train;
  for (int i = 1; i <= 5; ++i) train.push_back((dir / ("data_batch_" + std::to_string(i) + ".bin")).string());
  return {train, {(dir / "test_batch.bin").string()}};
}

/// Seeds derived from the config seed for the independent parts of a run.
struct RunSeeds {
  std::uint64_t split;
  std::uint64_t init;
  std::uint64_t source;
  std::uint64_t trainer;
};

inline RunSeeds derive_seeds(std::uint64_t seed) {
  Rng root(seed);
  RunSeeds s{};
  s.split = root.engine()();
  s.init = root.engine()();
  s.source = root.engine()();
  s.trainer = root.engine()();
  return s;
}

/// Loaded and split data for one (dataset, n_train, seed) combination.
template <typename T>
struct ExperimentData {
  LabeledDataset<T> train;
  LabeledDataset<T> test;
  UnlabeledPool<T> pool;
  std::vector<std::string> provenance;
};

template <typename T>
ExperimentData<T> load_experiment_data(const ExperimentConfig& c) {
  const auto [train_files, test_files] = dataset_files(c);
  LabeledDataset<T> full, test;
  if (c.dataset == DatasetKind::Mnist) {
    full = load_mnist_idx<T>(train_files[0], train_files[1]);
  } else {
    full = load_cifar10_bin<T>({train_files.begin(), train_files.end()});
  }
  NormalizeOptions with_train_mean;
  with_train_mean.mean_image = std::vector<double>(full.mean_image.values().begin(), full.mean_image.values().end());
  if (c.dataset == DatasetKind::Mnist) {
    test = load_mnist_idx<T>(test_files[0], test_files[1], with_train_mean);
  } else {
    test = load_cifar10_bin<T>({test_files.begin(), test_files.end()}, with_train_mean);
  }
  if (c.n_train > full.size()) {
    throw ConfigError("n_train", 0, std::to_string(c.n_train) + " exceeds the " + std::to_string(full.size()) + " training images");
  }
  ExperimentData<T> data;
  data.provenance = full.provenance;
  data.provenance.insert(data.provenance.end(), test.provenance.begin(), test.provenance.end());
  auto parts = split(full, SplitSpec{c.n_train, derive_seeds(c.seed).split, true});
  data.train = std::move(parts.train);
  data.pool = std::move(parts.reg_pool);
  data.test = std::move(test);
  return data;
}

struct RunResult {
  ExperimentConfig config;
  std::vector<EpochReport> history;
  /// Test metrics after the last completed (or failed) epoch.
  EvalResult final;
  std::size_t n_train = 0;
  std::size_t n_reg = 0;
  bool diverged = false;
  std::string failure;
  std::vector<std::string> provenance;

  double accuracy_pct() const { return 100.0 * (1.0 - final.top1); }
  double top5_accuracy_pct() const { return 100.0 * (1.0 - final.top5); }
  /// Training wall time per completed epoch.
  double seconds_per_epoch() const {
    return history.empty() ? 0.0 : history.back().elapsed / static_cast<double>(history.size());
  }
};

/// Trains one configuration on already-loaded data. Divergence ends the run
/// early and is reported in the result instead of thrown; the final metrics
/// then describe the network at the point of failure.
template <typename T>
RunResult run_experiment(const ExperimentConfig& c, const ExperimentData<T>& data,
                         const std::function<void(const EpochReport&)>& progress = {}) {
  validate(c);
  const RunSeeds seeds = derive_seeds(c.seed);
  Rng init_rng(seeds.init);
  LeNetOptions net_options;
  net_options.dataset = c.dataset;
  net_options.init_stddev = c.init_stddev;
  const RegularizerSpec reg{c.method, c.lambda, c.decay, c.dropout_rate, c.reg_ratio};
  net_options.dropout_rate = reg.effective_dropout();
  Network<T> net = build_lenet<T>(net_options, init_rng);

  TrainConfig tc;
  tc.batch_size = c.batch_size;
  tc.epochs = c.epochs;
  tc.lr = {c.lr_schedule, c.lr, c.lr_kappa};
  tc.momentum = c.momentum;
  tc.reg = reg;
  tc.seed = seeds.trainer;
  tc.eval_batch = c.eval_batch;

  std::unique_ptr<RegSource<T>> source;
  const bool fn_norm = uses_function_norm(c.method) && !data.pool.empty();
  if (fn_norm && c.method == Method::FnNormDataDist) source = std::make_unique<PoolSource<T>>(data.pool, seeds.source);
  if (fn_norm && c.method == Method::FnNormSlice) {
    SliceConfig sc = slice_config_from_data(data.pool.images, seeds.source, c.slice_burn_in, c.slice_max_stepout);
    sc.step_out = c.slice_step_out;
    source = std::make_unique<SliceSource<T>>(net.strip_loss(), std::move(sc), data.pool);
  }
  Trainer<T> trainer(net, tc, source.get(), fn_norm ? data.pool.size() : 0);

  RunResult result;
  result.config = c;
  result.n_train = data.train.size();
  result.n_reg = data.pool.size();
  result.provenance = data.provenance;
  try {
    for (std::size_t e = 1; e <= c.epochs; ++e) {
      const bool eval = e % c.eval_every == 0 || e == c.epochs;
      const EpochReport r = trainer.train_epoch(data.train, eval ? &data.test : nullptr);
      result.history.push_back(r);
      if (progress) progress(r);
    }
    const auto& last = result.history.back();
    result.final = {last.top1, last.top5, last.test_loss};
  } catch (const DivergenceError& e) {
    result.diverged = true;
    result.failure = e.what();
    result.final = evaluate(trainer.network(), data.test, c.eval_batch);
  }
  return result;
}

namespace detail {

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.close();
  if (!out) throw IoError("cannot write " + path.string());
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

}  // namespace detail

inline constexpr const char* kMetricsHeader = "epoch,train_loss,penalty,top1_test,top5_test,grad_norm,seconds";

/// Per-epoch metrics; `seconds` is cumulative training wall time.
inline std::string metrics_csv(const std::vector<EpochReport>& history) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + detail::csv_number(r.train_loss) + "," + detail::csv_number(r.penalty) + "," +
           detail::csv_number(r.top1) + "," + detail::csv_number(r.top5) + "," + detail::csv_number(r.grad_norm) + "," +
           detail::csv_number(r.elapsed) + "\n";
  }
  return out;
}

inline constexpr const char* kSummaryHeader =
    "name,method,n_train,n_reg,lambda,epochs_completed,accuracy_pct,top5_accuracy_pct,test_loss,status,train_seconds";

inline std::string summary_row(const RunResult& r) {
  return r.config.name + "," + to_string(r.config.method) + "," + std::to_string(r.n_train) + "," + std::to_string(r.n_reg) + "," +
         detail::format_double(r.config.lambda) + "," + std::to_string(r.history.size()) + "," + detail::fixed2(r.accuracy_pct()) + "," +
         detail::fixed2(r.top5_accuracy_pct()) + "," + detail::csv_number(r.final.loss) + "," + (r.diverged ? "diverged" : "ok") + "," +
         detail::csv_number(r.history.empty() ? 0.0 : r.history.back().elapsed) + "\n";
}

/// metrics.csv, summary.csv, config.txt and provenance.txt under `dir`.
inline void write_run_artifacts(const std::filesystem::path& dir, const RunResult& r) {
  detail::ensure_dir(dir);
  detail::write_text(dir / "metrics.csv", metrics_csv(r.history));
  detail::write_text(dir / "summary.csv", std::string(kSummaryHeader) + "\n" + summary_row(r));
  detail::write_text(dir / "config.txt", to_text(r.config));
  std::string prov = "seed = " + std::to_string(r.config.seed) + "\n";
  for (const auto& p : r.provenance) prov += "file = " + p + "\n";
  if (r.diverged) prov += "failure = " + r.failure + "\n";
  detail::write_text(dir / "provenance.txt", prov);
}

/// Runs the base config once per lambda into `out/lambda_<value>/` and
/// writes `out/sweep.csv`. Diverged runs are rows, not errors.
template <typename T>
std::vector<RunResult> run_sweep(const ExperimentConfig& base, const std::vector<double>& lambdas, const std::filesystem::path& out,
                                 const std::function<void(const ExperimentConfig&, const EpochReport&)>& progress = {}) {
  if (lambdas.empty()) throw ConfigError("lambda-list", 0, "needs at least one value");
  if (!uses_function_norm(base.method)) throw ConfigError("method", 0, "a lambda sweep needs a function-norm method");
  for (double l : lambdas) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("lambda-list", 0, "values must be finite and nonnegative");
  }
  const auto data = load_experiment_data<T>(base);
  detail::ensure_dir(out);
  std::vector<RunResult> results;
  std::string table = "lambda,accuracy_pct,top5_accuracy_pct,status,epochs_completed\n";
  for (double l : lambdas) {
    ExperimentConfig c = base;
    c.lambda = l;
    c.name = base.name + "_lambda_" + detail::format_double(l);
    c.out_dir = (out / ("lambda_" + detail::format_double(l))).string();
    auto r = run_experiment<T>(c, data, [&](const EpochReport& e) {
      if (progress) progress(c, e);
    });
    write_run_artifacts(c.out_dir, r);
    table += detail::format_double(l) + "," + detail::fixed2(r.accuracy_pct()) + "," + detail::fixed2(r.top5_accuracy_pct()) + "," +
             (r.diverged ? "diverged" : "ok") + "," + std::to_string(r.history.size()) + "\n";
    detail::write_text(out / "sweep.csv", table);
    results.push_back(std::move(r));
  }
  return results;
}

/// Runs several configs on one shared split, each into `out/<name>/`, then
/// writes aligned test-error curves by epoch and by wall time plus a
/// one-row accuracy table in the order given.
template <typename T>
std::vector<RunResult> run_compare(const std::vector<ExperimentConfig>& configs, const std::filesystem::path& out,
                                   const std::function<void(const ExperimentConfig&, const EpochReport&)>& progress = {}) {
  if (configs.empty()) throw ConfigError("config", 0, "compare needs at least one config");
  const ExperimentConfig& first = configs.front();
  for (std::size_t i = 1; i < configs.size(); ++i) {
    const auto& c = configs[i];
    auto mismatch = [&](const char* field) {
      throw ConfigError(field, 0, "config '" + c.name + "' differs from '" + first.name + "'; compared runs must share it");
    };
    if (c.dataset != first.dataset) mismatch("dataset");
    if (dataset_files(c) != dataset_files(first)) mismatch("data_dir");
    if (c.n_train != first.n_train) mismatch("n_train");
    if (c.seed != first.seed) mismatch("seed");
    for (std::size_t j = 0; j < i; ++j) {
      if (configs[j].name == c.name) throw ConfigError("name", 0, "two compared configs are both named '" + c.name + "'");
    }
  }
  const auto data = load_experiment_data<T>(first);
  detail::ensure_dir(out);
  std::vector<RunResult> results;
  for (auto c : configs) {
    c.out_dir = (out / c.name).string();
    auto r = run_experiment<T>(c, data, [&](const EpochReport& e) {
      if (progress) progress(c, e);
    });
    write_run_artifacts(c.out_dir, r);
    results.push_back(std::move(r));
  }

  std::size_t max_epochs = 0;
  for (const auto& r : results) max_epochs = std::max(max_epochs, r.history.size());
  std::string by_epoch = "epoch";
  for (const auto& r : results) by_epoch += "," + r.config.name;
  by_epoch += "\n";
  for (std::size_t e = 0; e < max_epochs; ++e) {
    by_epoch += std::to_string(e + 1);
    for (const auto& r : results) by_epoch += "," + (e < r.history.size() ? detail::csv_number(r.history[e].top1) : std::string("nan"));
    by_epoch += "\n";
  }
  std::string by_time = "name,seconds,top1_test\n";
  for (const auto& r : results) {
    for (const auto& h : r.history) by_time += r.config.name + "," + detail::csv_number(h.elapsed) + "," + detail::csv_number(h.top1) + "\n";
  }
  std::string table = "n_train,n_reg";
  for (const auto& r : results) table += "," + r.config.name;
  table += "\n" + std::to_string(results.front().n_train) + "," + std::to_string(results.front().n_reg);
  for (const auto& r : results) table += "," + detail::fixed2(r.accuracy_pct());
  table += "\n";
  std::string summary = std::string(kSummaryHeader) + "\n";
  for (const auto& r : results) summary += summary_row(r);

  detail::write_text(out / "curves_by_epoch.csv", by_epoch);
  detail::write_text(out / "curves_by_time.csv", by_time);
  detail::write_text(out / "table.csv", table);
  detail::write_text(out / "summary.csv", summary);
  return results;
}

}  // namespace fnreg
