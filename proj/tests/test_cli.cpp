#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fnreg/experiment.hpp"

namespace fnreg {
namespace {

namespace fs = std::filesystem;

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

// Class c lights up a 6x6 block whose position depends on c, over noise.
void write_mnist_like(const fs::path& dir, const std::string& prefix, std::uint32_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint8_t> images, labels;
  put_be32(images, kIdxImageMagic);
  put_be32(images, count);
  put_be32(images, 28);
  put_be32(images, 28);
  put_be32(labels, kIdxLabelMagic);
  put_be32(labels, count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t c = i % 10;
    labels.push_back(static_cast<std::uint8_t>(c));
    for (std::size_t r = 0; r < 28; ++r) {
      for (std::size_t k = 0; k < 28; ++k) {
        const bool on = r >= 2 + (c / 5) * 12 && r < 8 + (c / 5) * 12 && k >= 1 + (c % 5) * 5 && k < 6 + (c % 5) * 5;
        images.push_back(static_cast<std::uint8_t>(on ? 200 + rng.index(56) : rng.index(40)));
      }
    }
  }
  write_bytes(dir / (prefix + "-images-idx3-ubyte"), images);
  write_bytes(dir / (prefix + "-labels-idx1-ubyte"), labels);
}

void write_cifar_like(const fs::path& path, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint8_t> bytes;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = i % 10;
    bytes.push_back(static_cast<std::uint8_t>(c));
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t p = 0; p < 1024; ++p) {
        const std::size_t base = 20 * c + 40 * ch;
        bytes.push_back(static_cast<std::uint8_t>(std::min<std::size_t>(255, base + rng.index(30))));
      }
    }
  }
  write_bytes(path, bytes);
}

class Workspace : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("fnreg_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_ / "mnist");
    write_mnist_like(dir_ / "mnist", "train", 300, 1);
    write_mnist_like(dir_ / "mnist", "t10k", 100, 2);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Defaults for a fast run; keys set in `extra` replace them.
  std::string base_config(const std::string& extra = "") const {
    const std::string defaults = "data_dir = " + (dir_ / "mnist").string() +
                                 "\nn_train = 40\nepochs = 3\nbatch_size = 20\nlr = 0.05\neval_batch = 50\n";
    std::string out;
    std::istringstream in(defaults);
    for (std::string line; std::getline(in, line);) {
      if (extra.find(line.substr(0, line.find(' ')) + " =") == std::string::npos) out += line + "\n";
    }
    return out + extra;
  }

  fs::path write_config(const std::string& name, const std::string& text) const {
    const auto path = dir_ / name;
    std::ofstream(path) << text;
    return path;
  }

  int cli(const std::string& args) const {
    const std::string cmd = std::string(FNREG_CLI_PATH) + " " + args + " > " + (dir_ / "stdout.txt").string() + " 2> " +
                            (dir_ / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string stderr_text() const { return read(dir_ / "stderr.txt"); }

  static std::string read(const fs::path& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  // CSV rows with the last column (wall time) removed.
  static std::vector<std::string> without_last_column(const std::string& csv) {
    std::vector<std::string> rows;
    std::istringstream in(csv);
    for (std::string line; std::getline(in, line);) rows.push_back(line.substr(0, line.rfind(',')));
    return rows;
  }

  static std::vector<double> column(const std::string& csv, std::size_t index) {
    std::vector<double> values;
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::istringstream row(line);
      std::string cell;
      for (std::size_t i = 0; i <= index; ++i) std::getline(row, cell, ',');
      values.push_back(std::stod(cell));
    }
    return values;
  }

  fs::path dir_;
};

TEST(Config, RoundTripsThroughText) {
  ExperimentConfig c;
  c.name = "x-1";
  c.dataset = DatasetKind::Cifar10;
  c.train_files = {"a.bin", "b.bin"};
  c.test_files = {"t.bin"};
  c.n_train = 500;
  c.method = Method::FnNormSlice;
  c.lambda = 5e-6;
  c.decay = 0.1 + 0.2;
  c.reg_ratio = 40;
  c.lr_schedule = LrSchedule::Kind::Inverse;
  c.lr_kappa = 1e-4;
  c.seed = 18446744073709551615ull;
  c.slice_step_out = false;
  const auto parsed = parse_config(to_text(c));
  EXPECT_EQ(parsed, c);
  EXPECT_EQ(to_text(parsed), to_text(c));
}

TEST(Config, CommentsBlankLinesAndDefaults) {
  const auto c = parse_config("# comment\n\n  data_dir =  /data  \nmethod=fn_norm_data\nlambda = 0.5\n");
  EXPECT_EQ(c.data_dir, "/data");
  EXPECT_EQ(c.method, Method::FnNormDataDist);
  EXPECT_EQ(c.lambda, 0.5);
  EXPECT_EQ(c.epochs, ExperimentConfig{}.epochs);
  EXPECT_FALSE(c.reg_ratio.has_value());
}

void expect_config_error(const std::string& text, const std::string& field, std::size_t line) {
  try {
    parse_config(text);
    ADD_FAILURE() << "accepted: " << text;
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), field) << e.what();
    EXPECT_EQ(e.line(), line) << e.what();
  }
}

TEST(Config, ErrorsNameFieldAndLine) {
  expect_config_error("data_dir = d\nlamda = 1\n", "lamda", 2);
  expect_config_error("data_dir = d\n\nepochs = ten\n", "epochs", 3);
  expect_config_error("data_dir = d\nepochs = -3\n", "epochs", 2);
  expect_config_error("data_dir = d\nepochs = 0\n", "epochs", 2);
  expect_config_error("data_dir = d\nmethod = l2\n", "method", 2);
  expect_config_error("data_dir = d\nseed = 1\nseed = 2\n", "seed", 3);
  expect_config_error("data_dir = d\njust words\n", "", 2);
  expect_config_error("data_dir = d\nlambda = 0.1\n", "lambda", 2);
  expect_config_error("data_dir = d\nmethod = weight_decay_dropout\n", "dropout_rate", 0);
  expect_config_error("data_dir = d\ndropout_rate = 0.5\n", "dropout_rate", 2);
  expect_config_error("data_dir = d\nmomentum = 1\n", "momentum", 2);
  expect_config_error("data_dir = d\nslice_step_out = yes\n", "slice_step_out", 2);
  expect_config_error("data_dir = d\nname = a/b\n", "name", 2);
  expect_config_error("n_train = 5\n", "data_dir", 0);
  expect_config_error("train_files = a,b\n", "test_files", 0);
  expect_config_error("train_files = a\ntest_files = b,c\n", "train_files", 1);
}

TEST(Metrics, HeaderIsFixed) {
  EXPECT_EQ(metrics_csv({}), "epoch,train_loss,penalty,top1_test,top5_test,grad_norm,seconds\n");
}

TEST_F(Workspace, RunWritesArtifactsAndIsDeterministic) {
  const auto cfg = write_config("a.cfg", base_config("method = fn_norm_data\nlambda = 0.1\nreg_ratio = 3\n"));
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir_ / "r1").string()), 0) << stderr_text();
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir_ / "r2").string()), 0) << stderr_text();
  for (const char* f : {"metrics.csv", "summary.csv", "config.txt", "provenance.txt"}) EXPECT_TRUE(fs::exists(dir_ / "r1" / f)) << f;

  const auto m1 = read(dir_ / "r1" / "metrics.csv"), m2 = read(dir_ / "r2" / "metrics.csv");
  EXPECT_EQ(m1.substr(0, m1.find('\n')), kMetricsHeader);
  EXPECT_EQ(without_last_column(m1), without_last_column(m2));
  const auto seconds = column(m1, 6);
  ASSERT_EQ(seconds.size(), 3u);
  for (std::size_t i = 1; i < seconds.size(); ++i) EXPECT_GE(seconds[i], seconds[i - 1]);

  const auto resolved = parse_config(read(dir_ / "r1" / "config.txt"));
  EXPECT_EQ(resolved.out_dir, (dir_ / "r1").string());
  EXPECT_EQ(resolved.lambda, 0.1);
  const auto prov = read(dir_ / "r1" / "provenance.txt");
  EXPECT_NE(prov.find("seed = 1"), std::string::npos);
  EXPECT_NE(prov.find("train-images-idx3-ubyte "), std::string::npos);
  EXPECT_NE(read(dir_ / "r1" / "summary.csv").find(",ok,"), std::string::npos);
}

TEST_F(Workspace, SeedFlagOverridesConfig) {
  const auto cfg = write_config("a.cfg", base_config());
  ASSERT_EQ(cli("run --config " + cfg.string() + " --seed 7 --out " + (dir_ / "r").string()), 0) << stderr_text();
  EXPECT_EQ(parse_config(read(dir_ / "r" / "config.txt")).seed, 7u);
}

TEST_F(Workspace, ExitCodes) {
  EXPECT_EQ(cli("run --config " + write_config("zero.cfg", base_config("epochs = 0\n")).string()), 2);
  EXPECT_NE(stderr_text().find("'epochs'"), std::string::npos);
  EXPECT_EQ(cli("run --config " + (dir_ / "missing.cfg").string()), 4);
  EXPECT_EQ(cli("run"), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
  EXPECT_EQ(cli("run --config " + write_config("nodata.cfg", "data_dir = " + (dir_ / "nope").string() + "\n").string()), 4);
  EXPECT_EQ(cli("run --config " + write_config("big.cfg", base_config("n_train = 301\n")).string()), 2);

  const auto diverge = write_config("div.cfg", base_config("method = fn_norm_data\nlambda = 1000\nlr = 1000\nmomentum = 0\n"));
  EXPECT_EQ(cli("run --config " + diverge.string() + " --out " + (dir_ / "d").string()), 3);
  EXPECT_NE(read(dir_ / "d" / "summary.csv").find(",diverged,"), std::string::npos);
}

TEST_F(Workspace, SweepRecordsDivergenceAsARow) {
  const auto cfg = write_config("s.cfg", base_config("method = fn_norm_data\nlr = 1000\nmomentum = 0\n"));
  ASSERT_EQ(cli("sweep --config " + cfg.string() + " --lambda-list 1000,0 --out " + (dir_ / "s").string()), 0) << stderr_text();
  const auto table = read(dir_ / "s" / "sweep.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), "lambda,accuracy_pct,top5_accuracy_pct,status,epochs_completed");
  EXPECT_NE(table.find("\n1000,"), std::string::npos);
  EXPECT_NE(table.find(",diverged,"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "s" / "lambda_1000" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "s" / "lambda_0" / "metrics.csv"));
}

TEST_F(Workspace, SingleLambdaSweepMatchesRun) {
  const auto cfg = write_config("s.cfg", base_config("method = fn_norm_data\nlambda = 0.3\n"));
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir_ / "r").string()), 0) << stderr_text();
  ASSERT_EQ(cli("sweep --config " + cfg.string() + " --lambda-list 0.3 --out " + (dir_ / "s").string()), 0) << stderr_text();
  EXPECT_EQ(without_last_column(read(dir_ / "r" / "metrics.csv")), without_last_column(read(dir_ / "s" / "lambda_0.3" / "metrics.csv")));
  EXPECT_EQ(cli("sweep --config " + write_config("wd.cfg", base_config()).string() + " --lambda-list 1"), 2);
}

TEST_F(Workspace, CompareWritesAlignedCurvesAndTable) {
  const auto wd = write_config("wd.cfg", base_config("name = wd\n"));
  const auto fn = write_config("fn.cfg", base_config("name = fn\nmethod = fn_norm_data\nlambda = 0.1\nepochs = 2\n"));
  ASSERT_EQ(cli("compare --config " + wd.string() + " --config " + fn.string() + " --out " + (dir_ / "c").string()), 0)
      << stderr_text();
  const auto curves = read(dir_ / "c" / "curves_by_epoch.csv");
  EXPECT_EQ(curves.substr(0, curves.find('\n')), "epoch,wd,fn");
  EXPECT_NE(curves.find("\n3,"), std::string::npos);
  EXPECT_NE(curves.find(",nan\n"), std::string::npos);
  const auto table = read(dir_ / "c" / "table.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), "n_train,n_reg,wd,fn");
  EXPECT_EQ(table.substr(table.find('\n') + 1, 7), "40,260,");
  EXPECT_EQ(read(dir_ / "c" / "curves_by_time.csv").substr(0, 23), "name,seconds,top1_test\n");

  // A single config reproduces the plain run.
  ASSERT_EQ(cli("compare --config " + wd.string() + " --out " + (dir_ / "c1").string()), 0);
  ASSERT_EQ(cli("run --config " + wd.string() + " --out " + (dir_ / "r").string()), 0);
  EXPECT_EQ(without_last_column(read(dir_ / "c1" / "wd" / "metrics.csv")), without_last_column(read(dir_ / "r" / "metrics.csv")));
}

TEST_F(Workspace, CompareRejectsMismatchedSharedFields) {
  const auto a = write_config("a.cfg", base_config("name = a\n"));
  const auto b = write_config("b.cfg", base_config("name = b\nn_train = 50\n"));
  EXPECT_EQ(cli("compare --config " + a.string() + " --config " + b.string() + " --out " + (dir_ / "c").string()), 2);
  EXPECT_NE(stderr_text().find("'n_train'"), std::string::npos);
  EXPECT_EQ(cli("compare --config " + a.string() + " --config " + a.string()), 2);
}

TEST_F(Workspace, CifarSmokeRun) {
  fs::create_directories(dir_ / "cifar");
  for (int i = 1; i <= 5; ++i) write_cifar_like(dir_ / "cifar" / ("data_batch_" + std::to_string(i) + ".bin"), 120, i);
  write_cifar_like(dir_ / "cifar" / "test_batch.bin", 100, 9);
  for (const char* method : {"weight_decay", "fn_norm_slice"}) {
    const auto cfg = write_config("c.cfg", "dataset = cifar10\ndata_dir = " + (dir_ / "cifar").string() + "\nn_train = 500\nepochs = 2\nmethod = " +
                                               method + (std::string(method) == "weight_decay" ? "" : "\nlambda = 0.05\nslice_burn_in = 2") + "\n");
    ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir_ / method).string()), 0) << stderr_text();
    EXPECT_EQ(column(read(dir_ / method / "metrics.csv"), 0).size(), 2u);
    EXPECT_NE(read(dir_ / method / "summary.csv").find(",500,100,"), std::string::npos);
  }
}

}  // namespace
}  // namespace fnreg
