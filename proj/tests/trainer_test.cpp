#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "rala/errors.hpp"
#include "rala/rng.hpp"
#include "rala/trainer.hpp"

namespace {

using rala::Matrix;
using namespace rala::trainer;
namespace la = rala::linalg;
namespace fs = std::filesystem;

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / ("rala_trainer_test_" + name)).string();
}

std::string read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Solves a x = b for square a by Gaussian elimination with partial pivoting; b has many columns.
Matrix solve(Matrix a, Matrix b) {
  const std::size_t n = a.rows();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(piv, c))) piv = r;
    for (std::size_t k = 0; k < n; ++k) std::swap(a(c, k), a(piv, k));
    for (std::size_t k = 0; k < b.cols(); ++k) std::swap(b(c, k), b(piv, k));
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a(r, c) / a(c, c);
      for (std::size_t k = c; k < n; ++k) a(r, k) -= f * a(c, k);
      for (std::size_t k = 0; k < b.cols(); ++k) b(r, k) -= f * b(c, k);
    }
  }
  Matrix x(n, b.cols());
  for (std::size_t r = n; r-- > 0;)
    for (std::size_t k = 0; k < b.cols(); ++k) {
      double s = b(r, k);
      for (std::size_t j = r + 1; j < n; ++j) s -= a(r, j) * x(j, k);
      x(r, k) = s / a(r, r);
    }
  return x;
}

Matrix flatten(const Dataset& d) {
  const std::size_t p = d.images[0].size();
  Matrix x(d.images.size(), p + 1);
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    for (std::size_t j = 0; j < p; ++j) x(i, j) = d.images[i].data()[j];
    x(i, p) = 1.0;
  }
  return x;
}

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 2;
  c.n_samples = 20;
  c.batch_size = 8;
  c.warmup_epochs = 1;
  c.seed = 3;
  return c;
}

// ---------------------------------------------------------------------------

TEST(SynthDataset, SameSeedSameBytes) {
  const Dataset a = synth_dataset(5, 12, 3, 32), b = synth_dataset(5, 12, 3, 32);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(synth_dataset(6, 12, 3, 32).images, a.images);
}

TEST(SynthDataset, NoiselessSamplesOfAClassAreIdentical) {
  const Dataset d = synth_dataset(1, 12, 4, 32, 0.0);
  for (std::size_t i = 0; i < d.images.size(); ++i)
    for (std::size_t j = i + 1; j < d.images.size(); ++j)
      if (d.labels[i] == d.labels[j]) {
        EXPECT_EQ(d.images[i], d.images[j]);
      } else {
        EXPECT_NE(d.images[i], d.images[j]);
      }
}

TEST(SynthDataset, BalancedAndShaped) {
  const Dataset d = synth_dataset(2, 25, 10, 64);
  std::vector<std::size_t> counts(10);
  for (std::size_t l : d.labels) ++counts[l];
  for (std::size_t c : counts) EXPECT_TRUE(c == 2 || c == 3);
  EXPECT_EQ(d.images[0].rows(), 64u * 64u);
  EXPECT_EQ(d.images[0].cols(), 3u);
}

TEST(SynthDataset, InvalidSizes) {
  EXPECT_THROW(synth_dataset(0, 10, 1, 32), rala::ArgumentError);
  EXPECT_THROW(synth_dataset(0, 10, 3, 48), rala::ArgumentError);
  EXPECT_THROW(synth_dataset(0, 0, 3, 32), rala::ArgumentError);
}

TEST(SynthDataset, LinearProbeSeparatesClasses) {
  // Ridge regression onto one-hot targets in dual form, scored on held-out samples.
  const Dataset train = synth_dataset(9, 200, 10, 32, 0.1);
  Dataset test = synth_dataset(9, 300, 10, 32, 0.1);
  test.images.erase(test.images.begin(), test.images.begin() + 200);
  test.labels.erase(test.labels.begin(), test.labels.begin() + 200);
  const Matrix x = flatten(train), xt = flatten(test);
  Matrix gram = la::matmul(x, la::transpose(x));
  for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) += 1e-3 * static_cast<double>(x.cols());
  Matrix y(train.labels.size(), 10);
  for (std::size_t i = 0; i < train.labels.size(); ++i) y(i, train.labels[i]) = 1.0;
  const Matrix scores = la::matmul(la::matmul(xt, la::transpose(x)), solve(gram, y));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 10; ++k)
      if (scores(i, k) > scores(i, best)) best = k;
    correct += best == test.labels[i];
  }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(test.labels.size()), 0.99);
}

TEST(Adam, ZeroGradientZeroDecayLeavesWeights) {
  rala::CounterRng rng(1);
  std::vector<Matrix> w{rng.normal_matrix(3, 4), rng.normal_matrix(1, 4)};
  const auto before = w;
  AdamState s;
  for (std::size_t t = 1; t <= 3; ++t) adam_step(w, {Matrix(3, 4), Matrix(1, 4)}, s, AdamHyper{}, t);
  EXPECT_EQ(w, before);
}

TEST(Adam, FirstStepIsSignStep) {
  std::vector<Matrix> w{Matrix{{1.0, -2.0, 0.5}}};
  AdamState s;
  adam_step(w, {Matrix{{1e3, -5e2, 2e4}}}, s, AdamHyper{0.01}, 1);
  EXPECT_NEAR(w[0](0, 0), 1.0 - 0.01, 1e-12);
  EXPECT_NEAR(w[0](0, 1), -2.0 + 0.01, 1e-12);
  EXPECT_NEAR(w[0](0, 2), 0.5 - 0.01, 1e-12);
}

TEST(Adam, QuadraticDecreasesMonotonicallyAndMatchesScalarSimulation) {
  std::vector<Matrix> w{Matrix{{1.0}}};
  AdamState s;
  double m = 0, v = 0, x = 1.0, prev = 1.0;
  for (std::size_t t = 1; t <= 10; ++t) {
    const double g = 2.0 * w[0](0, 0);
    adam_step(w, {Matrix{{g}}}, s, AdamHyper{0.1}, t);
    m = 0.9 * m + 0.1 * (2 * x);
    v = 0.999 * v + 0.001 * (2 * x) * (2 * x);
    x -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(w[0](0, 0), x, 1e-14);
    EXPECT_LT(std::abs(w[0](0, 0)), prev);
    prev = std::abs(w[0](0, 0));
  }
}

TEST(Adam, DecoupledDecayFollowsMask) {
  std::vector<Matrix> w{Matrix{{2.0}}, Matrix{{2.0}}};
  AdamState s;
  adam_step(w, {Matrix{{0.0}}, Matrix{{0.0}}}, s, AdamHyper{0.1, 0.9, 0.999, 1e-8, 0.5}, 1, {true, false});
  EXPECT_DOUBLE_EQ(w[0](0, 0), 2.0 - 0.1 * 0.5 * 2.0);
  EXPECT_EQ(w[1](0, 0), 2.0);
}

TEST(Adam, Errors) {
  std::vector<Matrix> w{Matrix(2, 2)};
  AdamState s;
  EXPECT_THROW(adam_step(w, {Matrix(2, 3)}, s, AdamHyper{}, 1), rala::DimensionError);
  EXPECT_THROW(adam_step(w, {}, s, AdamHyper{}, 1), rala::DimensionError);
  EXPECT_THROW(adam_step(w, {Matrix(2, 2)}, s, AdamHyper{}, 0), rala::ArgumentError);
}

TEST(Schedule, WarmupThenCosineToZero) {
  const double base = 1e-3;
  EXPECT_DOUBLE_EQ(learning_rate(0, 200, 5, base), base / 5);
  EXPECT_DOUBLE_EQ(learning_rate(4, 200, 5, base), base);
  EXPECT_LE(learning_rate(199, 200, 5, base), 1e-3 * base);
  for (std::size_t e = 1; e < 5; ++e) EXPECT_GT(learning_rate(e, 200, 5, base), learning_rate(e - 1, 200, 5, base));
  for (std::size_t e = 6; e < 200; ++e) EXPECT_LT(learning_rate(e, 200, 5, base), learning_rate(e - 1, 200, 5, base));
}

// ---------------------------------------------------------------------------

TEST(Train, ZeroLearningRateKeepsLossConstant) {
  TrainConfig c = small_config();
  c.base_lr = 0.0;
  c.epochs = 3;
  const TrainResult r = train_loop(c);
  ASSERT_EQ(r.history.size(), 3u);
  for (const auto& m : r.history) EXPECT_NEAR(m.loss, r.history[0].loss, 1e-12);
}

TEST(Train, SameConfigSameHistory) {
  const TrainConfig c = small_config();
  const TrainResult a = train_loop(c), b = train_loop(c);
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(a.model.params, b.model.params);
}

TEST(Train, ThreadCountDoesNotChangeResults) {
  TrainConfig c = small_config();
  c.epochs = 1;
  const TrainResult a = train_loop(c);
  c.threads = 3;
  const TrainResult b = train_loop(c);
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(a.model.params, b.model.params);
}

TEST(Train, LossDecreasesOnEasyData) {
  TrainConfig c = small_config();
  c.epochs = 4;
  c.n_samples = 30;
  const TrainResult r = train_loop(c);
  EXPECT_LT(r.history.back().loss, r.history.front().loss);
}

TEST(Train, AblatedVariantRuns) {
  TrainConfig c = small_config();
  auto m = rala::backbone::preset("toy");
  m.kv_augment = false;
  m.out_augment = false;
  c.model = m;
  const TrainResult r = train_loop(c);
  EXPECT_EQ(r.history.size(), 2u);
  EXPECT_TRUE(std::isfinite(r.history.back().loss));
}

TEST(Train, NonFiniteLossAbortsWithEpoch) {
  TrainConfig c = small_config();
  auto model = rala::backbone::init_model(rala::backbone::preset("toy"), 0);
  Dataset d = synth_dataset(0, 4, 10, 64);
  d.images[2](0, 0) = std::nan("");
  try {
    train_model(model, d, c);
    FAIL() << "expected NumericalError";
  } catch (const rala::NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
  }
}

TEST(Train, EarlyStopAtTarget) {
  TrainConfig c = small_config();
  c.epochs = 20;
  c.n_samples = 60;
  c.warmup_epochs = 5;
  c.target_accuracy = 0.5;
  const TrainResult r = train_loop(c);
  EXPECT_TRUE(r.reached_target);
  EXPECT_LT(r.history.size(), 20u);
  EXPECT_GE(r.history.back().accuracy, 0.5);
}

TEST(Train, MetricsCsv) {
  const std::vector<EpochMetrics> h{{1, 2.5, 0.25, 0.001}, {2, 1.5, 0.5, 0.0005}};
  EXPECT_EQ(metrics_csv(h), "epoch,loss,accuracy,lr\n1,2.5,0.25,0.001\n2,1.5,0.5,5e-04\n");
}

TEST(Train, ConfigJsonRoundTripAndErrors) {
  TrainConfig c = small_config();
  c.model = rala::backbone::preset("toy");
  const TrainConfig back = train_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"epoch", 3}}), rala::FormatError);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"epochs", 0}}), rala::ArgumentError);
}

// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTripForwardWithinSinglePrecision) {
  const auto model = rala::backbone::init_model(rala::backbone::preset("toy"), 12);
  const std::string path = temp_path("roundtrip.bin");
  save_checkpoint(model, {{"accuracy", 0.75}}, path);
  const Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.model.config, model.config);
  EXPECT_EQ(ck.metrics["accuracy"], 0.75);
  const Dataset d = synth_dataset(1, 3, 10, 64);
  for (const Matrix& img : d.images) {
    const Matrix a = rala::backbone::model_forward(model, img);
    const Matrix b = rala::backbone::model_forward(ck.model, img);
    EXPECT_LE(la::max_abs_diff(a, b) / la::max_abs(a), 1e-6);
  }
  fs::remove(path);
}

TEST(Checkpoint, SaveIsDeterministic) {
  const auto model = rala::backbone::init_model(rala::backbone::preset("toy"), 1);
  const std::string a = temp_path("det_a.bin"), b = temp_path("det_b.bin");
  save_checkpoint(model, {}, a);
  save_checkpoint(model, {}, b);
  EXPECT_EQ(read_bytes(a), read_bytes(b));
  fs::remove(a);
  fs::remove(b);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const auto model = rala::backbone::init_model(rala::backbone::preset("toy"), 2);
  const std::string path = temp_path("corrupt.bin");
  save_checkpoint(model, {}, path);
  const std::string bytes = read_bytes(path);

  auto expect_format_error = [&](const std::string& content, const std::string& fragment) {
    write_bytes(path, content);
    try {
      load_checkpoint(path);
      ADD_FAILURE() << "expected FormatError containing '" << fragment << "'";
    } catch (const rala::FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  expect_format_error(bytes.substr(0, bytes.size() / 2), "truncated");
  expect_format_error(bytes.substr(0, 5), "truncated");
  expect_format_error("XXXX0000" + bytes.substr(8), "bad magic");
  expect_format_error("RAVLT002" + bytes.substr(8), "version");
  expect_format_error(bytes + "x", "trailing");
  fs::remove(path);
  EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.bin")), rala::IoError);
}

}  // namespace
