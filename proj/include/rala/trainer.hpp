#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rala/backbone.hpp"
#include "rala/matrix.hpp"

// Toy-scale supervised training: synthetic class-conditional images, AdamW with linear
// warm-up and cosine decay, and a binary checkpoint format.
namespace rala::trainer {

using backbone::Model;
using backbone::ModelConfig;

struct Dataset {
  std::vector<Matrix> images;  // each (resolution^2) x 3, token index y*resolution + x
  std::vector<std::size_t> labels;
  std::size_t resolution = 0;
  std::size_t num_classes = 0;
};

inline constexpr double kDefaultNoise = 0.3;

// Each class owns a fixed sinusoidal pattern per channel (integer spatial frequencies in
// 1..6 along x and y, random phase); samples add i.i.d. Gaussian noise. Labels cycle through
// the classes so every class has floor or ceil of n_samples / n_classes samples.
Dataset synth_dataset(std::uint64_t seed, std::size_t n_samples, std::size_t n_classes,
                      std::size_t resolution, double noise_sigma = kDefaultNoise);

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled: w -= lr * weight_decay * w
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

// One AdamW update at step t >= 1 (bias correction uses t). decay_mask selects the tensors
// that receive weight decay; empty means all of them. State is zero-initialized on first use.
void adam_step(std::vector<Matrix>& weights, const std::vector<Matrix>& grads, AdamState& state,
               const AdamHyper& hyper, std::size_t t, const std::vector<bool>& decay_mask = {});

// Linear warm-up to base over warmup_epochs, then cosine decay reaching 0 at the last epoch.
double learning_rate(std::size_t epoch, std::size_t epochs, std::size_t warmup_epochs, double base);

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 16;
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  std::size_t warmup_epochs = 5;
  std::uint64_t seed = 0;
  std::string preset = "toy";
  std::optional<ModelConfig> model;  // overrides preset when set
  std::size_t n_samples = 100;
  double noise_sigma = kDefaultNoise;
  // Stop after the first epoch whose train accuracy reaches this value; 0 disables.
  double target_accuracy = 0.0;
  // Worker threads for per-sample gradients; 0 = hardware concurrency. Results do not
  // depend on this value.
  std::size_t threads = 1;

  ModelConfig resolved_model() const;
  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& config);
// Unknown fields are a FormatError; missing fields keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean cross-entropy over the epoch's samples
  double accuracy = 0.0;  // fraction of samples classified correctly during the epoch
  double lr = 0.0;
  bool operator==(const EpochMetrics&) const = default;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  Model model;
  bool reached_target = false;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Trains model in place on data. Throws NumericalError naming the epoch if the loss is not
// finite.
std::vector<EpochMetrics> train_model(Model& model, const Dataset& data, const TrainConfig& config,
                                      const EpochCallback& on_epoch = {});

// Builds the dataset and model from config (seeded by config.seed) and trains.
TrainResult train_loop(const TrainConfig& config, const EpochCallback& on_epoch = {});

// Mean loss and accuracy of the model on data without updating it.
EpochMetrics evaluate(const Model& model, const Dataset& data);

// "epoch,loss,accuracy,lr" header plus one row per epoch.
std::string metrics_csv(const std::vector<EpochMetrics>& history);

// ---------------------------------------------------------------------------
// Checkpoints: "RAVLT001", u64 length + config JSON, u64 blob count, then per blob
// u64 name length + name, u64 rows, u64 cols, rows*cols float32; finally u64 length +
// metrics JSON. Integers and floats are little-endian.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "RAVLT001";

struct Checkpoint {
  Model model;
  nlohmann::json metrics;
};

void save_checkpoint(const Model& model, const nlohmann::json& metrics, const std::string& path);
// Throws IoError when unreadable, FormatError on bad magic, version mismatch, truncation or
// a blob that does not match the config's layout.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace rala::trainer
