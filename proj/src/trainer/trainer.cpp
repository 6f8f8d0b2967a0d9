#include "rala/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "rala/autodiff.hpp"
#include "rala/errors.hpp"
#include "rala/format.hpp"
#include "rala/rng.hpp"

namespace rala::trainer {
namespace la = rala::linalg;
using nlohmann::json;
using nlohmann::ordered_json;

Dataset synth_dataset(std::uint64_t seed, std::size_t n_samples, std::size_t n_classes,
                      std::size_t resolution, double noise_sigma) {
  if (n_classes < 2) throw ArgumentError("synth_dataset: need at least 2 classes");
  if (n_samples == 0) throw ArgumentError("synth_dataset: need at least one sample");
  if (resolution == 0 || resolution % 32 != 0) {
    throw ArgumentError("synth_dataset: resolution " + std::to_string(resolution) +
                        " is not a positive multiple of 32");
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw ArgumentError("synth_dataset: noise sigma must be finite and non-negative");
  }

  struct Wave {
    double fx, fy, phase;
  };
  std::vector<std::array<Wave, 3>> patterns(n_classes);
  CounterRng pattern_rng(seed, 1);
  for (auto& p : patterns)
    for (Wave& w : p) {
      w.fx = static_cast<double>(1 + pattern_rng.below(6));
      w.fy = static_cast<double>(1 + pattern_rng.below(6));
      w.phase = 2.0 * std::numbers::pi * pattern_rng.uniform();
    }

  Dataset d;
  d.resolution = resolution;
  d.num_classes = n_classes;
  const double r = static_cast<double>(resolution);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const std::size_t label = i % n_classes;
    CounterRng noise(seed, 1000 + i);
    Matrix img(resolution * resolution, 3);
    for (std::size_t y = 0; y < resolution; ++y)
      for (std::size_t x = 0; x < resolution; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          const Wave& w = patterns[label][c];
          const double arg = 2.0 * std::numbers::pi * (w.fx * static_cast<double>(x) + w.fy * static_cast<double>(y)) / r;
          double v = std::sin(arg + w.phase);
          if (noise_sigma > 0.0) v += noise_sigma * noise.normal();
          img(y * resolution + x, c) = v;
        }
    d.images.push_back(std::move(img));
    d.labels.push_back(label);
  }
  return d;
}

void adam_step(std::vector<Matrix>& weights, const std::vector<Matrix>& grads, AdamState& state,
               const AdamHyper& hp, std::size_t t, const std::vector<bool>& decay_mask) {
  if (t == 0) throw ArgumentError("adam_step: step index starts at 1");
  if (grads.size() != weights.size() || (!decay_mask.empty() && decay_mask.size() != weights.size())) {
    throw DimensionError("adam_step: " + std::to_string(weights.size()) + " weights, " +
                         std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) {
    for (const Matrix& w : weights) {
      state.m.emplace_back(w.rows(), w.cols());
      state.v.emplace_back(w.rows(), w.cols());
    }
  }
  if (state.m.size() != weights.size()) throw DimensionError("adam_step: optimizer state size mismatch");
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < weights.size(); ++i) {
    Matrix& w = weights[i];
    const Matrix& g = grads[i];
    if (!w.same_shape(g) || !w.same_shape(state.m[i])) {
      throw DimensionError("adam_step: tensor " + std::to_string(i) + " weight " + w.shape_string() +
                           " vs gradient " + g.shape_string());
    }
    const bool decay = hp.weight_decay != 0.0 && (decay_mask.empty() || decay_mask[i]);
    double* wd = w.data().data();
    double* m = state.m[i].data().data();
    double* v = state.v[i].data().data();
    const double* gd = g.data().data();
    for (std::size_t e = 0; e < w.size(); ++e) {
      m[e] = hp.beta1 * m[e] + (1.0 - hp.beta1) * gd[e];
      v[e] = hp.beta2 * v[e] + (1.0 - hp.beta2) * gd[e] * gd[e];
      const double mhat = m[e] / c1;
      const double vhat = v[e] / c2;
      if (decay) wd[e] -= hp.lr * hp.weight_decay * wd[e];
      wd[e] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
  }
}

double learning_rate(std::size_t epoch, std::size_t epochs, std::size_t warmup, double base) {
  if (epoch < warmup) return base * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
  if (epochs <= warmup + 1) return base;
  const double progress = static_cast<double>(epoch - warmup) / static_cast<double>(epochs - 1 - warmup);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

// ---------------------------------------------------------------------------

ModelConfig TrainConfig::resolved_model() const {
  return model ? *model : backbone::preset(preset);
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ArgumentError("train config: " + msg); };
  if (epochs == 0) fail("epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) fail("base_lr must be finite and non-negative");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) fail("weight_decay must be finite and non-negative");
  if (n_samples == 0) fail("n_samples must be positive");
  if (!(target_accuracy >= 0.0 && target_accuracy <= 1.0)) fail("target_accuracy must lie in [0, 1]");
  resolved_model().validate();
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["base_lr"] = c.base_lr;
  j["weight_decay"] = c.weight_decay;
  j["warmup_epochs"] = c.warmup_epochs;
  j["seed"] = c.seed;
  j["preset"] = c.preset;
  if (c.model) j["model"] = backbone::to_json(*c.model);
  j["n_samples"] = c.n_samples;
  j["noise_sigma"] = c.noise_sigma;
  j["target_accuracy"] = c.target_accuracy;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw FormatError("train config: expected a JSON object");
  static const std::set<std::string> known{"epochs", "batch_size", "base_lr", "weight_decay",
                                           "warmup_epochs", "seed", "preset", "model",
                                           "n_samples", "noise_sigma", "target_accuracy"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw FormatError("train config: unknown field '" + key + "'");
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.seed = j.value("seed", c.seed);
    c.preset = j.value("preset", c.preset);
    if (j.contains("model")) c.model = backbone::from_json(j.at("model"));
    c.n_samples = j.value("n_samples", c.n_samples);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.target_accuracy = j.value("target_accuracy", c.target_accuracy);
  } catch (const json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

std::size_t argmax(const Matrix& row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.cols(); ++j)
    if (row(0, j) > row(0, best)) best = j;
  return best;
}

struct SampleResult {
  std::vector<Matrix> grads;
  double loss = 0.0;
  bool correct = false;
};

SampleResult sample_gradient(const Model& model, const Matrix& image, std::size_t label,
                             double seed_scale) {
  ad::Tape tape;
  std::vector<ad::Var> params;
  params.reserve(model.params.size());
  for (const Matrix& p : model.params) params.push_back(tape.leaf(p));
  const std::size_t r = model.config.input_resolution;
  const ad::Var logits =
      backbone::forward_generic<ad::Var>(model.config, params, tape.constant(image), r, r);
  const ad::Var loss = ad::cross_entropy(logits, {label});
  SampleResult out;
  out.loss = loss.value()(0, 0);
  out.correct = argmax(logits.value()) == label;
  out.grads = tape.backward(loss, Matrix(1, 1, seed_scale));
  return out;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t workers = std::min(threads, n);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::size_t resolve_threads(std::size_t requested) {
  if (requested != 0) return requested;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

}  // namespace

std::vector<EpochMetrics> train_model(Model& model, const Dataset& data, const TrainConfig& config,
                                      const EpochCallback& on_epoch) {
  config.validate();
  if (data.images.empty() || data.images.size() != data.labels.size()) {
    throw ArgumentError("train_model: dataset is empty or labels do not match images");
  }
  if (data.resolution != model.config.input_resolution || data.num_classes > model.config.num_classes) {
    throw ArgumentError("train_model: dataset (" + std::to_string(data.resolution) + "px, " +
                        std::to_string(data.num_classes) + " classes) does not fit the model");
  }
  std::vector<bool> decay_mask;
  for (const auto& spec : model.layout) decay_mask.push_back(spec.decay);

  const std::size_t n = data.images.size();
  const std::size_t threads = resolve_threads(config.threads);
  AdamState state;
  std::size_t step = 0;
  std::vector<EpochMetrics> history;
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = learning_rate(epoch, config.epochs, config.warmup_epochs, config.base_lr);
    std::iota(order.begin(), order.end(), 0);
    CounterRng shuffle(config.seed, 0x5a5a0000 + epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, n - begin);
      std::vector<SampleResult> results(count);
      parallel_for(count, threads, [&](std::size_t i) {
        const std::size_t idx = order[begin + i];
        results[i] = sample_gradient(model, data.images[idx], data.labels[idx],
                                     1.0 / static_cast<double>(count));
      });
      // Reduce in batch index order so the sum does not depend on scheduling.
      std::vector<Matrix> grads = std::move(results[0].grads);
      for (std::size_t i = 1; i < count; ++i)
        for (std::size_t p = 0; p < grads.size(); ++p) grads[p] = la::add(grads[p], results[i].grads[p]);
      for (const SampleResult& r : results) {
        loss_sum += r.loss;
        correct += r.correct ? 1 : 0;
      }
      if (!std::isfinite(loss_sum)) {
        throw NumericalError("training diverged: non-finite loss in epoch " + std::to_string(epoch + 1));
      }
      adam_step(model.params, grads, state, AdamHyper{lr, 0.9, 0.999, 1e-8, config.weight_decay},
                ++step, decay_mask);
    }
    EpochMetrics m{epoch + 1, loss_sum / static_cast<double>(n),
                   static_cast<double>(correct) / static_cast<double>(n), lr};
    history.push_back(m);
    if (on_epoch) on_epoch(m);
    if (config.target_accuracy > 0.0 && m.accuracy >= config.target_accuracy) break;
  }
  return history;
}

TrainResult train_loop(const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  const ModelConfig mc = config.resolved_model();
  const Dataset data = synth_dataset(config.seed, config.n_samples, mc.num_classes,
                                     mc.input_resolution, config.noise_sigma);
  TrainResult result{{}, backbone::init_model(mc, config.seed), false};
  result.history = train_model(result.model, data, config, on_epoch);
  result.reached_target = config.target_accuracy > 0.0 && !result.history.empty() &&
                          result.history.back().accuracy >= config.target_accuracy;
  return result;
}

EpochMetrics evaluate(const Model& model, const Dataset& data) {
  EpochMetrics m;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const Matrix logits = backbone::model_forward(model, data.images[i]);
    double mx = logits(0, 0);
    for (double v : logits.data()) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits.data()) z += std::exp(v - mx);
    m.loss += std::log(z) + mx - logits(0, data.labels[i]);
    correct += argmax(logits) == data.labels[i] ? 1 : 0;
  }
  const double n = static_cast<double>(data.images.size());
  m.loss /= n;
  m.accuracy = static_cast<double>(correct) / n;
  return m;
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,loss,accuracy,lr\n";
  for (const EpochMetrics& m : history) {
    out += std::to_string(m.epoch) + "," + format_double(m.loss) + "," + format_double(m.accuracy) +
           "," + format_double(m.lr) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_bytes(std::string& out, const std::string& s) {
  put_u64(out, s.size());
  out += s;
}

class Reader {
 public:
  Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("checkpoint " + path_ + ": truncated while reading " + what + " at byte " +
                        std::to_string(pos_));
    }
    std::string_view s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t u64(const char* what) {
    const std::string_view s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }
  std::string string(const char* what) {
    const std::uint64_t n = u64(what);
    return std::string(take(n, what));
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  const std::string& path() const { return path_; }

 private:
  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Model& model, const json& metrics, const std::string& path) {
  if (model.params.size() != model.layout.size()) throw ArgumentError("save_checkpoint: model is inconsistent");
  std::string out(kCheckpointMagic, 8);
  put_bytes(out, backbone::to_json(model.config).dump());
  put_u64(out, model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const Matrix& p = model.params[i];
    put_bytes(out, model.layout[i].name);
    put_u64(out, p.rows());
    put_u64(out, p.cols());
    for (double v : p.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
  put_bytes(out, metrics.dump());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  Reader r(ss.str(), path);

  const std::string_view magic = r.take(8, "magic");
  if (magic != std::string_view(kCheckpointMagic, 8)) {
    if (magic.substr(0, 5) == "RAVLT") {
      throw FormatError("checkpoint " + path + ": unsupported version '" + std::string(magic) +
                        "', expected " + kCheckpointMagic);
    }
    throw FormatError("checkpoint " + path + ": bad magic, not a checkpoint file");
  }
  Checkpoint ck;
  try {
    ck.model.config = backbone::from_json(json::parse(r.string("config")));
  } catch (const json::exception& e) {
    throw FormatError("checkpoint " + path + ": config JSON: " + e.what());
  }
  ck.model.layout = backbone::param_layout(ck.model.config);
  const std::uint64_t count = r.u64("blob count");
  if (count != ck.model.layout.size()) {
    throw FormatError("checkpoint " + path + ": " + std::to_string(count) + " blobs, config needs " +
                      std::to_string(ck.model.layout.size()));
  }
  for (const auto& spec : ck.model.layout) {
    const std::string name = r.string("blob name");
    const std::uint64_t rows = r.u64("blob rows"), cols = r.u64("blob cols");
    if (name != spec.name || rows != spec.rows || cols != spec.cols) {
      throw FormatError("checkpoint " + path + ": blob '" + name + "' " + std::to_string(rows) + "x" +
                        std::to_string(cols) + " does not match layout entry '" + spec.name + "' " +
                        std::to_string(spec.rows) + "x" + std::to_string(spec.cols));
    }
    const std::string_view raw = r.take(rows * cols * 4, "blob data");
    Matrix m(rows, cols);
    for (std::size_t e = 0; e < m.size(); ++e) {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(raw[e * 4 + static_cast<std::size_t>(b)]);
      m.data()[e] = static_cast<double>(std::bit_cast<float>(bits));
    }
    ck.model.params.push_back(std::move(m));
  }
  try {
    ck.metrics = json::parse(r.string("metrics"));
  } catch (const json::exception& e) {
    throw FormatError("checkpoint " + path + ": metrics JSON: " + e.what());
  }
  if (!r.at_end()) throw FormatError("checkpoint " + path + ": trailing bytes after metrics");
  return ck;
}

}  // namespace rala::trainer
