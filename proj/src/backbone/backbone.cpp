#include "rala/backbone.hpp"

#include <cmath>
#include <map>
#include <set>

#include "rala/rng.hpp"

namespace rala::backbone {
namespace la = rala::linalg;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string array_string(const std::array<std::size_t, kStages>& a) {
  std::string s = "[";
  for (std::size_t i = 0; i < kStages; ++i) s += (i ? "," : "") + std::to_string(a[i]);
  return s + "]";
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ArgumentError("model config: " + msg); };
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::string stage = "stage " + std::to_string(s + 1);
    if (stage_blocks[s] == 0) fail(stage + " has no blocks");
    if (stage_channels[s] == 0 || stage_heads[s] == 0) fail(stage + " has zero channels or heads");
    if (stage_channels[s] % stage_heads[s] != 0) {
      fail(stage + " channels " + std::to_string(stage_channels[s]) + " not divisible by heads " +
           std::to_string(stage_heads[s]));
    }
  }
  if (stage_channels[0] % 2 != 0) fail("stage 1 channels must be even for the stem");
  if (!(ffn_ratio > 0.0) || !std::isfinite(ffn_ratio)) fail("ffn_ratio must be positive");
  for (std::size_t s = 0; s < kStages; ++s)
    if (ffn_hidden(s) == 0) fail("ffn hidden width rounds to zero");
  if (num_classes == 0) fail("num_classes must be positive");
  if (input_resolution == 0 || input_resolution % 32 != 0) {
    fail("input_resolution " + std::to_string(input_resolution) + " is not a positive multiple of 32");
  }
}

std::size_t ModelConfig::ffn_hidden(std::size_t stage) const {
  return static_cast<std::size_t>(
      std::llround(static_cast<double>(stage_channels.at(stage)) * ffn_ratio));
}

attention::AttentionConfig ModelConfig::attention(std::size_t stage) const {
  attention::AttentionConfig a;
  a.variant = attention::Variant::rala;
  a.heads = stage_heads.at(stage);
  a.head_dim = stage_channels.at(stage) / stage_heads.at(stage);
  a.kernel = kernel;
  a.phi = phi;
  a.kv_augment = kv_augment;
  a.out_augment = out_augment;
  a.normalize = normalize;
  return a;
}

ModelConfig preset(std::string_view name) {
  ModelConfig c;
  if (name == "ravlt-t") {
    c.stage_blocks = {2, 2, 6, 2};
    c.stage_channels = {64, 128, 256, 512};
    c.stage_heads = {1, 2, 4, 8};
  } else if (name == "ravlt-s") {
    c.stage_blocks = {3, 5, 9, 3};
    c.stage_channels = {64, 128, 320, 512};
    c.stage_heads = {1, 2, 5, 8};
  } else if (name == "ravlt-b") {
    c.stage_blocks = {4, 6, 12, 6};
    c.stage_channels = {96, 192, 384, 512};
    c.stage_heads = {1, 2, 6, 8};
  } else if (name == "ravlt-l") {
    c.stage_blocks = {4, 7, 19, 8};
    c.stage_channels = {96, 192, 448, 640};
    c.stage_heads = {1, 2, 7, 10};
  } else if (name == "toy") {
    c.stage_blocks = {1, 1, 2, 1};
    c.stage_channels = {16, 32, 64, 128};
    c.stage_heads = {1, 2, 4, 8};
    c.num_classes = 10;
    c.input_resolution = 64;
  } else {
    throw ArgumentError("unknown preset '" + std::string(name) + "'");
  }
  return c;
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"ravlt-t", "ravlt-s", "ravlt-b", "ravlt-l", "toy"};
  return names;
}

ordered_json to_json(const ModelConfig& c) {
  ordered_json j;
  j["stage_blocks"] = c.stage_blocks;
  j["stage_channels"] = c.stage_channels;
  j["stage_heads"] = c.stage_heads;
  j["ffn_ratio"] = c.ffn_ratio;
  j["num_classes"] = c.num_classes;
  j["input_resolution"] = c.input_resolution;
  j["cpe_enabled"] = c.cpe_enabled;
  j["kv_augment"] = c.kv_augment;
  j["out_augment"] = c.out_augment;
  j["kernel"] = std::string(attention::to_string(c.kernel));
  j["phi"] = std::string(attention::to_string(c.phi));
  j["normalize"] = c.normalize;
  j["pre_norm"] = c.pre_norm;
  return j;
}

ModelConfig from_json(const json& j) {
  if (!j.is_object()) throw FormatError("model config: expected a JSON object");
  static const std::set<std::string> known{
      "stage_blocks", "stage_channels", "stage_heads", "ffn_ratio",  "num_classes",
      "input_resolution", "cpe_enabled", "kv_augment", "out_augment", "kernel",
      "phi", "normalize", "pre_norm"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw FormatError("model config: unknown field '" + key + "'");
  for (const char* required : {"stage_blocks", "stage_channels", "stage_heads"})
    if (!j.contains(required)) throw FormatError(std::string("model config: missing field '") + required + "'");

  ModelConfig c;
  try {
    c.stage_blocks = j.at("stage_blocks").get<std::array<std::size_t, kStages>>();
    c.stage_channels = j.at("stage_channels").get<std::array<std::size_t, kStages>>();
    c.stage_heads = j.at("stage_heads").get<std::array<std::size_t, kStages>>();
    c.ffn_ratio = j.value("ffn_ratio", c.ffn_ratio);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.input_resolution = j.value("input_resolution", c.input_resolution);
    c.cpe_enabled = j.value("cpe_enabled", c.cpe_enabled);
    c.kv_augment = j.value("kv_augment", c.kv_augment);
    c.out_augment = j.value("out_augment", c.out_augment);
    if (j.contains("kernel")) c.kernel = attention::parse_kernel(j.at("kernel").get<std::string>());
    if (j.contains("phi")) c.phi = attention::parse_phi(j.at("phi").get<std::string>());
    c.normalize = j.value("normalize", c.normalize);
    c.pre_norm = j.value("pre_norm", c.pre_norm);
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string dump_config(const ModelConfig& config) { return to_json(config).dump(2); }

std::string table_row(const ModelConfig& c) {
  return array_string(c.stage_blocks) + "/" + array_string(c.stage_channels) + "/" +
         array_string(c.stage_heads);
}

std::array<std::size_t, kStages> stage_token_counts(const ModelConfig&, std::size_t resolution) {
  std::array<std::size_t, kStages> out{};
  std::size_t side = resolution / 4;
  for (std::size_t s = 0; s < kStages; ++s, side /= 2) out[s] = side * side;
  return out;
}

std::vector<ParamSpec> param_layout(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSpec> L;
  auto weight = [&](std::string name, std::size_t r, std::size_t k) {
    L.push_back({std::move(name), r, k, Init::trunc_normal, true});
  };
  auto vec = [&](std::string name, std::size_t k, Init init) {
    L.push_back({std::move(name), 1, k, init, false});
  };
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    weight(name + ".weight", in, out);
    vec(name + ".bias", out, Init::zeros);
  };
  auto norm = [&](const std::string& name, std::size_t k) {
    vec(name + ".gamma", k, Init::ones);
    vec(name + ".beta", k, Init::zeros);
  };

  const std::size_t c0 = c.stage_channels[0];
  linear("stem.conv1", 27, c0 / 2);
  linear("stem.conv2", 9 * (c0 / 2), c0);
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::size_t ch = c.stage_channels[s];
    const std::string stage = "stages." + std::to_string(s);
    if (s > 0) linear(stage + ".down", 9 * c.stage_channels[s - 1], ch);
    const bool phi_projection = c.attention(s).uses_phi_projection();
    for (std::size_t b = 0; b < c.stage_blocks[s]; ++b) {
      const std::string block = stage + ".blocks." + std::to_string(b);
      if (c.cpe_enabled) {
        // Depthwise kernels are 9 x C; they take weight decay like any other kernel.
        weight(block + ".cpe.weight", 9, ch);
        vec(block + ".cpe.bias", ch, Init::zeros);
      }
      norm(block + ".norm1", ch);
      linear(block + ".attn.q", ch, ch);
      linear(block + ".attn.k", ch, ch);
      linear(block + ".attn.v", ch, ch);
      if (phi_projection) linear(block + ".attn.phi", ch, ch);
      linear(block + ".attn.out", ch, ch);
      norm(block + ".norm2", ch);
      linear(block + ".ffn.fc1", ch, c.ffn_hidden(s));
      linear(block + ".ffn.fc2", c.ffn_hidden(s), ch);
    }
  }
  norm("head.norm", c.stage_channels[kStages - 1]);
  linear("head.fc", c.stage_channels[kStages - 1], c.num_classes);
  return L;
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  Model m{config, param_layout(config), {}};
  m.params.reserve(m.layout.size());
  for (std::size_t i = 0; i < m.layout.size(); ++i) {
    const ParamSpec& spec = m.layout[i];
    // One stream per tensor so a tensor's values do not depend on the ones before it.
    CounterRng rng(seed, i);
    Matrix p(spec.rows, spec.cols, spec.init == Init::ones ? 1.0 : 0.0);
    if (spec.init == Init::trunc_normal)
      for (double& v : p.data()) v = rng.truncated_normal(kInitStd);
    m.params.push_back(std::move(p));
  }
  return m;
}

// ---------------------------------------------------------------------------

namespace {

struct BlockCost {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

BlockCost block_cost(const ModelConfig& c, std::size_t s, std::uint64_t n) {
  const std::uint64_t ch = c.stage_channels[s];
  const std::uint64_t hidden = c.ffn_hidden(s);
  const std::uint64_t heads = c.stage_heads[s];
  const std::uint64_t d = ch / heads;
  const attention::AttentionConfig a = c.attention(s);
  const std::uint64_t projections = a.uses_phi_projection() ? 5 : 4;

  BlockCost b;
  if (c.cpe_enabled) {
    b.params += 9 * ch + ch;
    b.flops += n * 9 * ch;
  }
  b.params += 2 * 2 * ch;  // two norms
  b.params += projections * (ch * ch + ch);
  b.flops += projections * n * ch * ch;
  // Per head: kappa(K)^T V, kappa(Q) B, the key sum, and optionally the normalizer and
  // the global-query scores.
  std::uint64_t core = 2 * n * d * d + n * d;
  if (a.normalize) core += n * d;
  if (a.kv_augment) core += n * d;
  b.flops += heads * core;
  b.params += ch * hidden + hidden + hidden * ch + ch;
  b.flops += 2 * n * ch * hidden;
  return b;
}

CostReport cost_report(const ModelConfig& c, std::size_t resolution) {
  c.validate();
  if (resolution == 0 || resolution % 32 != 0) {
    throw ArgumentError("resolution " + std::to_string(resolution) + " is not a positive multiple of 32");
  }
  CostReport r;
  r.resolution = resolution;
  const std::uint64_t c0 = c.stage_channels[0];
  const std::uint64_t half = resolution / 2, quarter = resolution / 4;

  CostEntry stem{"stem", 0, 0};
  stem.params = 27 * (c0 / 2) + c0 / 2 + 9 * (c0 / 2) * c0 + c0;
  stem.flops = half * half * 27 * (c0 / 2) + quarter * quarter * 9 * (c0 / 2) * c0;
  r.breakdown.push_back(stem);

  const auto tokens = stage_token_counts(c, resolution);
  for (std::size_t s = 0; s < kStages; ++s) {
    CostEntry e{"stage" + std::to_string(s + 1), 0, 0};
    const std::uint64_t ch = c.stage_channels[s];
    if (s > 0) {
      const std::uint64_t in = c.stage_channels[s - 1];
      e.params += 9 * in * ch + ch;
      e.flops += tokens[s] * 9 * in * ch;
    }
    const BlockCost b = block_cost(c, s, tokens[s]);
    e.params += c.stage_blocks[s] * b.params;
    e.flops += c.stage_blocks[s] * b.flops;
    r.breakdown.push_back(e);
  }

  const std::uint64_t last = c.stage_channels[kStages - 1];
  r.breakdown.push_back({"head", 2 * last + last * c.num_classes + c.num_classes, last * c.num_classes});
  for (const CostEntry& e : r.breakdown) {
    r.parameter_count += e.params;
    r.flops += e.flops;
  }
  return r;
}

}  // namespace

CostReport count_params(const ModelConfig& config) {
  return cost_report(config, config.input_resolution);
}

CostReport count_flops(const ModelConfig& config, std::size_t resolution) {
  return cost_report(config, resolution);
}

// ---------------------------------------------------------------------------

namespace detail {

void check_tokens(std::string_view op, std::size_t tokens, std::size_t height, std::size_t width) {
  if (tokens != height * width) {
    throw DimensionError(std::string(op) + ": " + std::to_string(tokens) + " tokens do not form a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
}

void check_even(std::string_view op, std::size_t height, std::size_t width) {
  if (height % 2 != 0 || width % 2 != 0) {
    throw DimensionError(std::string(op) + ": spatial dims " + std::to_string(height) + "x" +
                         std::to_string(width) + " must be even");
  }
}

}  // namespace detail

Matrix model_forward(const Model& model, const Matrix& image, const LayerObserver& observer) {
  const std::size_t r = model.config.input_resolution;
  return forward_generic<Matrix>(model.config, model.params, image, r, r, observer);
}

}  // namespace rala::backbone
