#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rala/attention.hpp"
#include "rala/errors.hpp"
#include "rala/linalg.hpp"
#include "rala/matrix.hpp"

// RAVLT: convolutional stem, four stages of CPE -> attention -> FFN blocks with a strided
// convolution between stages, final norm, average pool and a linear classifier.
//
// Feature maps are (H*W) x C token matrices. Parameters live in a flat, ordered list whose
// layout is fixed by the config; forward passes are templates so the same code runs on
// matrices and on autodiff variables.
namespace rala::backbone {

inline constexpr std::size_t kStages = 4;
inline constexpr double kInitStd = 0.02;

struct ModelConfig {
  std::array<std::size_t, kStages> stage_blocks{2, 2, 6, 2};
  std::array<std::size_t, kStages> stage_channels{64, 128, 256, 512};
  std::array<std::size_t, kStages> stage_heads{1, 2, 4, 8};
  double ffn_ratio = 4.0;
  std::size_t num_classes = 1000;
  std::size_t input_resolution = 224;
  bool cpe_enabled = true;
  bool kv_augment = true;
  bool out_augment = true;
  attention::Kernel kernel = attention::Kernel::elu1;
  attention::Phi phi = attention::Phi::linear_projection;
  bool normalize = true;
  bool pre_norm = true;

  // Throws ArgumentError naming the first violated constraint.
  void validate() const;
  std::size_t ffn_hidden(std::size_t stage) const;
  attention::AttentionConfig attention(std::size_t stage) const;
  bool operator==(const ModelConfig&) const = default;
};

// "ravlt-t", "ravlt-s", "ravlt-b", "ravlt-l", "toy".
ModelConfig preset(std::string_view name);
const std::vector<std::string>& preset_names();

nlohmann::ordered_json to_json(const ModelConfig& config);
// Missing optional fields keep their defaults; unknown fields are a FormatError.
ModelConfig from_json(const nlohmann::json& j);
std::string dump_config(const ModelConfig& config);
// "[2,2,6,2]/[64,128,256,512]/[1,2,4,8]"
std::string table_row(const ModelConfig& config);

// Tokens per stage at the given input resolution.
std::array<std::size_t, kStages> stage_token_counts(const ModelConfig& config,
                                                    std::size_t resolution);

// ---------------------------------------------------------------------------
// Parameters.
// ---------------------------------------------------------------------------

enum class Init { trunc_normal, zeros, ones };

struct ParamSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  Init init = Init::trunc_normal;
  bool decay = false;  // weight decay applies to matrix weights only
};

std::vector<ParamSpec> param_layout(const ModelConfig& config);

struct Model {
  ModelConfig config;
  std::vector<ParamSpec> layout;
  std::vector<Matrix> params;
};

// Truncated normal (std 0.02) weights, zero biases, unit norm gains.
Model init_model(const ModelConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Cost counters.
// ---------------------------------------------------------------------------

struct CostEntry {
  std::string name;  // "stem", "stage1".."stage4", "head"
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

// flops counts one multiply-accumulate as one operation, the convention used for
// published backbone tables; elementwise maps, norms and softmax are not counted.
struct CostReport {
  std::size_t resolution = 0;
  std::uint64_t parameter_count = 0;
  std::uint64_t flops = 0;
  std::vector<CostEntry> breakdown;
};

CostReport count_params(const ModelConfig& config);
CostReport count_flops(const ModelConfig& config, std::size_t resolution);

// ---------------------------------------------------------------------------
// Forward building blocks.
// ---------------------------------------------------------------------------

template <typename T>
struct FfnParams {
  T fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

template <typename T>
struct BlockParams {
  T cpe_weight, cpe_bias;  // unused when cpe is disabled
  T norm1_gamma, norm1_beta;
  attention::MhaWeights<T> attn;
  T norm2_gamma, norm2_beta;
  FfnParams<T> ffn;
};

struct BlockShape {
  std::size_t height = 0;
  std::size_t width = 0;
  bool cpe_enabled = true;
  bool pre_norm = true;
  attention::AttentionConfig attention;
};

// Called once per head of every attention layer; layer counts blocks across stages.
using LayerObserver = std::function<void(std::size_t layer, const attention::HeadCapture&)>;

namespace detail {

void check_tokens(std::string_view op, std::size_t tokens, std::size_t height, std::size_t width);
void check_even(std::string_view op, std::size_t height, std::size_t width);

// Hands out parameters in layout order.
template <typename T>
class ParamCursor {
 public:
  explicit ParamCursor(std::span<const T> params) : params_(params) {}
  const T& next() {
    if (pos_ >= params_.size()) throw DimensionError("model_forward: parameter list too short");
    return params_[pos_++];
  }
  bool done() const noexcept { return pos_ == params_.size(); }

 private:
  std::span<const T> params_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// x + depthwise_conv3x3(x).
template <typename T>
T cpe_forward(const T& x, std::size_t height, std::size_t width, const T& weight, const T& bias) {
  detail::check_tokens("cpe_forward", value_of(x).rows(), height, width);
  return add(x, depthwise_conv3x3(x, height, width, weight, bias));
}

template <typename T>
T ffn_forward(const T& x, const FfnParams<T>& p) {
  return add_bias(matmul(gelu(add_bias(matmul(x, p.fc1_weight), p.fc1_bias)), p.fc2_weight),
                  p.fc2_bias);
}

// 3x3 convolution, stride 2, padding 1; weight is (9*C_in) x C_out.
template <typename T>
T conv3x3_s2(const T& x, std::size_t height, std::size_t width, const T& weight, const T& bias) {
  return add_bias(matmul(im2col3x3(x, height, width, 2), weight), bias);
}

template <typename T>
T downsample_forward(const T& x, std::size_t height, std::size_t width, const T& weight,
                     const T& bias) {
  detail::check_tokens("downsample_forward", value_of(x).rows(), height, width);
  detail::check_even("downsample_forward", height, width);
  return conv3x3_s2(x, height, width, weight, bias);
}

template <typename T>
T block_forward(const T& x, const BlockShape& shape, const BlockParams<T>& p,
                const attention::HeadObserver& observer = {}) {
  detail::check_tokens("block_forward", value_of(x).rows(), shape.height, shape.width);
  T h = shape.cpe_enabled ? cpe_forward(x, shape.height, shape.width, p.cpe_weight, p.cpe_bias) : x;
  if (shape.pre_norm) {
    h = add(h, attention::multi_head(layer_norm(h, p.norm1_gamma, p.norm1_beta), shape.attention,
                                     p.attn, observer));
    return add(h, ffn_forward(layer_norm(h, p.norm2_gamma, p.norm2_beta), p.ffn));
  }
  h = layer_norm(add(h, attention::multi_head(h, shape.attention, p.attn, observer)),
                 p.norm1_gamma, p.norm1_beta);
  return layer_norm(add(h, ffn_forward(h, p.ffn)), p.norm2_gamma, p.norm2_beta);
}

// Reads one block's parameters in layout order.
template <typename T>
BlockParams<T> take_block(detail::ParamCursor<T>& cur, bool cpe, bool phi_projection) {
  BlockParams<T> p;
  if (cpe) {
    p.cpe_weight = cur.next();
    p.cpe_bias = cur.next();
  }
  p.norm1_gamma = cur.next();
  p.norm1_beta = cur.next();
  p.attn.q_weight = cur.next();
  p.attn.q_bias = cur.next();
  p.attn.k_weight = cur.next();
  p.attn.k_bias = cur.next();
  p.attn.v_weight = cur.next();
  p.attn.v_bias = cur.next();
  if (phi_projection) {
    p.attn.phi_weight = cur.next();
    p.attn.phi_bias = cur.next();
  }
  p.attn.out_weight = cur.next();
  p.attn.out_bias = cur.next();
  p.norm2_gamma = cur.next();
  p.norm2_beta = cur.next();
  p.ffn.fc1_weight = cur.next();
  p.ffn.fc1_bias = cur.next();
  p.ffn.fc2_weight = cur.next();
  p.ffn.fc2_bias = cur.next();
  return p;
}

// image is (height*width) x 3; returns 1 x num_classes logits.
template <typename T>
T forward_generic(const ModelConfig& config, std::span<const T> params, const T& image,
                  std::size_t height, std::size_t width, const LayerObserver& observer = {}) {
  if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0) {
    throw DimensionError("model_forward: resolution " + std::to_string(height) + "x" +
                         std::to_string(width) + " is not divisible by 32");
  }
  detail::check_tokens("model_forward", value_of(image).rows(), height, width);
  if (value_of(image).cols() != 3) {
    throw DimensionError("model_forward: image must have 3 channels, got " +
                         value_of(image).shape_string());
  }
  detail::ParamCursor<T> cur(params);
  auto conv = [&](const T& in, std::size_t h, std::size_t w) {
    const T& weight = cur.next();
    const T& bias = cur.next();
    return conv3x3_s2(in, h, w, weight, bias);
  };
  T x = gelu(conv(image, height, width));
  height /= 2, width /= 2;
  x = conv(x, height, width);
  height /= 2, width /= 2;

  std::size_t layer = 0;
  for (std::size_t s = 0; s < kStages; ++s) {
    if (s > 0) {
      detail::check_even("downsample_forward", height, width);
      x = conv(x, height, width);
      height /= 2, width /= 2;
    }
    BlockShape shape{height, width, config.cpe_enabled, config.pre_norm, config.attention(s)};
    for (std::size_t b = 0; b < config.stage_blocks[s]; ++b, ++layer) {
      const BlockParams<T> p = take_block(cur, config.cpe_enabled, shape.attention.uses_phi_projection());
      attention::HeadObserver head_observer;
      if (observer) head_observer = [&](const attention::HeadCapture& c) { observer(layer, c); };
      x = block_forward(x, shape, p, head_observer);
    }
  }
  const T& gamma = cur.next();
  const T& beta = cur.next();
  x = mean_rows(layer_norm(x, gamma, beta));
  const T& head_weight = cur.next();
  const T& head_bias = cur.next();
  T logits = add_bias(matmul(x, head_weight), head_bias);
  if (!cur.done()) throw DimensionError("model_forward: parameter list too long");
  return logits;
}

Matrix model_forward(const Model& model, const Matrix& image, const LayerObserver& observer = {});

}  // namespace rala::backbone
