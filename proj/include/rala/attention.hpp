#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "rala/errors.hpp"
#include "rala/linalg.hpp"
#include "rala/matrix.hpp"

// Softmax, vanilla linear, Efficient-Attention and rank-augmented linear attention.
//
// The cores are templates over the value type so the same expression runs on plain
// matrices and on autodiff variables (rala::ad::Var); operations are found by ADL.
// Running both paths on identical inputs therefore yields bit-identical values.
namespace rala::attention {

enum class Variant { softmax, linear_vanilla, efficient, rala };
enum class Kernel { elu1, relu, softmax_rows };
enum class Phi { linear_projection, identity, tanh };

std::string_view to_string(Variant v) noexcept;
std::string_view to_string(Kernel k) noexcept;
std::string_view to_string(Phi p) noexcept;
// Throw ArgumentError on unknown names.
Variant parse_variant(std::string_view s);
Kernel parse_kernel(std::string_view s);
Phi parse_phi(std::string_view s);

struct AttentionConfig {
  Variant variant = Variant::rala;
  std::size_t heads = 1;
  std::size_t head_dim = 64;
  Kernel kernel = Kernel::elu1;
  Phi phi = Phi::linear_projection;
  bool kv_augment = true;   // alpha reweighting of the KV buffer
  bool out_augment = true;  // phi(X) Hadamard modulation of the output
  bool normalize = true;    // divide by kappa(Q_i) . key_sum

  bool uses_phi_projection() const noexcept {
    return variant == Variant::rala && out_augment && phi == Phi::linear_projection;
  }
};

// Token weights alpha_j; sum to N.
struct AlphaWeights {
  std::vector<double> values;
};

struct KVBuffer {
  Matrix buffer;   // d x d_v, sum_j alpha_j kappa(K_j)^T V_j
  Matrix key_sum;  // 1 x d, sum_j alpha_j kappa(K_j)
};

// phi(X) = X W + b.
template <typename T>
struct PhiParams {
  T weight;
  T bias;
};

template <typename T>
struct MhaWeights {
  T q_weight, q_bias;
  T k_weight, k_bias;
  T v_weight, v_bias;
  T phi_weight, phi_bias;  // unused unless config.uses_phi_projection()
  T out_weight, out_bias;
};

// Intermediate matrices of one head, handed to an observer for rank tracing.
struct HeadCapture {
  std::size_t head = 0;
  Matrix kappa_q;
  Matrix kv_buffer;       // empty for softmax attention
  Matrix pre_modulation;  // before the phi(X) Hadamard product
  Matrix output;          // head output before concatenation
};
using HeadObserver = std::function<void(const HeadCapture&)>;

// ---------------------------------------------------------------------------
// Plain-matrix API.
// ---------------------------------------------------------------------------

// softmax(Q K^T / sqrt(d)) V.
Matrix softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v);
// kappa(Q) (kappa(K)^T V), optionally divided row-wise by kappa(Q) (sum_m kappa(K_m))^T.
Matrix linear_attention_vanilla(const Matrix& q, const Matrix& k, const Matrix& v, Kernel kernel,
                                bool normalize);
// rho_q(Q) (rho_k(K)^T V): softmax over each query row and over each key column.
Matrix efficient_attention_baseline(const Matrix& q, const Matrix& k, const Matrix& v);

// alpha_j = N softmax_j(Q_g kappa(K_j)^T) with Q_g the mean query row. No 1/sqrt(d) scale.
AlphaWeights compute_alpha(const Matrix& q, const Matrix& k, Kernel kernel);
// Sums in token order 1..N.
KVBuffer build_kv_buffer(const Matrix& k, const Matrix& v, const AlphaWeights& alpha,
                         Kernel kernel);

// Y_i = phi(X_i) (.) (kappa(Q_i) B) [/ kappa(Q_i) key_sum^T]. phi_params is required iff
// the config uses the linear projection for phi.
Matrix rala_attention(const Matrix& x, const Matrix& q, const Matrix& k, const Matrix& v,
                      const AttentionConfig& config, const PhiParams<Matrix>* phi_params = nullptr);

Matrix multi_head_attention(const Matrix& x, const AttentionConfig& config,
                            const MhaWeights<Matrix>& weights,
                            const HeadObserver& observer = {});

// ---------------------------------------------------------------------------
// Generic cores.
// ---------------------------------------------------------------------------

namespace detail {

void check_qkv(std::string_view op, const Matrix& q, const Matrix& k, const Matrix& v);

}  // namespace detail

template <typename T>
T apply_kernel(const T& x, Kernel kernel) {
  switch (kernel) {
    case Kernel::elu1: return kernel_elu1(x);
    case Kernel::relu: return relu(x);
    case Kernel::softmax_rows: return softmax_rows(x);
  }
  throw ArgumentError("unknown kernel");
}

// 1 x N row of alpha weights from raw queries and kernelized keys.
template <typename T>
T alpha_row(const T& q, const T& kappa_k) {
  const auto n = static_cast<double>(value_of(q).rows());
  return scale(softmax_rows(matmul(mean_rows(q), transpose(kappa_k))), n);
}

template <typename T>
struct LinearParts {
  T buffer;
  T key_sum;
  T output;
};

// Shared numerator/denominator path of vanilla linear attention and RALA. With no
// alpha the weights are exactly one.
template <typename T>
LinearParts<T> linear_core(const T& kappa_q, const T& kappa_k, const T& v, const T* alpha,
                           bool normalize) {
  const std::size_t n = value_of(kappa_k).rows();
  T weights = alpha ? *alpha : lift(kappa_k, Matrix::ones(1, n));
  T buffer = matmul(transpose(kappa_k), alpha ? scale_rows(v, transpose(weights)) : v);
  T key_sum = matmul(weights, kappa_k);
  T output = matmul(kappa_q, buffer);
  if (normalize) output = div_rows(output, matmul(kappa_q, transpose(key_sum)));
  return {std::move(buffer), std::move(key_sum), std::move(output)};
}

template <typename T>
T softmax_core(const T& q, const T& k, const T& v) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(value_of(q).cols()));
  return matmul(softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_d)), v);
}

template <typename T>
T efficient_core(const T& q, const T& k, const T& v) {
  return matmul(softmax_rows(q), matmul(softmax_rows(transpose(k)), v));
}

// Applies the configured variant to one head. phi_x is phi(X) restricted to the head and
// is only read when the variant is rala with out_augment.
template <typename T>
T head_core(const T* phi_x, const T& q, const T& k, const T& v, const AttentionConfig& config,
            std::size_t head, const HeadObserver& observer) {
  switch (config.variant) {
    case Variant::softmax: {
      T out = softmax_core(q, k, v);
      if (observer) observer({head, value_of(q), Matrix{}, value_of(out), value_of(out)});
      return out;
    }
    case Variant::efficient: {
      T rho_q = softmax_rows(q);
      T buffer = matmul(softmax_rows(transpose(k)), v);
      T out = matmul(rho_q, buffer);
      if (observer) observer({head, value_of(rho_q), value_of(buffer), value_of(out), value_of(out)});
      return out;
    }
    case Variant::linear_vanilla:
    case Variant::rala: {
      const bool rala = config.variant == Variant::rala;
      T kappa_q = apply_kernel(q, config.kernel);
      T kappa_k = apply_kernel(k, config.kernel);
      LinearParts<T> parts;
      if (rala && config.kv_augment) {
        T alpha = alpha_row(q, kappa_k);
        parts = linear_core(kappa_q, kappa_k, v, &alpha, config.normalize);
      } else {
        parts = linear_core<T>(kappa_q, kappa_k, v, nullptr, config.normalize);
      }
      T out = parts.output;
      if (rala && config.out_augment) {
        if (!phi_x) throw ArgumentError("rala attention: phi(X) missing for output augmentation");
        out = hadamard(*phi_x, parts.output);
      }
      if (observer) {
        observer({head, value_of(kappa_q), value_of(parts.buffer), value_of(parts.output),
                  value_of(out)});
      }
      return out;
    }
  }
  throw ArgumentError("unknown attention variant");
}

// phi(X) over the full width (X W + b, X, or tanh(X)).
template <typename T>
T phi_map(const T& x, const AttentionConfig& config, const T* weight, const T* bias) {
  switch (config.phi) {
    case Phi::linear_projection:
      if (!weight || !bias) throw ArgumentError("phi: linear projection parameters missing");
      return add_bias(matmul(x, *weight), *bias);
    case Phi::identity: return x;
    case Phi::tanh: return tanh_map(x);
  }
  throw ArgumentError("unknown phi");
}

template <typename T>
T multi_head(const T& x, const AttentionConfig& config, const MhaWeights<T>& w,
             const HeadObserver& observer = {}) {
  const std::size_t width = value_of(x).cols();
  if (config.heads == 0 || width % config.heads != 0 || config.heads * config.head_dim != width) {
    throw DimensionError("multi_head_attention: width " + std::to_string(width) +
                         " is not heads (" + std::to_string(config.heads) + ") x head_dim (" +
                         std::to_string(config.head_dim) + ")");
  }
  T q = add_bias(matmul(x, w.q_weight), w.q_bias);
  T k = add_bias(matmul(x, w.k_weight), w.k_bias);
  T v = add_bias(matmul(x, w.v_weight), w.v_bias);
  const bool modulate = config.variant == Variant::rala && config.out_augment;
  T phi_full;
  if (modulate) phi_full = phi_map(x, config, &w.phi_weight, &w.phi_bias);

  std::vector<T> heads;
  heads.reserve(config.heads);
  const std::size_t d = config.head_dim;
  for (std::size_t h = 0; h < config.heads; ++h) {
    T qh = slice_cols(q, h * d, d);
    T kh = slice_cols(k, h * d, d);
    T vh = slice_cols(v, h * d, d);
    T phi_h;
    if (modulate) phi_h = slice_cols(phi_full, h * d, d);
    heads.push_back(head_core(modulate ? &phi_h : nullptr, qh, kh, vh, config, h, observer));
  }
  T merged = heads.size() == 1 ? heads.front() : concat_cols(std::span<const T>(heads));
  return add_bias(matmul(merged, w.out_weight), w.out_bias);
}

}  // namespace rala::attention
