#include "rala/attention.hpp"

#include <string>

namespace rala::attention {
namespace la = rala::linalg;

std::string_view to_string(Variant v) noexcept {
  switch (v) {
    case Variant::softmax: return "softmax";
    case Variant::linear_vanilla: return "linear_vanilla";
    case Variant::efficient: return "efficient";
    case Variant::rala: return "rala";
  }
  return "?";
}

std::string_view to_string(Kernel k) noexcept {
  switch (k) {
    case Kernel::elu1: return "elu1";
    case Kernel::relu: return "relu";
    case Kernel::softmax_rows: return "softmax_rows";
  }
  return "?";
}

std::string_view to_string(Phi p) noexcept {
  switch (p) {
    case Phi::linear_projection: return "linear_projection";
    case Phi::identity: return "identity";
    case Phi::tanh: return "tanh";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::softmax, Variant::linear_vanilla, Variant::efficient, Variant::rala})
    if (to_string(v) == s) return v;
  throw ArgumentError("unknown attention variant '" + std::string(s) + "'");
}

Kernel parse_kernel(std::string_view s) {
  for (Kernel k : {Kernel::elu1, Kernel::relu, Kernel::softmax_rows})
    if (to_string(k) == s) return k;
  throw ArgumentError("unknown kernel '" + std::string(s) + "'");
}

Phi parse_phi(std::string_view s) {
  for (Phi p : {Phi::linear_projection, Phi::identity, Phi::tanh})
    if (to_string(p) == s) return p;
  throw ArgumentError("unknown phi '" + std::string(s) + "'");
}

namespace detail {

void check_qkv(std::string_view op, const Matrix& q, const Matrix& k, const Matrix& v) {
  if (q.rows() != k.rows() || k.rows() != v.rows() || q.cols() != k.cols() || q.rows() == 0) {
    throw DimensionError(std::string(op) + ": Q " + q.shape_string() + ", K " +
                         k.shape_string() + ", V " + v.shape_string() +
                         " must share N and Q/K must share d");
  }
}

}  // namespace detail

Matrix softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
  detail::check_qkv("softmax_attention", q, k, v);
  return softmax_core(q, k, v);
}

Matrix linear_attention_vanilla(const Matrix& q, const Matrix& k, const Matrix& v, Kernel kernel,
                                bool normalize) {
  detail::check_qkv("linear_attention_vanilla", q, k, v);
  return linear_core<Matrix>(apply_kernel(q, kernel), apply_kernel(k, kernel), v, nullptr,
                             normalize)
      .output;
}

Matrix efficient_attention_baseline(const Matrix& q, const Matrix& k, const Matrix& v) {
  detail::check_qkv("efficient_attention_baseline", q, k, v);
  return efficient_core(q, k, v);
}

AlphaWeights compute_alpha(const Matrix& q, const Matrix& k, Kernel kernel) {
  if (!q.same_shape(k) || q.rows() == 0) {
    throw DimensionError("compute_alpha: Q " + q.shape_string() + " and K " + k.shape_string() +
                         " must have the same non-empty shape");
  }
  const Matrix row = alpha_row(q, apply_kernel(k, kernel));
  return AlphaWeights{row.values()};
}

KVBuffer build_kv_buffer(const Matrix& k, const Matrix& v, const AlphaWeights& alpha,
                         Kernel kernel) {
  if (alpha.values.size() != k.rows() || k.rows() != v.rows()) {
    throw DimensionError("build_kv_buffer: " + std::to_string(alpha.values.size()) +
                         " weights for K " + k.shape_string() + " and V " + v.shape_string());
  }
  const Matrix kappa_k = apply_kernel(k, kernel);
  const Matrix weights(1, k.rows(), alpha.values);
  return KVBuffer{la::matmul(la::transpose(kappa_k), la::scale_rows(v, la::transpose(weights))),
                  la::matmul(weights, kappa_k)};
}

Matrix rala_attention(const Matrix& x, const Matrix& q, const Matrix& k, const Matrix& v,
                      const AttentionConfig& config, const PhiParams<Matrix>* phi_params) {
  detail::check_qkv("rala_attention", q, k, v);
  if (x.rows() != q.rows()) {
    throw DimensionError("rala_attention: X " + x.shape_string() + " and Q " + q.shape_string() +
                         " must share N");
  }
  AttentionConfig cfg = config;
  cfg.variant = Variant::rala;
  const bool wants_params = cfg.uses_phi_projection();
  if (wants_params && !phi_params) {
    throw ArgumentError("rala_attention: phi = linear_projection requires phi parameters");
  }
  if (!wants_params && phi_params) {
    throw ArgumentError("rala_attention: phi parameters given but phi is not a linear projection");
  }
  if (!cfg.out_augment) return head_core<Matrix>(nullptr, q, k, v, cfg, 0, {});
  const Matrix phi_x = phi_map(x, cfg, phi_params ? &phi_params->weight : nullptr,
                               phi_params ? &phi_params->bias : nullptr);
  if (!phi_x.same_shape(v)) {
    throw DimensionError("rala_attention: phi(X) " + phi_x.shape_string() +
                         " must match the value shape " + v.shape_string());
  }
  return head_core(&phi_x, q, k, v, cfg, 0, {});
}

Matrix multi_head_attention(const Matrix& x, const AttentionConfig& config,
                            const MhaWeights<Matrix>& weights, const HeadObserver& observer) {
  return multi_head(x, config, weights, observer);
}

}  // namespace rala::attention
