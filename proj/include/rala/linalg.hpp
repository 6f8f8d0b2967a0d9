#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rala/matrix.hpp"

// Dense numerical primitives over Matrix. Every function is pure: inputs are taken by
// const reference and a new Matrix is returned.
namespace rala::linalg {

inline constexpr double kDefaultRankEps = 1e-6;
inline constexpr double kLayerNormEps = 1e-6;

Matrix matmul(const Matrix& a, const Matrix& b);
// a^T * b without materializing the transpose. Accumulates over the shared
// dimension in ascending order, so the result equals matmul(transpose(a), b) exactly.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a * b^T.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix hadamard(const Matrix& a, const Matrix& b);
// a + bias, where bias is 1 x a.cols() and is added to every row.
Matrix add_bias(const Matrix& a, const Matrix& bias);
// Row i of a multiplied by w(i, 0); w is a.rows() x 1.
Matrix scale_rows(const Matrix& a, const Matrix& w);
// Row i of a divided by d(i, 0); d is a.rows() x 1. Throws NumericalError on a zero divisor.
Matrix div_rows(const Matrix& a, const Matrix& d);

Matrix softmax_rows(const Matrix& a);
// Elu(x) + 1: x + 1 for x > 0, exp(x) otherwise. Strictly positive.
Matrix kernel_elu1(const Matrix& a);
Matrix relu(const Matrix& a);
Matrix tanh_map(const Matrix& a);
// Exact (erf) GELU.
Matrix gelu(const Matrix& a);

// 1 x cols arithmetic mean over rows.
Matrix mean_rows(const Matrix& a);
// Per-row normalization to zero mean / unit variance, then gamma * x + beta.
// gamma and beta are 1 x cols.
Matrix layer_norm(const Matrix& a, const Matrix& gamma, const Matrix& beta,
                  double eps = kLayerNormEps);

Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t count);
Matrix concat_cols(std::span<const Matrix> parts);

// Tokens are stored as an (height*width) x channels matrix, token index y*width + x.
// Depthwise 3x3 convolution with zero padding 1 and stride 1. weights is 9 x C with
// row (dy+1)*3 + (dx+1); bias is 1 x C.
Matrix depthwise_conv3x3(const Matrix& x, std::size_t height, std::size_t width,
                         const Matrix& weights, const Matrix& bias);
// Patch extraction for a 3x3 convolution with zero padding 1. Output row is an output
// pixel; column (ky*3 + kx)*C + c holds input channel c at kernel offset (ky, kx).
Matrix im2col3x3(const Matrix& x, std::size_t height, std::size_t width, std::size_t stride);
// Adjoint of im2col3x3: scatters patch columns back onto the input grid.
Matrix col2im3x3(const Matrix& cols, std::size_t height, std::size_t width,
                 std::size_t channels, std::size_t stride);
std::size_t conv_out_dim(std::size_t in, std::size_t stride);

struct SvdResult {
  std::vector<double> singular_values;  // descending, length min(rows, cols)
  Matrix u;                             // rows x k, only when factors requested
  Matrix v;                             // cols x k, only when factors requested
  int sweeps = 0;
};

inline constexpr int kSvdMaxSweeps = 100;
inline constexpr double kSvdTolerance = 1e-12;

// One-sided Jacobi SVD. Throws NumericalError when it does not converge within
// kSvdMaxSweeps sweeps.
SvdResult svd(const Matrix& a, bool want_factors = false);

struct RankReport {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t numerical_rank = 0;
  double sigma_max = 0.0;
  double sigma_min = 0.0;
  double tolerance = 0.0;

  friend bool operator==(const RankReport&, const RankReport&) = default;
};

// Counts singular values strictly greater than rel_eps * sigma_max.
RankReport numerical_rank(const Matrix& a, double rel_eps = kDefaultRankEps,
                          std::string name = {});

// U * W with U rows x r and W r x cols drawn from a seeded standard normal.
Matrix low_rank_factory(std::size_t rows, std::size_t cols, std::size_t r, std::uint64_t seed);

double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& a);
double sum(const Matrix& a);
// Frobenius inner product.
double dot(const Matrix& a, const Matrix& b);

// Uniform accessor shared with rala::ad::Var, for code generic over both.
inline const Matrix& value_of(const Matrix& m) { return m; }
// Wraps a constant so it can be combined with `like`; identity for plain matrices.
inline Matrix lift(const Matrix& /*like*/, Matrix m) { return m; }

}  // namespace rala::linalg
