#include "rala/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "rala/errors.hpp"
#include "rala/rng.hpp"

namespace rala::linalg {
namespace {

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                       b.shape_string());
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) shape_error(op, a, b);
}

template <typename F>
Matrix map(const Matrix& a, F f) {
  Matrix out(a.rows(), a.cols());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <typename F>
Matrix zip(const char* op, const Matrix& a, const Matrix& b, F f) {
  require_same_shape(op, a, b);
  Matrix out(a.rows(), a.cols());
  auto x = a.data();
  auto y = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

void require_column(const char* op, const Matrix& a, const Matrix& w) {
  if (w.rows() != a.rows() || w.cols() != 1) shape_error(op, a, w);
}

void require_row_vector(const char* op, const Matrix& a, const Matrix& v) {
  if (v.rows() != 1 || v.cols() != a.cols()) shape_error(op, a, v);
}

void require_grid(const char* op, const Matrix& x, std::size_t height, std::size_t width) {
  if (x.rows() != height * width) {
    throw DimensionError(std::string(op) + ": token count " + std::to_string(x.rows()) +
                         " does not match grid " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  const std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
  Matrix out(n, m);
  const double* bp = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = out.row(i).data();
    const double* arow = a.row(i).data();
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = arow[k];
      const double* brow = bp + k * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) shape_error("matmul_tn", a, b);
  const std::size_t inner = a.rows(), n = a.cols(), m = b.cols();
  Matrix out(n, m);
  double* cp = out.data().data();
  for (std::size_t k = 0; k < inner; ++k) {
    const double* arow = a.row(k).data();
    const double* brow = b.row(k).data();
    for (std::size_t i = 0; i < n; ++i) {
      const double aki = arow[i];
      double* crow = cp + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aki * brow[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) shape_error("matmul_nt", a, b);
  return matmul(a, transpose(b));
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  return zip("add", a, b, [](double x, double y) { return x + y; });
}

Matrix sub(const Matrix& a, const Matrix& b) {
  return zip("sub", a, b, [](double x, double y) { return x - y; });
}

Matrix scale(const Matrix& a, double s) {
  return map(a, [s](double x) { return x * s; });
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  return zip("hadamard", a, b, [](double x, double y) { return x * y; });
}

Matrix add_bias(const Matrix& a, const Matrix& bias) {
  require_row_vector("add_bias", a, bias);
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) r[j] += bias(0, j);
  }
  return out;
}

Matrix scale_rows(const Matrix& a, const Matrix& w) {
  require_column("scale_rows", a, w);
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (double& v : out.row(i)) v *= w(i, 0);
  return out;
}

Matrix div_rows(const Matrix& a, const Matrix& d) {
  require_column("div_rows", a, d);
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double denom = d(i, 0);
    if (denom == 0.0) {
      throw NumericalError("div_rows: zero denominator at row " + std::to_string(i));
    }
    for (double& v : out.row(i)) v /= denom;
  }
  return out;
}

Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto src = a.row(i);
    auto dst = out.row(i);
    if (src.empty()) continue;
    const double peak = *std::max_element(src.begin(), src.end());
    double total = 0.0;
    for (std::size_t j = 0; j < src.size(); ++j) {
      dst[j] = std::exp(src[j] - peak);
      total += dst[j];
    }
    for (double& v : dst) v /= total;
  }
  return out;
}

Matrix kernel_elu1(const Matrix& a) {
  return map(a, [](double x) { return x > 0.0 ? x + 1.0 : std::exp(x); });
}

Matrix relu(const Matrix& a) {
  return map(a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Matrix tanh_map(const Matrix& a) {
  return map(a, [](double x) { return std::tanh(x); });
}

Matrix gelu(const Matrix& a) {
  return map(a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); });
}

Matrix mean_rows(const Matrix& a) {
  if (a.rows() == 0) throw DimensionError("mean_rows: matrix has no rows");
  Matrix out(1, a.cols());
  auto acc = out.row(0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) acc[j] += r[j];
  }
  const double inv = 1.0 / static_cast<double>(a.rows());
  for (double& v : acc) v *= inv;
  return out;
}

Matrix layer_norm(const Matrix& a, const Matrix& gamma, const Matrix& beta, double eps) {
  require_row_vector("layer_norm", a, gamma);
  require_row_vector("layer_norm", a, beta);
  const std::size_t c = a.cols();
  Matrix out(a.rows(), c);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto src = a.row(i);
    auto dst = out.row(i);
    double mean = 0.0;
    for (double v : src) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : src) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j)
      dst[j] = (src[j] - mean) * inv_std * gamma(0, j) + beta(0, j);
  }
  return out;
}

Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) {
    throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " +
                         a.shape_string());
  }
  Matrix out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto src = a.row(i).subspan(begin, count);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Matrix concat_cols(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const Matrix& p : parts) {
    if (p.rows() != rows) shape_error("concat_cols", parts.front(), p);
    cols += p.cols();
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    auto dst = out.row(i).begin();
    for (const Matrix& p : parts) dst = std::copy(p.row(i).begin(), p.row(i).end(), dst);
  }
  return out;
}

Matrix depthwise_conv3x3(const Matrix& x, std::size_t height, std::size_t width,
                         const Matrix& weights, const Matrix& bias) {
  require_grid("depthwise_conv3x3", x, height, width);
  const std::size_t c = x.cols();
  if (weights.rows() != 9 || weights.cols() != c) shape_error("depthwise_conv3x3", x, weights);
  require_row_vector("depthwise_conv3x3", x, bias);
  Matrix out(x.rows(), c);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t xx = 0; xx < width; ++xx) {
      auto dst = out.row(y * width + xx);
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] = bias(0, ch);
      for (int dy = -1; dy <= 1; ++dy) {
        const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) continue;
        for (int dx = -1; dx <= 1; ++dx) {
          const auto sx = static_cast<std::ptrdiff_t>(xx) + dx;
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(width)) continue;
          auto src = x.row(static_cast<std::size_t>(sy) * width + static_cast<std::size_t>(sx));
          auto w = weights.row(static_cast<std::size_t>((dy + 1) * 3 + (dx + 1)));
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += w[ch] * src[ch];
        }
      }
    }
  }
  return out;
}

std::size_t conv_out_dim(std::size_t in, std::size_t stride) {
  // kernel 3, padding 1
  return (in + 2 - 3) / stride + 1;
}

Matrix im2col3x3(const Matrix& x, std::size_t height, std::size_t width, std::size_t stride) {
  require_grid("im2col3x3", x, height, width);
  if (stride == 0) throw ArgumentError("im2col3x3: stride must be positive");
  const std::size_t c = x.cols();
  const std::size_t oh = conv_out_dim(height, stride), ow = conv_out_dim(width, stride);
  Matrix out(oh * ow, 9 * c);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      auto dst = out.row(oy * ow + ox);
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const auto sy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) continue;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const auto sx = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(width)) continue;
          auto src = x.row(static_cast<std::size_t>(sy) * width + static_cast<std::size_t>(sx));
          std::copy(src.begin(), src.end(), dst.begin() + (ky * 3 + kx) * c);
        }
      }
    }
  }
  return out;
}

Matrix col2im3x3(const Matrix& cols, std::size_t height, std::size_t width,
                 std::size_t channels, std::size_t stride) {
  const std::size_t oh = conv_out_dim(height, stride), ow = conv_out_dim(width, stride);
  if (cols.rows() != oh * ow || cols.cols() != 9 * channels) {
    throw DimensionError("col2im3x3: patch matrix " + cols.shape_string() +
                         " does not match grid " + std::to_string(height) + "x" +
                         std::to_string(width) + "x" + std::to_string(channels));
  }
  Matrix out(height * width, channels);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      auto src = cols.row(oy * ow + ox);
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const auto sy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) continue;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const auto sx = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(width)) continue;
          auto dst = out.row(static_cast<std::size_t>(sy) * width + static_cast<std::size_t>(sx));
          const std::size_t off = (ky * 3 + kx) * channels;
          for (std::size_t ch = 0; ch < channels; ++ch) dst[ch] += src[off + ch];
        }
      }
    }
  }
  return out;
}

SvdResult svd(const Matrix& a, bool want_factors) {
  if (a.rows() == 0 || a.cols() == 0) throw DimensionError("svd: empty matrix " + a.shape_string());
  // Orthogonalize the columns of the taller orientation.
  const bool flip = a.rows() < a.cols();
  const Matrix work = flip ? transpose(a) : a;
  const std::size_t m = work.rows(), n = work.cols();

  // Column-major copies so each rotation touches contiguous memory.
  std::vector<std::vector<double>> g(n, std::vector<double>(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) g[j][i] = work(i, j);
  std::vector<std::vector<double>> v;
  if (want_factors) {
    v.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t j = 0; j < n; ++j) v[j][j] = 1.0;
  }

  auto rotate = [](std::vector<double>& p, std::vector<double>& q, double c, double s) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double xp = p[k], xq = q[k];
      p[k] = c * xp - s * xq;
      q[k] = s * xp + c * xq;
    }
  };

  int sweep = 0;
  bool converged = n < 2;
  while (!converged) {
    if (sweep == kSvdMaxSweeps) {
      throw NumericalError("svd: no convergence after " + std::to_string(sweep) + " sweeps");
    }
    ++sweep;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          alpha += g[p][k] * g[p][k];
          beta += g[q][k] * g[q][k];
          gamma += g[p][k] * g[q][k];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= kSvdTolerance * std::sqrt(alpha) * std::sqrt(beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(g[p], g[q], c, s);
        if (want_factors) rotate(v[p], v[q], c, s);
      }
    }
    converged = !rotated;
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double ss = 0.0;
    for (double x : g[j]) ss += x * x;
    sigma[j] = std::sqrt(ss);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  SvdResult result;
  result.sweeps = sweep;
  result.singular_values.reserve(n);
  for (std::size_t j : order) result.singular_values.push_back(sigma[j]);
  if (want_factors) {
    Matrix u(m, n), vv(n, n);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t j = order[r];
      const double inv = sigma[j] > 0.0 ? 1.0 / sigma[j] : 0.0;
      for (std::size_t k = 0; k < m; ++k) u(k, r) = g[j][k] * inv;
      for (std::size_t k = 0; k < n; ++k) vv(k, r) = v[j][k];
    }
    if (flip) {
      result.u = std::move(vv);
      result.v = std::move(u);
    } else {
      result.u = std::move(u);
      result.v = std::move(vv);
    }
  }
  return result;
}

RankReport numerical_rank(const Matrix& a, double rel_eps, std::string name) {
  if (!(rel_eps > 0.0 && rel_eps < 1.0)) {
    throw ArgumentError("numerical_rank: rel_eps must lie in (0, 1), got " +
                        std::to_string(rel_eps));
  }
  const SvdResult s = svd(a);
  RankReport report;
  report.name = std::move(name);
  report.rows = a.rows();
  report.cols = a.cols();
  report.sigma_max = s.singular_values.front();
  report.sigma_min = s.singular_values.back();
  report.tolerance = rel_eps * report.sigma_max;
  report.numerical_rank = static_cast<std::size_t>(
      std::count_if(s.singular_values.begin(), s.singular_values.end(),
                    [&](double sv) { return sv > report.tolerance; }));
  return report;
}

Matrix low_rank_factory(std::size_t rows, std::size_t cols, std::size_t r, std::uint64_t seed) {
  if (r < 1 || r > std::min(rows, cols)) {
    throw ArgumentError("low_rank_factory: rank " + std::to_string(r) + " outside [1, " +
                        std::to_string(std::min(rows, cols)) + "]");
  }
  CounterRng rng(seed);
  const Matrix u = rng.normal_matrix(rows, r);
  const Matrix w = rng.normal_matrix(r, cols);
  return matmul(u, w);
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape("max_abs_diff", a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

bool all_finite(const Matrix& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

double sum(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double dot(const Matrix& a, const Matrix& b) {
  require_same_shape("dot", a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

}  // namespace rala::linalg
