#include "rala/rng.hpp"

#include <cmath>
#include <numbers>

namespace rala {

double CounterRng::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller on two counter draws.
  const double u1 = uniform_open_zero();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

double CounterRng::truncated_normal(double std) noexcept {
  for (;;) {
    const double z = normal();
    if (std::abs(z) <= 2.0) return z * std;
  }
}

Matrix CounterRng::normal_matrix(std::size_t rows, std::size_t cols, double std) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = normal() * std;
  return m;
}

Matrix CounterRng::uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = lo + (hi - lo) * uniform();
  return m;
}

}  // namespace rala
