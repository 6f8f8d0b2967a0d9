#include "rala/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace rala::ad {
namespace {

Matrix away_from_zero(CounterRng& rng, std::size_t rows, std::size_t cols) {
  // Keeps entries at least 0.05 from the kinks of relu / elu+1.
  Matrix m = rng.normal_matrix(rows, cols);
  for (double& v : m.data()) v = std::copysign(std::abs(v) + 0.05, v);
  return m;
}

Matrix positive(CounterRng& rng, std::size_t rows, std::size_t cols) {
  return rng.uniform_matrix(rows, cols, 0.5, 2.0);
}

template <typename F>
GradCheckCase unary_case(std::string name, F f) {
  return {std::move(name), [](CounterRng& rng) { return std::vector{away_from_zero(rng, 3, 4)}; },
          [f](Tape&, std::span<const Var> v) { return f(v[0]); }};
}

}  // namespace

std::vector<GradCheckCase> op_gradcheck_cases() {
  std::vector<GradCheckCase> cases;
  cases.push_back({"matmul",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(3, 4), rng.normal_matrix(4, 2)};
                   },
                   [](Tape&, std::span<const Var> v) { return matmul(v[0], v[1]); }});
  cases.push_back(unary_case("transpose", [](const Var& x) { return transpose(x); }));
  cases.push_back({"add",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(3, 4), rng.normal_matrix(3, 4)};
                   },
                   [](Tape&, std::span<const Var> v) { return add(v[0], v[1]); }});
  cases.push_back({"sub",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(3, 4), rng.normal_matrix(3, 4)};
                   },
                   [](Tape&, std::span<const Var> v) { return sub(v[0], v[1]); }});
  cases.push_back(unary_case("scale", [](const Var& x) { return scale(x, -1.75); }));
  cases.push_back({"hadamard",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(3, 4), rng.normal_matrix(3, 4)};
                   },
                   [](Tape&, std::span<const Var> v) { return hadamard(v[0], v[1]); }});
  cases.push_back({"add_bias",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(3, 4), rng.normal_matrix(1, 4)};
                   },
                   [](Tape&, std::span<const Var> v) { return add_bias(v[0], v[1]); }});
  cases.push_back({"scale_rows",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(3, 4), rng.normal_matrix(3, 1)};
                   },
                   [](Tape&, std::span<const Var> v) { return scale_rows(v[0], v[1]); }});
  cases.push_back({"div_rows",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(3, 4), positive(rng, 3, 1)};
                   },
                   [](Tape&, std::span<const Var> v) { return div_rows(v[0], v[1]); }});
  cases.push_back(unary_case("softmax_rows", [](const Var& x) { return softmax_rows(x); }));
  cases.push_back(unary_case("kernel_elu1", [](const Var& x) { return kernel_elu1(x); }));
  cases.push_back(unary_case("relu", [](const Var& x) { return relu(x); }));
  cases.push_back(unary_case("tanh", [](const Var& x) { return tanh_map(x); }));
  cases.push_back(unary_case("gelu", [](const Var& x) { return gelu(x); }));
  cases.push_back(unary_case("mean_rows", [](const Var& x) { return mean_rows(x); }));
  cases.push_back({"layer_norm",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(3, 4), rng.normal_matrix(1, 4),
                                        rng.normal_matrix(1, 4)};
                   },
                   [](Tape&, std::span<const Var> v) { return layer_norm(v[0], v[1], v[2]); }});
  cases.push_back(unary_case("slice_cols", [](const Var& x) { return slice_cols(x, 1, 2); }));
  cases.push_back({"concat_cols",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(3, 4), rng.normal_matrix(3, 2)};
                   },
                   [](Tape&, std::span<const Var> v) {
                     return concat_cols(std::vector{v[0], v[1], v[0]});
                   }});
  cases.push_back({"depthwise_conv3x3",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(12, 2), rng.normal_matrix(9, 2),
                                        rng.normal_matrix(1, 2)};
                   },
                   [](Tape&, std::span<const Var> v) {
                     return depthwise_conv3x3(v[0], 3, 4, v[1], v[2]);
                   }});
  cases.push_back({"im2col3x3",
                   [](CounterRng& rng) { return std::vector{rng.normal_matrix(16, 2)}; },
                   [](Tape&, std::span<const Var> v) { return im2col3x3(v[0], 4, 4, 2); }});
  cases.push_back({"cross_entropy",
                   [](CounterRng& rng) { return std::vector{rng.normal_matrix(3, 4)}; },
                   [](Tape&, std::span<const Var> v) {
                     return cross_entropy(v[0], {2, 0, 3});
                   }});
  return cases;
}

GradCheckReport run_gradcheck(const GradCheckCase& c, int trials, double h, std::uint64_t seed) {
  GradCheckReport worst;
  worst.op = c.name;
  worst.step = h;
  for (int t = 0; t < trials; ++t) {
    CounterRng rng(seed, static_cast<std::uint64_t>(t) + 1);
    const std::vector<Matrix> leaves = c.make_leaves(rng);
    GradCheckReport r = finite_diff_check(c.expr, leaves, h, seed + static_cast<std::uint64_t>(t), c.name);
    if (t == 0 || r.max_rel_error > worst.max_rel_error) {
      worst.max_rel_error = r.max_rel_error;
      worst.shapes = std::move(r.shapes);
    }
  }
  return worst;
}

}  // namespace rala::ad
