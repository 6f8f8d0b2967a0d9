#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "rala/autodiff.hpp"
#include "rala/errors.hpp"
#include "rala/gradcheck.hpp"
#include "rala/rng.hpp"

namespace {

using rala::CounterRng;
using rala::Matrix;
using namespace rala::ad;
namespace la = rala::linalg;

TEST(Forward, IdentityExpressionReturnsLeaf) {
  const Matrix a{{1, 2}, {3, 4}};
  const Recording rec = forward([](Tape&, std::span<const Var> v) { return v[0]; }, std::vector{a});
  EXPECT_EQ(rec.value(), a);
  const auto grads = backward(rec, Matrix::ones(2, 2));
  ASSERT_EQ(grads.size(), 1u);
  EXPECT_EQ(grads[0], Matrix::ones(2, 2));
}

TEST(Forward, MatmulByIdentity) {
  CounterRng rng(1);
  const Matrix a = rng.normal_matrix(3, 3);
  const Recording rec = forward([](Tape&, std::span<const Var> v) { return matmul(v[0], v[1]); },
                                std::vector{a, Matrix::identity(3)});
  EXPECT_EQ(rec.value(), a);
}

TEST(Backward, ScalarProduct) {
  const Recording rec = forward([](Tape&, std::span<const Var> v) { return matmul(v[0], v[1]); },
                                std::vector{Matrix{{2.5}}, Matrix{{-4.0}}});
  const auto g = backward(rec, Matrix{{1.0}});
  EXPECT_EQ(g[0](0, 0), -4.0);
  EXPECT_EQ(g[1](0, 0), 2.5);
}

TEST(Backward, UnusedLeafGetsExactZero) {
  CounterRng rng(2);
  const Recording rec =
      forward([](Tape&, std::span<const Var> v) { return softmax_rows(v[0]); },
              std::vector{rng.normal_matrix(2, 3), rng.normal_matrix(4, 5)});
  const auto g = backward(rec, Matrix::ones(2, 3));
  EXPECT_EQ(g[1], Matrix(4, 5));
}

TEST(Backward, SeedShapeMustMatchOutput) {
  const Recording rec = forward([](Tape&, std::span<const Var> v) { return v[0]; },
                                std::vector{Matrix(2, 2)});
  EXPECT_THROW(backward(rec, Matrix(3, 2)), rala::DimensionError);
}

TEST(Backward, GradientOfSumIsSumOfGradients) {
  CounterRng rng(3);
  for (int t = 0; t < 10; ++t) {
    const std::vector<Matrix> leaves{rng.normal_matrix(3, 4), rng.normal_matrix(4, 3)};
    const Matrix seed = rng.normal_matrix(3, 3);
    auto f = [](Tape&, std::span<const Var> v) { return softmax_rows(matmul(v[0], v[1])); };
    auto g = [](Tape&, std::span<const Var> v) { return gelu(matmul(v[0], v[1])); };
    auto fg = [&](Tape& tape, std::span<const Var> v) { return add(f(tape, v), g(tape, v)); };
    const auto gf = backward(forward(f, leaves), seed);
    const auto gg = backward(forward(g, leaves), seed);
    const auto gfg = backward(forward(fg, leaves), seed);
    for (std::size_t l = 0; l < leaves.size(); ++l)
      EXPECT_LT(la::max_abs_diff(gfg[l], la::add(gf[l], gg[l])), 1e-13);
  }
}

TEST(Tape, ReplayReproducesCachedValuesBitExactly) {
  CounterRng rng(4);
  const Recording rec = forward(
      [](Tape&, std::span<const Var> v) {
        return layer_norm(gelu(add_bias(matmul(v[0], v[1]), v[2])), v[3], v[2]);
      },
      std::vector{rng.normal_matrix(5, 3), rng.normal_matrix(3, 4), rng.normal_matrix(1, 4),
                  rng.normal_matrix(1, 4)});
  EXPECT_TRUE(rec.tape->replay_matches());
  // Topological order by construction.
  for (std::size_t id = 0; id < rec.tape->nodes().size(); ++id)
    for (std::size_t in : rec.tape->nodes()[id].inputs) EXPECT_LT(in, id);
}

TEST(Tape, ShapeErrorCarriesNodePath) {
  try {
    forward([](Tape&, std::span<const Var> v) { return matmul(kernel_elu1(v[0]), v[1]); },
            std::vector{Matrix(2, 3), Matrix(2, 3)});
    FAIL() << "expected DimensionError";
  } catch (const rala::DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("node 3 (matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("kernel_elu1"), std::string::npos) << msg;
  }
}

TEST(FiniteDiff, LinearExpressionIsExactUpToRoundoff) {
  CounterRng rng(5);
  const auto report = finite_diff_check(
      [](Tape&, std::span<const Var> v) { return add(scale(v[0], 3.0), matmul(v[1], v[2])); },
      std::vector{rng.normal_matrix(3, 4), rng.normal_matrix(3, 2), rng.normal_matrix(2, 4)},
      1e-5);
  EXPECT_LT(report.max_rel_error, 1e-9);
}

TEST(FiniteDiff, SoftmaxOnTwoByThree) {
  CounterRng rng(6);
  const auto report = finite_diff_check(
      [](Tape&, std::span<const Var> v) { return softmax_rows(v[0]); },
      std::vector{rng.normal_matrix(2, 3)}, 1e-5);
  EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(FiniteDiff, StepOutOfRangeRejected) {
  EXPECT_THROW(finite_diff_check([](Tape&, std::span<const Var> v) { return v[0]; },
                                 std::vector{Matrix(1, 1)}, 0.1),
               rala::ArgumentError);
}

TEST(FiniteDiff, EveryOpMatchesCentralDifferences) {
  const auto cases = op_gradcheck_cases();
  EXPECT_GE(cases.size(), 20u);
  for (const auto& c : cases) {
    const GradCheckReport r = run_gradcheck(c, 20, 1e-5, 2024);
    EXPECT_LT(r.max_rel_error, 1e-5) << c.name;
  }
}

TEST(CrossEntropy, MatchesHandValue) {
  const Recording rec = forward(
      [](Tape&, std::span<const Var> v) { return cross_entropy(v[0], {0, 1}); },
      std::vector{Matrix{{0.0, 0.0}, {std::log(3.0), 0.0}}});
  // Row 0: -log(1/2); row 1: -log(1/4).
  EXPECT_NEAR(rec.value()(0, 0), 0.5 * (std::log(2.0) + std::log(4.0)), 1e-15);
}

}  // namespace
