#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rala/autodiff.hpp"
#include "rala/rng.hpp"

namespace rala::ad {

// A named expression plus a generator for its seeded inputs.
struct GradCheckCase {
  std::string name;
  std::function<std::vector<Matrix>(CounterRng&)> make_leaves;
  Expr expr;
};

// One case per operation in the op set, on small seeded inputs (3x4 where shapes allow).
std::vector<GradCheckCase> op_gradcheck_cases();

// Runs the case `trials` times on fresh inputs; the report carries the worst trial.
GradCheckReport run_gradcheck(const GradCheckCase& c, int trials, double h, std::uint64_t seed);

}  // namespace rala::ad
