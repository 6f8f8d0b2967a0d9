#pragma once

#include <vector>

#include "rala/gradcheck.hpp"

namespace rala::backbone {

// Composite cases: single-head RALA, multi-head attention, CPE, FFN, downsampling and a
// full pre-norm block on an 8x8 token grid.
std::vector<ad::GradCheckCase> model_gradcheck_cases();

// op_gradcheck_cases() followed by model_gradcheck_cases().
std::vector<ad::GradCheckCase> all_gradcheck_cases();

}  // namespace rala::backbone
