#include "rala/model_gradcheck.hpp"

#include "rala/backbone.hpp"

namespace rala::backbone {
namespace {

using ad::Tape;
using ad::Var;

constexpr std::size_t kGrid = 8;
constexpr std::size_t kWidth = 4;

attention::AttentionConfig block_attention() {
  attention::AttentionConfig a;
  a.heads = 2;
  a.head_dim = kWidth / 2;
  return a;
}

// x, then the block parameters in layout order.
std::vector<Matrix> block_leaves(CounterRng& rng) {
  const std::size_t c = kWidth, hidden = 4 * kWidth;
  const double s = 0.5;
  auto gain = [&] { return rng.uniform_matrix(1, c, 0.5, 1.5); };
  return {rng.normal_matrix(kGrid * kGrid, c),
          rng.normal_matrix(9, c, 0.3), rng.normal_matrix(1, c, 0.1),
          gain(), rng.normal_matrix(1, c, 0.1),
          rng.normal_matrix(c, c, s), rng.normal_matrix(1, c, 0.1),
          rng.normal_matrix(c, c, s), rng.normal_matrix(1, c, 0.1),
          rng.normal_matrix(c, c, s), rng.normal_matrix(1, c, 0.1),
          rng.normal_matrix(c, c, s), rng.normal_matrix(1, c, 0.1),
          rng.normal_matrix(c, c, s), rng.normal_matrix(1, c, 0.1),
          gain(), rng.normal_matrix(1, c, 0.1),
          rng.normal_matrix(c, hidden, s), rng.normal_matrix(1, hidden, 0.1),
          rng.normal_matrix(hidden, c, s), rng.normal_matrix(1, c, 0.1)};
}

Var block_expr(Tape&, std::span<const Var> v) {
  detail::ParamCursor<Var> cur(v.subspan(1));
  const BlockParams<Var> p = take_block(cur, true, true);
  return block_forward(v[0], BlockShape{kGrid, kGrid, true, true, block_attention()}, p);
}

}  // namespace

std::vector<ad::GradCheckCase> model_gradcheck_cases() {
  std::vector<ad::GradCheckCase> cases;
  cases.push_back({"rala_attention",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(6, 4), rng.normal_matrix(6, 4),
                                        rng.normal_matrix(6, 4), rng.normal_matrix(6, 4),
                                        rng.normal_matrix(4, 4), rng.normal_matrix(1, 4)};
                   },
                   [](Tape&, std::span<const Var> v) {
                     attention::AttentionConfig cfg;
                     cfg.head_dim = 4;
                     const Var phi_x = add_bias(matmul(v[0], v[4]), v[5]);
                     return attention::head_core(&phi_x, v[1], v[2], v[3], cfg, 0, {});
                   }});
  cases.push_back({"multi_head_attention",
                   [](CounterRng& rng) {
                     std::vector<Matrix> m{rng.normal_matrix(5, 4)};
                     for (int i = 0; i < 5; ++i) {
                       m.push_back(rng.normal_matrix(4, 4, 0.5));
                       m.push_back(rng.normal_matrix(1, 4, 0.1));
                     }
                     return m;
                   },
                   [](Tape&, std::span<const Var> v) {
                     attention::AttentionConfig cfg;
                     cfg.heads = 2;
                     cfg.head_dim = 2;
                     const attention::MhaWeights<Var> w{v[1], v[2], v[3], v[4], v[5],
                                                        v[6], v[7], v[8], v[9], v[10]};
                     return attention::multi_head(v[0], cfg, w);
                   }});
  cases.push_back({"cpe",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(16, 3), rng.normal_matrix(9, 3),
                                        rng.normal_matrix(1, 3)};
                   },
                   [](Tape&, std::span<const Var> v) { return cpe_forward(v[0], 4, 4, v[1], v[2]); }});
  cases.push_back({"ffn",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(5, 3), rng.normal_matrix(3, 12, 0.5),
                                        rng.normal_matrix(1, 12, 0.1), rng.normal_matrix(12, 3, 0.5),
                                        rng.normal_matrix(1, 3, 0.1)};
                   },
                   [](Tape&, std::span<const Var> v) {
                     return ffn_forward(v[0], FfnParams<Var>{v[1], v[2], v[3], v[4]});
                   }});
  cases.push_back({"downsample",
                   [](CounterRng& rng) {
                     return std::vector{rng.normal_matrix(16, 2), rng.normal_matrix(18, 3, 0.5),
                                        rng.normal_matrix(1, 3, 0.1)};
                   },
                   [](Tape&, std::span<const Var> v) {
                     return downsample_forward(v[0], 4, 4, v[1], v[2]);
                   }});
  cases.push_back({"block", block_leaves, block_expr});
  return cases;
}

std::vector<ad::GradCheckCase> all_gradcheck_cases() {
  std::vector<ad::GradCheckCase> cases = ad::op_gradcheck_cases();
  for (auto& c : model_gradcheck_cases()) cases.push_back(std::move(c));
  return cases;
}

}  // namespace rala::backbone
