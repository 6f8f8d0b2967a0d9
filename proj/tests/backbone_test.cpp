#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <string>

#include "rala/autodiff.hpp"
#include "rala/backbone.hpp"
#include "rala/errors.hpp"
#include "rala/model_gradcheck.hpp"
#include "rala/rng.hpp"

namespace {

using rala::CounterRng;
using rala::Matrix;
using namespace rala::backbone;
namespace la = rala::linalg;
namespace ad = rala::ad;

// Direct sliding-window 3x3 convolution with zero padding 1. weight is (9*C_in) x C_out in
// (ky*3 + kx)*C_in + c order; depthwise when depthwise = true (weight 9 x C).
Matrix sliding_window(const Matrix& x, std::size_t h, std::size_t w, const Matrix& weight,
                      const Matrix& bias, std::size_t stride, bool depthwise) {
  const std::size_t cin = x.cols();
  const std::size_t cout = depthwise ? cin : weight.cols();
  const std::size_t oh = (h - 1) / stride + 1, ow = (w - 1) / stride + 1;
  Matrix y(oh * ow, cout);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = bias(0, o);
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const long iy = static_cast<long>(oy * stride) + ky - 1;
            const long ix = static_cast<long>(ox * stride) + kx - 1;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
            const std::size_t tok = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
            const std::size_t tap = static_cast<std::size_t>(ky * 3 + kx);
            if (depthwise) {
              acc += weight(tap, o) * x(tok, o);
            } else {
              for (std::size_t c = 0; c < cin; ++c) acc += weight(tap * cin + c, o) * x(tok, c);
            }
          }
        y(oy * ow + ox, o) = acc;
      }
  return y;
}

std::uint64_t layout_size(const std::vector<ParamSpec>& layout) {
  std::uint64_t n = 0;
  for (const auto& p : layout) n += p.rows * p.cols;
  return n;
}

double rel(double a, double b) { return std::abs(a - b) / b; }

// ---------------------------------------------------------------------------

TEST(Cpe, ZeroWeightsAreIdentity) {
  CounterRng rng(1);
  const Matrix x = rng.normal_matrix(12, 5);
  EXPECT_EQ(cpe_forward(x, 3, 4, Matrix(9, 5), Matrix(1, 5)), x);
}

TEST(Cpe, ConstantInputInteriorScales) {
  CounterRng rng(2);
  const Matrix w = rng.normal_matrix(9, 2);
  const Matrix x(25, 2, 1.5);
  const Matrix y = cpe_forward(x, 5, 5, w, Matrix(1, 2));
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0.0;
    for (std::size_t t = 0; t < 9; ++t) s += w(t, c);
    for (std::size_t iy = 1; iy < 4; ++iy)
      for (std::size_t ix = 1; ix < 4; ++ix) EXPECT_NEAR(y(iy * 5 + ix, c), 1.5 * (1 + s), 1e-13);
  }
}

TEST(Cpe, MatchesSlidingWindow) {
  CounterRng rng(3);
  const Matrix x = rng.normal_matrix(16, 3), w = rng.normal_matrix(9, 3), b = rng.normal_matrix(1, 3);
  const Matrix expected = la::add(x, sliding_window(x, 4, 4, w, b, 1, true));
  EXPECT_LT(la::max_abs_diff(cpe_forward(x, 4, 4, w, b), expected), 1e-12);
}

TEST(Cpe, TokenCountMustMatchGrid) {
  EXPECT_THROW(cpe_forward(Matrix(15, 2), 4, 4, Matrix(9, 2), Matrix(1, 2)), rala::DimensionError);
}

TEST(Ffn, ZeroSecondLayerGivesZero) {
  CounterRng rng(4);
  const FfnParams<Matrix> p{rng.normal_matrix(3, 12), rng.normal_matrix(1, 12), Matrix(12, 3), Matrix(1, 3)};
  EXPECT_EQ(ffn_forward(rng.normal_matrix(5, 3), p), Matrix(5, 3));
}

TEST(Ffn, ZeroInputGivesOutputBias) {
  CounterRng rng(5);
  const Matrix b2 = rng.normal_matrix(1, 3);
  const FfnParams<Matrix> p{rng.normal_matrix(3, 12), Matrix(1, 12), rng.normal_matrix(12, 3), b2};
  const Matrix y = ffn_forward(Matrix(4, 3), p);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y(i, c), b2(0, c));
}

TEST(Ffn, ShapeMismatch) {
  const FfnParams<Matrix> p{Matrix(4, 8), Matrix(1, 8), Matrix(8, 4), Matrix(1, 4)};
  EXPECT_THROW(ffn_forward(Matrix(2, 3), p), rala::DimensionError);
}

TEST(Downsample, AveragingKernelOnConstantInput) {
  // With padding 1, border outputs see only the in-bounds taps.
  const Matrix x(16, 1, 9.0);
  const Matrix w(9, 1, 1.0 / 9.0);
  const Matrix y = downsample_forward(x, 4, 4, w, Matrix(1, 1));
  ASSERT_EQ(y.rows(), 4u);
  EXPECT_NEAR(y(0, 0), 4.0, 1e-14);
  EXPECT_NEAR(y(1, 0), 6.0, 1e-14);
  EXPECT_NEAR(y(2, 0), 6.0, 1e-14);
  EXPECT_NEAR(y(3, 0), 9.0, 1e-14);
}

TEST(Downsample, HalvesSpatialDimsAndMatchesSlidingWindow) {
  CounterRng rng(6);
  const Matrix x = rng.normal_matrix(6 * 8, 3), w = rng.normal_matrix(27, 5), b = rng.normal_matrix(1, 5);
  const Matrix y = downsample_forward(x, 6, 8, w, b);
  EXPECT_EQ(y.rows(), 3u * 4u);
  EXPECT_EQ(y.cols(), 5u);
  EXPECT_LT(la::max_abs_diff(y, sliding_window(x, 6, 8, w, b, 2, false)), 1e-12);
}

TEST(Downsample, OddDimsRejected) {
  EXPECT_THROW(downsample_forward(Matrix(15, 1), 5, 3, Matrix(9, 1), Matrix(1, 1)), rala::DimensionError);
}

TEST(Block, ZeroResidualBranchesReturnCpeOutput) {
  CounterRng rng(7);
  const std::size_t c = 4;
  BlockParams<Matrix> p;
  p.cpe_weight = rng.normal_matrix(9, c);
  p.cpe_bias = rng.normal_matrix(1, c);
  p.norm1_gamma = p.norm2_gamma = Matrix::ones(1, c);
  p.norm1_beta = p.norm2_beta = Matrix(1, c);
  p.attn = {rng.normal_matrix(c, c), Matrix(1, c), rng.normal_matrix(c, c), Matrix(1, c),
            rng.normal_matrix(c, c), Matrix(1, c), rng.normal_matrix(c, c), Matrix(1, c),
            Matrix(c, c), Matrix(1, c)};
  p.ffn = {rng.normal_matrix(c, 16), Matrix(1, 16), Matrix(16, c), Matrix(1, c)};
  rala::attention::AttentionConfig a;
  a.heads = 2;
  a.head_dim = 2;
  const Matrix x = rng.normal_matrix(16, c);
  const Matrix y = block_forward(x, BlockShape{4, 4, true, true, a}, p);
  EXPECT_EQ(y, cpe_forward(x, 4, 4, p.cpe_weight, p.cpe_bias));
}

TEST(Block, DisablingCpeRemovesTenCParametersPerBlock) {
  for (const auto& name : preset_names()) {
    ModelConfig on = preset(name), off = preset(name);
    off.cpe_enabled = false;
    std::uint64_t expected = 0;
    for (std::size_t s = 0; s < kStages; ++s) expected += on.stage_blocks[s] * (9 + 1) * on.stage_channels[s];
    EXPECT_EQ(count_params(on).parameter_count - count_params(off).parameter_count, expected) << name;
    EXPECT_EQ(layout_size(param_layout(on)) - layout_size(param_layout(off)), expected) << name;
  }
}

TEST(Block, PostNormVariantRuns) {
  ModelConfig c = preset("toy");
  c.pre_norm = false;
  const Model m = init_model(c, 3);
  CounterRng rng(8);
  EXPECT_TRUE(la::all_finite(model_forward(m, rng.normal_matrix(64 * 64, 3))));
}

TEST(GradCheck, CompositeCasesPass) {
  for (const auto& c : model_gradcheck_cases()) {
    const int trials = c.name == "block" ? 3 : 10;
    EXPECT_LT(ad::run_gradcheck(c, trials, 1e-5, 77).max_rel_error, 1e-4) << c.name;
  }
}

TEST(GradCheck, FfnBelowTighterBound) {
  for (const auto& c : model_gradcheck_cases())
    if (c.name == "ffn") {
      EXPECT_LT(ad::run_gradcheck(c, 20, 1e-5, 5).max_rel_error, 1e-5);
    }
}

TEST(Model, ToyLogitsAreFinite) {
  const Model m = init_model(preset("toy"), 0);
  CounterRng rng(9);
  const Matrix logits = model_forward(m, rng.normal_matrix(64 * 64, 3));
  EXPECT_EQ(logits.rows(), 1u);
  EXPECT_EQ(logits.cols(), 10u);
  EXPECT_TRUE(la::all_finite(logits));
}

TEST(Model, ResolutionMustBeMultipleOf32) {
  const Model m = init_model(preset("toy"), 0);
  EXPECT_THROW(forward_generic<Matrix>(m.config, m.params, Matrix(48 * 48, 3), 48, 48), rala::DimensionError);
  EXPECT_THROW(model_forward(m, Matrix(10, 3)), rala::DimensionError);
  ModelConfig bad = preset("toy");
  bad.input_resolution = 48;
  EXPECT_THROW(bad.validate(), rala::ArgumentError);
}

TEST(Model, TapeForwardIsBitIdentical) {
  const Model m = init_model(preset("toy"), 4);
  CounterRng rng(10);
  const Matrix image = rng.normal_matrix(64 * 64, 3);
  ad::Tape tape;
  std::vector<ad::Var> params;
  for (const Matrix& p : m.params) params.push_back(tape.leaf(p));
  const ad::Var logits = forward_generic<ad::Var>(m.config, params, tape.constant(image), 64, 64);
  EXPECT_EQ(logits.value(), model_forward(m, image));
}

TEST(Model, StageTokenCountsAt224) {
  const auto t = stage_token_counts(preset("ravlt-t"), 224);
  EXPECT_EQ(t[0], 3136u);
  EXPECT_EQ(t[1], 784u);
  EXPECT_EQ(t[2], 196u);
  EXPECT_EQ(t[3], 49u);
}

TEST(Model, ObserverSeesEveryLayer) {
  const Model m = init_model(preset("toy"), 0);
  std::set<std::size_t> layers;
  std::size_t captures = 0;
  model_forward(m, Matrix(64 * 64, 3, 0.1), [&](std::size_t layer, const rala::attention::HeadCapture&) {
    layers.insert(layer);
    ++captures;
  });
  EXPECT_EQ(layers.size(), 5u);
  EXPECT_EQ(captures, 1u + 2u + 2 * 4u + 8u);
}

TEST(Init, WeightsBiasesAndGains) {
  const Model m = init_model(preset("toy"), 11);
  double sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.layout.size(); ++i) {
    const auto& spec = m.layout[i];
    ASSERT_EQ(m.params[i].rows(), spec.rows);
    ASSERT_EQ(m.params[i].cols(), spec.cols);
    for (double v : m.params[i].data()) {
      if (spec.init == Init::zeros) {
        EXPECT_EQ(v, 0.0);
      } else if (spec.init == Init::ones) {
        EXPECT_EQ(v, 1.0);
      } else {
        EXPECT_LE(std::abs(v), 2 * kInitStd);
        sq += v * v;
        ++n;
      }
    }
  }
  const double std = std::sqrt(sq / static_cast<double>(n));
  // A normal truncated at two sigma has standard deviation 0.88 sigma.
  EXPECT_NEAR(std, 0.88 * kInitStd, 0.001);
  EXPECT_EQ(init_model(preset("toy"), 11).params, m.params);
}

TEST(Layout, NamesAreUnique) {
  const auto layout = param_layout(preset("ravlt-s"));
  std::set<std::string> names;
  for (const auto& p : layout) EXPECT_TRUE(names.insert(p.name).second) << p.name;
}

// ---------------------------------------------------------------------------

TEST(Cost, ClosedFormParamsMatchLayout) {
  for (const auto& name : preset_names()) {
    for (int variant = 0; variant < 4; ++variant) {
      ModelConfig c = preset(name);
      c.cpe_enabled = variant != 1;
      if (variant == 2) c.phi = rala::attention::Phi::tanh;
      if (variant == 3) c.out_augment = false, c.ffn_ratio = 2.5;
      EXPECT_EQ(count_params(c).parameter_count, layout_size(param_layout(c))) << name << variant;
    }
  }
}

TEST(Cost, TotalsEqualBreakdown) {
  for (const auto& name : preset_names()) {
    const CostReport r = count_flops(preset(name), 224);
    std::uint64_t p = 0, f = 0;
    for (const auto& e : r.breakdown) p += e.params, f += e.flops;
    EXPECT_EQ(r.parameter_count, p);
    EXPECT_EQ(r.flops, f);
    EXPECT_EQ(r.breakdown.size(), 6u);
  }
}

TEST(Cost, TableOneWithinFifteenPercent) {
  struct Row {
    const char* name;
    double params, flops;
  };
  for (const Row& row : {Row{"ravlt-t", 15e6, 2.4e9}, Row{"ravlt-s", 26e6, 4.6e9},
                         Row{"ravlt-b", 48e6, 9.9e9}, Row{"ravlt-l", 95e6, 16.0e9}}) {
    const CostReport r = count_flops(preset(row.name), 224);
    EXPECT_LE(rel(static_cast<double>(r.parameter_count), row.params), 0.15) << row.name;
    EXPECT_LE(rel(static_cast<double>(r.flops), row.flops), 0.15) << row.name;
  }
}

TEST(Cost, DoublingChannelsQuadruplesAttentionAndFfnWeights) {
  ModelConfig c = preset("ravlt-t");
  ModelConfig d = c;
  for (auto& ch : d.stage_channels) ch *= 2;
  auto mixing_weights = [](const ModelConfig& cfg) {
    std::uint64_t n = 0;
    for (const auto& p : param_layout(cfg))
      if ((p.name.find(".attn.") != std::string::npos || p.name.find(".ffn.") != std::string::npos) &&
          p.name.ends_with(".weight"))
        n += p.rows * p.cols;
    return n;
  };
  EXPECT_EQ(mixing_weights(d), 4 * mixing_weights(c));
}

TEST(Cost, ParamsIndependentOfResolutionAndFlopsLinearInTokens) {
  const ModelConfig c = preset("ravlt-t");
  const CostReport a = count_flops(c, 224), b = count_flops(c, 448);
  EXPECT_EQ(a.parameter_count, b.parameter_count);
  const std::uint64_t head = a.breakdown.back().flops;
  EXPECT_EQ(b.breakdown.back().flops, head);
  EXPECT_EQ(b.flops - head, 4 * (a.flops - head));
}

// ---------------------------------------------------------------------------

TEST(Config, PresetsMatchTableRows) {
  EXPECT_EQ(table_row(preset("ravlt-t")), "[2,2,6,2]/[64,128,256,512]/[1,2,4,8]");
  EXPECT_EQ(table_row(preset("ravlt-s")), "[3,5,9,3]/[64,128,320,512]/[1,2,5,8]");
  EXPECT_EQ(table_row(preset("ravlt-b")), "[4,6,12,6]/[96,192,384,512]/[1,2,6,8]");
  EXPECT_EQ(table_row(preset("ravlt-l")), "[4,7,19,8]/[96,192,448,640]/[1,2,7,10]");
  EXPECT_EQ(table_row(preset("toy")), "[1,1,2,1]/[16,32,64,128]/[1,2,4,8]");
}

TEST(Config, DumpMatchesFixture) {
  const char* fixture = R"({
  "stage_blocks": [
    2,
    2,
    6,
    2
  ],
  "stage_channels": [
    64,
    128,
    256,
    512
  ],
  "stage_heads": [
    1,
    2,
    4,
    8
  ],
  "ffn_ratio": 4.0,
  "num_classes": 1000,
  "input_resolution": 224,
  "cpe_enabled": true,
  "kv_augment": true,
  "out_augment": true,
  "kernel": "elu1",
  "phi": "linear_projection",
  "normalize": true,
  "pre_norm": true
})";
  EXPECT_EQ(dump_config(preset("ravlt-t")), fixture);
}

TEST(Config, JsonRoundTrip) {
  for (const auto& name : preset_names()) {
    ModelConfig c = preset(name);
    c.kv_augment = false;
    c.phi = rala::attention::Phi::tanh;
    EXPECT_EQ(from_json(nlohmann::json::parse(dump_config(c))), c) << name;
  }
}

TEST(Config, JsonErrors) {
  auto j = nlohmann::json::parse(dump_config(preset("toy")));
  auto unknown = j;
  unknown["dropout"] = 0.1;
  EXPECT_THROW(from_json(unknown), rala::FormatError);
  auto missing = j;
  missing.erase("stage_heads");
  EXPECT_THROW(from_json(missing), rala::FormatError);
  auto wrong_type = j;
  wrong_type["num_classes"] = "ten";
  EXPECT_THROW(from_json(wrong_type), rala::FormatError);
  auto indivisible = j;
  indivisible["stage_heads"] = {1, 3, 4, 8};
  EXPECT_THROW(from_json(indivisible), rala::ArgumentError);
  EXPECT_THROW(preset("ravlt-xl"), rala::ArgumentError);
}

}  // namespace
