#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rala/attention.hpp"
#include "rala/backbone.hpp"
#include "rala/linalg.hpp"

// Rank instrumentation of attention layers and the attention-core scaling benchmark, with
// CSV/JSON tables for downstream plotting.
namespace rala::analysis {

enum class TableFormat { csv, json };
TableFormat parse_format(std::string_view s);

// ---------------------------------------------------------------------------
// Rank traces.
// ---------------------------------------------------------------------------

struct RankRecord {
  std::size_t layer_index = 0;
  linalg::RankReport report;  // report.name is the matrix name
  bool operator==(const RankRecord&) const = default;
};

// Per traced layer, in order: "kappa_q", "kv_buffer", "pre_modulation", "output". Matrices
// a variant does not form (the buffer of softmax attention) are omitted.
struct LayerRankTrace {
  std::vector<RankRecord> records;
  std::string fingerprint;
  std::uint64_t seed = 0;
  std::size_t head = 0;
};

// Ranks the captured matrices of `head` in every attention layer of the model on one image.
LayerRankTrace layer_rank_trace(const backbone::Model& model, const Matrix& image,
                                double rel_eps = linalg::kDefaultRankEps, std::size_t head = 0,
                                std::uint64_t seed = 0);

// N x d keys whose elu+1 features form an exactly positive matrix of rank key_rank: the
// features are U W with U, W drawn uniformly from [0.1, 1], mapped back through the inverse
// of elu+1.
Matrix constructed_keys(std::size_t n, std::size_t d, std::size_t key_rank, std::uint64_t seed);

struct ConstructedSetup {
  attention::Variant variant = attention::Variant::rala;
  std::size_t n = 196;
  std::size_t d = 64;
  std::size_t key_rank = 8;  // 0 keeps random full-rank keys
  bool kv_augment = true;
  bool out_augment = true;
  double rel_eps = linalg::kDefaultRankEps;
  std::uint64_t seed = 0;
};

// One attention head on seeded inputs: X, Q, V standard normal, keys from constructed_keys,
// phi a seeded linear projection. Layer index 0.
LayerRankTrace constructed_rank_trace(const ConstructedSetup& setup);

std::string rank_table_csv(const LayerRankTrace& trace);
nlohmann::ordered_json rank_table_json(const LayerRankTrace& trace);
// Throws FormatError on a malformed table.
std::vector<RankRecord> parse_rank_csv(std::string_view text);
LayerRankTrace parse_rank_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Scaling benchmark.
// ---------------------------------------------------------------------------

struct ScalingRecord {
  attention::Variant variant = attention::Variant::softmax;
  std::size_t n = 0;
  std::size_t d = 0;
  std::uint64_t flops = 0;
  double wall_time_s = 0.0;
  std::uint64_t seed = 0;
  bool operator==(const ScalingRecord&) const = default;
};

// Closed-form operation count of one attention core. A multiply-add counts as two and a
// softmax as three per entry (exp, sum, divide):
//   softmax         4N^2 d + 4N^2  (QK^T and PV, plus the 1/sqrt(d) scale and softmax)
//   linear_vanilla  4N d^2 + 7N d  (buffer and output, key sum, normalizer, divide, kernels)
//   efficient       4N d^2 + 6N d  (buffer and output, two softmaxes over N x d)
//   rala            4N d^2 + 12N d + 4N
//                   (vanilla terms plus global query, alpha scores and scaling, the phi
//                    Hadamard product, and a softmax over N scores)
std::uint64_t attention_core_flops(attention::Variant variant, std::size_t n, std::size_t d);

struct BenchSetup {
  std::vector<attention::Variant> variants{attention::Variant::softmax, attention::Variant::rala};
  std::vector<std::size_t> n_list{196, 392, 784, 1568, 3136};
  std::size_t d = 64;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
};

// Throws ArgumentError unless the N list is strictly increasing, has at least 4 points and
// spans at least a factor of 16, and repeats >= 1.
void validate(const BenchSetup& setup);

// One record per (variant, N) in input order. Wall time is the median over `repeats` samples
// of the per-call time. One untimed warm-up call per point sizes its samples: each sample
// repeats the call until it lasts at least 50 ms. Samples cycle over N.
std::vector<ScalingRecord> scaling_benchmark(const BenchSetup& setup);

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

struct SlopeSummary {
  attention::Variant variant;
  double flops_slope = 0.0;
  double time_slope = 0.0;
};
std::vector<SlopeSummary> fit_slopes(const std::vector<ScalingRecord>& records);

std::string scaling_table_csv(const std::vector<ScalingRecord>& records);
nlohmann::ordered_json scaling_table_json(const std::vector<ScalingRecord>& records);
std::vector<ScalingRecord> parse_scaling_csv(std::string_view text);
std::vector<ScalingRecord> parse_scaling_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Files.
// ---------------------------------------------------------------------------

// Writes the table; ArgumentError for an empty table, IoError naming the path on failure.
void export_table(const LayerRankTrace& trace, TableFormat format, const std::string& path);
void export_table(const std::vector<ScalingRecord>& records, TableFormat format,
                  const std::string& path);
std::string render_table(const LayerRankTrace& trace, TableFormat format);
std::string render_table(const std::vector<ScalingRecord>& records, TableFormat format);

}  // namespace rala::analysis
