#include "rala/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "rala/errors.hpp"
#include "rala/format.hpp"
#include "rala/rng.hpp"

namespace rala::analysis {
namespace la = rala::linalg;
using attention::Variant;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::string_view kRankHeader =
    "layer_index,matrix_name,rows,cols,numerical_rank,sigma_max,sigma_min,tolerance";
constexpr std::string_view kScalingHeader = "variant,N,d,flops,wall_time_s,seed";

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) return out;
    start = pos + 1;
  }
}

// Rows of a CSV table after checking its header; tolerates a missing final newline.
std::vector<std::vector<std::string>> csv_rows(std::string_view text, std::string_view header,
                                               std::size_t fields) {
  std::vector<std::string> lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty() || lines.front() != header) {
    throw FormatError("table header must be '" + std::string(header) + "'");
  }
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto row = split(lines[i], ',');
    if (row.size() != fields) {
      throw FormatError("line " + std::to_string(i + 1) + ": expected " + std::to_string(fields) +
                        " fields, got " + std::to_string(row.size()));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::uint64_t parse_uint(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw FormatError("not an unsigned integer: '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw FormatError("integer out of range: '" + s + "'");
  }
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw IoError("failed writing '" + path + "'");
}

void add_head_records(LayerRankTrace& trace, std::size_t layer, const attention::HeadCapture& c,
                      double rel_eps) {
  const std::pair<const char*, const Matrix*> mats[] = {{"kappa_q", &c.kappa_q},
                                                        {"kv_buffer", &c.kv_buffer},
                                                        {"pre_modulation", &c.pre_modulation},
                                                        {"output", &c.output}};
  for (const auto& [name, m] : mats)
    if (!m->empty()) trace.records.push_back({layer, la::numerical_rank(*m, rel_eps, name)});
}

}  // namespace

TableFormat parse_format(std::string_view s) {
  if (s == "csv") return TableFormat::csv;
  if (s == "json") return TableFormat::json;
  throw ArgumentError("unknown table format '" + std::string(s) + "' (csv or json)");
}

// ---------------------------------------------------------------------------

LayerRankTrace layer_rank_trace(const backbone::Model& model, const Matrix& image, double rel_eps,
                                std::size_t head, std::uint64_t seed) {
  LayerRankTrace trace;
  trace.seed = seed;
  trace.head = head;
  trace.fingerprint = "model:" + hex64(fnv1a(backbone::dump_config(model.config))) +
                      ";head=" + std::to_string(head) + ";rel_eps=" + format_double(rel_eps);
  backbone::model_forward(model, image, [&](std::size_t layer, const attention::HeadCapture& c) {
    if (c.head == head) add_head_records(trace, layer, c, rel_eps);
  });
  return trace;
}

Matrix constructed_keys(std::size_t n, std::size_t d, std::size_t key_rank, std::uint64_t seed) {
  if (key_rank == 0 || key_rank > std::min(n, d)) {
    throw ArgumentError("constructed_keys: key rank " + std::to_string(key_rank) + " outside [1, " +
                        std::to_string(std::min(n, d)) + "]");
  }
  CounterRng rng(seed, 0x6b657973);
  const Matrix features =
      la::matmul(rng.uniform_matrix(n, key_rank, 0.1, 1.0), rng.uniform_matrix(key_rank, d, 0.1, 1.0));
  Matrix keys(n, d);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const double y = features.data()[i];
    keys.data()[i] = y > 1.0 ? y - 1.0 : std::log(y);
  }
  return keys;
}

LayerRankTrace constructed_rank_trace(const ConstructedSetup& s) {
  if (s.n == 0 || s.d == 0) throw ArgumentError("constructed_rank_trace: n and d must be positive");
  CounterRng rng(s.seed, 0x72616e6b);
  const Matrix x = rng.normal_matrix(s.n, s.d);
  const Matrix q = rng.normal_matrix(s.n, s.d);
  const Matrix v = rng.normal_matrix(s.n, s.d);
  const Matrix k = s.key_rank == 0 ? rng.normal_matrix(s.n, s.d) : constructed_keys(s.n, s.d, s.key_rank, s.seed);
  const Matrix phi_w = rng.normal_matrix(s.d, s.d, 1.0 / std::sqrt(static_cast<double>(s.d)));
  const Matrix phi_b = rng.normal_matrix(1, s.d, 0.1);

  attention::AttentionConfig cfg;
  cfg.variant = s.variant;
  cfg.head_dim = s.d;
  cfg.kv_augment = s.kv_augment;
  cfg.out_augment = s.out_augment;

  LayerRankTrace trace;
  trace.seed = s.seed;
  trace.fingerprint = "constructed:variant=" + std::string(attention::to_string(s.variant)) +
                      ";n=" + std::to_string(s.n) + ";d=" + std::to_string(s.d) +
                      ";key_rank=" + std::to_string(s.key_rank) +
                      ";kv_augment=" + (s.kv_augment ? "1" : "0") +
                      ";out_augment=" + (s.out_augment ? "1" : "0") +
                      ";rel_eps=" + format_double(s.rel_eps);
  const Matrix phi_x = la::add_bias(la::matmul(x, phi_w), phi_b);
  attention::head_core<Matrix>(&phi_x, q, k, v, cfg, 0, [&](const attention::HeadCapture& c) {
    add_head_records(trace, 0, c, s.rel_eps);
  });
  return trace;
}

std::string rank_table_csv(const LayerRankTrace& trace) {
  std::string out(kRankHeader);
  out += '\n';
  for (const RankRecord& r : trace.records) {
    const la::RankReport& p = r.report;
    out += std::to_string(r.layer_index) + "," + p.name + "," + std::to_string(p.rows) + "," +
           std::to_string(p.cols) + "," + std::to_string(p.numerical_rank) + "," +
           format_double(p.sigma_max) + "," + format_double(p.sigma_min) + "," +
           format_double(p.tolerance) + "\n";
  }
  return out;
}

ordered_json rank_table_json(const LayerRankTrace& trace) {
  ordered_json j;
  j["fingerprint"] = trace.fingerprint;
  j["seed"] = trace.seed;
  j["head"] = trace.head;
  ordered_json rows = ordered_json::array();
  for (const RankRecord& r : trace.records) {
    ordered_json row;
    row["layer_index"] = r.layer_index;
    row["matrix_name"] = r.report.name;
    row["rows"] = r.report.rows;
    row["cols"] = r.report.cols;
    row["numerical_rank"] = r.report.numerical_rank;
    row["sigma_max"] = r.report.sigma_max;
    row["sigma_min"] = r.report.sigma_min;
    row["tolerance"] = r.report.tolerance;
    rows.push_back(std::move(row));
  }
  j["records"] = std::move(rows);
  return j;
}

std::vector<RankRecord> parse_rank_csv(std::string_view text) {
  std::vector<RankRecord> out;
  for (const auto& f : csv_rows(text, kRankHeader, 8)) {
    RankRecord r;
    r.layer_index = parse_uint(f[0]);
    r.report.name = f[1];
    r.report.rows = parse_uint(f[2]);
    r.report.cols = parse_uint(f[3]);
    r.report.numerical_rank = parse_uint(f[4]);
    r.report.sigma_max = parse_double(f[5]);
    r.report.sigma_min = parse_double(f[6]);
    r.report.tolerance = parse_double(f[7]);
    out.push_back(std::move(r));
  }
  return out;
}

LayerRankTrace parse_rank_json(const json& j) {
  try {
    LayerRankTrace t;
    t.fingerprint = j.at("fingerprint").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.head = j.at("head").get<std::size_t>();
    for (const json& row : j.at("records")) {
      RankRecord r;
      r.layer_index = row.at("layer_index").get<std::size_t>();
      r.report.name = row.at("matrix_name").get<std::string>();
      r.report.rows = row.at("rows").get<std::size_t>();
      r.report.cols = row.at("cols").get<std::size_t>();
      r.report.numerical_rank = row.at("numerical_rank").get<std::size_t>();
      r.report.sigma_max = row.at("sigma_max").get<double>();
      r.report.sigma_min = row.at("sigma_min").get<double>();
      r.report.tolerance = row.at("tolerance").get<double>();
      t.records.push_back(std::move(r));
    }
    return t;
  } catch (const json::exception& e) {
    throw FormatError(std::string("rank table JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

std::uint64_t attention_core_flops(Variant variant, std::size_t n_, std::size_t d_) {
  const std::uint64_t n = n_, d = d_;
  switch (variant) {
    case Variant::softmax: return 4 * n * n * d + 4 * n * n;
    case Variant::linear_vanilla: return 4 * n * d * d + 7 * n * d;
    case Variant::efficient: return 4 * n * d * d + 6 * n * d;
    case Variant::rala: return 4 * n * d * d + 12 * n * d + 4 * n;
  }
  return 0;
}

void validate(const BenchSetup& s) {
  if (s.variants.empty()) throw ArgumentError("bench: no variants");
  if (s.n_list.size() < 4) {
    throw ArgumentError("bench: need at least 4 sequence lengths to fit a slope, got " +
                        std::to_string(s.n_list.size()));
  }
  for (std::size_t i = 0; i < s.n_list.size(); ++i) {
    if (s.n_list[i] == 0) throw ArgumentError("bench: sequence lengths must be positive");
    if (i > 0 && s.n_list[i] <= s.n_list[i - 1]) throw ArgumentError("bench: sequence lengths must strictly increase");
  }
  if (s.n_list.back() < 16 * s.n_list.front()) {
    throw ArgumentError("bench: sequence lengths must span at least a factor of 16");
  }
  if (s.d == 0) throw ArgumentError("bench: d must be positive");
  if (s.repeats == 0) throw ArgumentError("bench: repeats must be at least 1");
}

namespace {

struct BenchPoint {
  std::size_t n = 0;
  Matrix x, q, k, v;
  attention::PhiParams<Matrix> phi;
  std::size_t calls = 1;  // core calls per timed sample
  std::vector<double> per_call;
};

constexpr double kMinSampleSeconds = 0.05;

}  // namespace

std::vector<ScalingRecord> scaling_benchmark(const BenchSetup& s) {
  validate(s);
  using clock = std::chrono::steady_clock;
  attention::AttentionConfig cfg;
  cfg.head_dim = s.d;
  volatile double sink = 0.0;
  std::vector<ScalingRecord> out;
  for (Variant variant : s.variants) {
    auto run = [&](const BenchPoint& p) {
      switch (variant) {
        case Variant::softmax: return attention::softmax_attention(p.q, p.k, p.v);
        case Variant::linear_vanilla:
          return attention::linear_attention_vanilla(p.q, p.k, p.v, attention::Kernel::elu1, true);
        case Variant::efficient: return attention::efficient_attention_baseline(p.q, p.k, p.v);
        case Variant::rala: return attention::rala_attention(p.x, p.q, p.k, p.v, cfg, &p.phi);
      }
      return Matrix{};
    };
    auto sample = [&](const BenchPoint& p) {
      const auto t0 = clock::now();
      for (std::size_t c = 0; c < p.calls; ++c) sink = run(p)(0, 0);
      return std::chrono::duration<double>(clock::now() - t0).count() / static_cast<double>(p.calls);
    };

    std::vector<BenchPoint> points;
    for (std::size_t n : s.n_list) {
      CounterRng rng(s.seed, n);
      BenchPoint p;
      p.n = n;
      p.x = rng.normal_matrix(n, s.d);
      p.q = rng.normal_matrix(n, s.d);
      p.k = rng.normal_matrix(n, s.d);
      p.v = rng.normal_matrix(n, s.d);
      p.phi = {rng.normal_matrix(s.d, s.d, 1.0 / std::sqrt(static_cast<double>(s.d))),
               rng.normal_matrix(1, s.d, 0.1)};
      // The untimed warm-up call also sizes the sample.
      const double once = sample(p);
      p.calls = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(kMinSampleSeconds / std::max(once, 1e-9))));
      points.push_back(std::move(p));
    }
    // Samples cycle over N so slow spells of the machine are shared by every point.
    for (std::size_t r = 0; r < s.repeats; ++r)
      for (BenchPoint& p : points) p.per_call.push_back(sample(p));

    for (BenchPoint& p : points) {
      std::sort(p.per_call.begin(), p.per_call.end());
      const std::size_t m = p.per_call.size();
      const double median = m % 2 ? p.per_call[m / 2] : 0.5 * (p.per_call[m / 2 - 1] + p.per_call[m / 2]);
      out.push_back({variant, p.n, s.d, attention_core_flops(variant, p.n, s.d), median, s.seed});
    }
  }
  return out;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ArgumentError("loglog_slope: need at least 2 paired points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0 && y[i] > 0)) throw ArgumentError("loglog_slope: values must be positive");
    sx += std::log(x[i]);
    sy += std::log(y[i]);
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(y[i]) - my);
  }
  if (sxx == 0.0) throw ArgumentError("loglog_slope: x values are all equal");
  return sxy / sxx;
}

std::vector<SlopeSummary> fit_slopes(const std::vector<ScalingRecord>& records) {
  std::vector<SlopeSummary> out;
  std::vector<Variant> seen;
  for (const ScalingRecord& r : records)
    if (std::find(seen.begin(), seen.end(), r.variant) == seen.end()) seen.push_back(r.variant);
  for (Variant v : seen) {
    std::vector<double> n, f, t;
    for (const ScalingRecord& r : records) {
      if (r.variant != v) continue;
      n.push_back(static_cast<double>(r.n));
      f.push_back(static_cast<double>(r.flops));
      t.push_back(r.wall_time_s);
    }
    out.push_back({v, loglog_slope(n, f), loglog_slope(n, t)});
  }
  return out;
}

std::string scaling_table_csv(const std::vector<ScalingRecord>& records) {
  std::string out(kScalingHeader);
  out += '\n';
  for (const ScalingRecord& r : records) {
    out += std::string(attention::to_string(r.variant)) + "," + std::to_string(r.n) + "," +
           std::to_string(r.d) + "," + std::to_string(r.flops) + "," + format_double(r.wall_time_s) +
           "," + std::to_string(r.seed) + "\n";
  }
  return out;
}

ordered_json scaling_table_json(const std::vector<ScalingRecord>& records) {
  ordered_json rows = ordered_json::array();
  for (const ScalingRecord& r : records) {
    ordered_json row;
    row["variant"] = std::string(attention::to_string(r.variant));
    row["N"] = r.n;
    row["d"] = r.d;
    row["flops"] = r.flops;
    row["wall_time_s"] = r.wall_time_s;
    row["seed"] = r.seed;
    rows.push_back(std::move(row));
  }
  return ordered_json{{"records", std::move(rows)}};
}

std::vector<ScalingRecord> parse_scaling_csv(std::string_view text) {
  std::vector<ScalingRecord> out;
  for (const auto& f : csv_rows(text, kScalingHeader, 6)) {
    ScalingRecord r;
    try {
      r.variant = attention::parse_variant(f[0]);
    } catch (const ArgumentError& e) {
      throw FormatError(e.what());
    }
    r.n = parse_uint(f[1]);
    r.d = parse_uint(f[2]);
    r.flops = parse_uint(f[3]);
    r.wall_time_s = parse_double(f[4]);
    r.seed = parse_uint(f[5]);
    out.push_back(r);
  }
  return out;
}

std::vector<ScalingRecord> parse_scaling_json(const json& j) {
  try {
    std::vector<ScalingRecord> out;
    for (const json& row : j.at("records")) {
      ScalingRecord r;
      r.variant = attention::parse_variant(row.at("variant").get<std::string>());
      r.n = row.at("N").get<std::size_t>();
      r.d = row.at("d").get<std::size_t>();
      r.flops = row.at("flops").get<std::uint64_t>();
      r.wall_time_s = row.at("wall_time_s").get<double>();
      r.seed = row.at("seed").get<std::uint64_t>();
      out.push_back(r);
    }
    return out;
  } catch (const json::exception& e) {
    throw FormatError(std::string("scaling table JSON: ") + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("scaling table JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

std::string render_table(const LayerRankTrace& trace, TableFormat format) {
  if (trace.records.empty()) throw ArgumentError("export_table: rank trace has no records");
  return format == TableFormat::csv ? rank_table_csv(trace) : rank_table_json(trace).dump(2) + "\n";
}

std::string render_table(const std::vector<ScalingRecord>& records, TableFormat format) {
  if (records.empty()) throw ArgumentError("export_table: no scaling records");
  return format == TableFormat::csv ? scaling_table_csv(records)
                                    : scaling_table_json(records).dump(2) + "\n";
}

void export_table(const LayerRankTrace& trace, TableFormat format, const std::string& path) {
  write_file(path, render_table(trace, format));
}

void export_table(const std::vector<ScalingRecord>& records, TableFormat format,
                  const std::string& path) {
  write_file(path, render_table(records, format));
}

}  // namespace rala::analysis
