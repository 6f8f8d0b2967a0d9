// rala-kit: rank traces, scaling benchmark, gradient checks, toy training and model costs.
//
// Exit status: 0 success, 1 runtime or numerical failure, 2 usage error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rala/analysis.hpp"
#include "rala/backbone.hpp"
#include "rala/errors.hpp"
#include "rala/format.hpp"
#include "rala/model_gradcheck.hpp"
#include "rala/rng.hpp"
#include "rala/trainer.hpp"

namespace {

using nlohmann::ordered_json;
namespace an = rala::analysis;
namespace bb = rala::backbone;
namespace tr = rala::trainer;

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct Global {
  std::uint64_t seed = 0;
  std::string out;
  std::string format = "csv";
};

void print_config(const std::string& command, const ordered_json& config) {
  std::cerr << "rala-kit " << command << " config: " << config.dump() << "\n";
}

// Writes text to --out, or to stdout when no path was given.
void emit(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text << std::flush;
    return;
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw rala::IoError("cannot open " + out + " for writing");
  f << text;
  if (!f.flush()) throw rala::IoError("write to " + out + " failed");
}

std::size_t env_threads() {
  const char* raw = std::getenv("RALA_KIT_THREADS");
  if (raw == nullptr || *raw == '\0') return 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (*end != '\0' || raw[0] == '-') throw rala::ArgumentError(std::string("RALA_KIT_THREADS: not a count: ") + raw);
  return static_cast<std::size_t>(v);
}

// ---------------------------------------------------------------------------

struct RankOpts {
  std::string preset;
  std::string variant = "rala";
  std::size_t n = 196;
  std::size_t d = 64;
  std::size_t key_rank = 8;
  double rel_eps = rala::linalg::kDefaultRankEps;
  std::size_t head = 0;
  bool no_kv_augment = false;
  bool no_out_augment = false;
};

int run_rank(const Global& g, const RankOpts& o) {
  const an::TableFormat format = an::parse_format(g.format);
  an::LayerRankTrace trace;
  ordered_json cfg;
  cfg["seed"] = g.seed;
  cfg["rel_eps"] = o.rel_eps;
  if (!o.preset.empty()) {
    const bb::ModelConfig model_cfg = bb::preset(o.preset);
    cfg["preset"] = o.preset;
    cfg["head"] = o.head;
    cfg["model"] = bb::to_json(model_cfg);
    print_config("rank", cfg);
    const bb::Model model = bb::init_model(model_cfg, g.seed);
    const std::size_t res = model_cfg.input_resolution;
    rala::CounterRng rng(g.seed, 1);
    trace = an::layer_rank_trace(model, rng.normal_matrix(res * res, 3), o.rel_eps, o.head, g.seed);
  } else {
    an::ConstructedSetup s;
    s.variant = rala::attention::parse_variant(o.variant);
    s.n = o.n;
    s.d = o.d;
    s.key_rank = o.key_rank;
    s.kv_augment = !o.no_kv_augment;
    s.out_augment = !o.no_out_augment;
    s.rel_eps = o.rel_eps;
    s.seed = g.seed;
    cfg["variant"] = o.variant;
    cfg["n"] = o.n;
    cfg["d"] = o.d;
    cfg["key_rank"] = o.key_rank;
    cfg["kv_augment"] = s.kv_augment;
    cfg["out_augment"] = s.out_augment;
    print_config("rank", cfg);
    trace = an::constructed_rank_trace(s);
  }
  if (g.out.empty()) {
    emit(an::render_table(trace, format), "");
  } else {
    an::export_table(trace, format, g.out);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct BenchOpts {
  std::vector<std::string> variants{"softmax", "rala"};
  std::vector<std::size_t> n_list{196, 392, 784, 1568, 3136};
  std::size_t d = 64;
  std::size_t repeats = 5;
};

int run_bench(const Global& g, const BenchOpts& o) {
  const an::TableFormat format = an::parse_format(g.format);
  an::BenchSetup s;
  s.variants.clear();
  for (const auto& v : o.variants) s.variants.push_back(rala::attention::parse_variant(v));
  s.n_list = o.n_list;
  s.d = o.d;
  s.repeats = o.repeats;
  s.seed = g.seed;
  an::validate(s);

  ordered_json cfg;
  cfg["seed"] = g.seed;
  cfg["variants"] = o.variants;
  cfg["n_list"] = o.n_list;
  cfg["d"] = o.d;
  cfg["repeats"] = o.repeats;
  print_config("bench", cfg);
  if (o.repeats == 1)
    std::cerr << "warning: --repeats 1 takes a single timing per point; wall times will be noisy\n";

  const auto records = an::scaling_benchmark(s);
  if (g.out.empty()) {
    emit(an::render_table(records, format), "");
  } else {
    an::export_table(records, format, g.out);
  }
  for (const auto& sl : an::fit_slopes(records)) {
    std::cerr << "slope " << rala::attention::to_string(sl.variant)
              << ": flops=" << rala::format_double(sl.flops_slope)
              << " wall_time=" << rala::format_double(sl.time_slope) << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct GradcheckOpts {
  std::string ops = "all";
  int trials = 20;
  double h = 1e-5;
  double tolerance = 1e-4;
};

int run_gradcheck(const Global& g, const GradcheckOpts& o) {
  const an::TableFormat format = an::parse_format(g.format);
  if (o.trials < 1) throw rala::ArgumentError("--trials must be >= 1");
  if (!(o.h > 0.0)) throw rala::ArgumentError("--h must be positive");

  std::vector<rala::ad::GradCheckCase> cases;
  for (auto& c : rala::backbone::all_gradcheck_cases())
    if (o.ops == "all" || c.name == o.ops) cases.push_back(std::move(c));
  if (cases.empty()) throw rala::ArgumentError("--ops: unknown operation '" + o.ops + "'");

  ordered_json cfg;
  cfg["seed"] = g.seed;
  cfg["ops"] = o.ops;
  cfg["trials"] = o.trials;
  cfg["h"] = o.h;
  cfg["tolerance"] = o.tolerance;
  print_config("gradcheck", cfg);

  bool ok = true;
  double worst = 0.0;
  std::ostringstream csv;
  ordered_json rows = ordered_json::array();
  csv << "op,trials,h,max_rel_error,passed\n";
  for (const auto& c : cases) {
    const auto report = rala::ad::run_gradcheck(c, o.trials, o.h, g.seed);
    const bool passed = report.max_rel_error < o.tolerance;
    ok = ok && passed;
    worst = std::max(worst, report.max_rel_error);
    csv << c.name << ',' << o.trials << ',' << rala::format_double(o.h) << ','
        << rala::format_double(report.max_rel_error) << ',' << (passed ? "true" : "false") << '\n';
    rows.push_back({{"op", c.name},
                    {"trials", o.trials},
                    {"h", o.h},
                    {"max_rel_error", report.max_rel_error},
                    {"passed", passed}});
  }
  emit(format == an::TableFormat::csv ? csv.str() : rows.dump(2) + "\n", g.out);
  std::cerr << "gradcheck: " << cases.size() << " ops, max rel error "
            << rala::format_double(worst) << (ok ? " (pass)\n" : " (FAIL)\n");
  return ok ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------

struct TrainOpts {
  std::string config_path;
  std::string preset;
  std::string checkpoint;
  std::size_t epochs = 0;
  std::size_t samples = 0;
  double target = -1.0;
  bool ablate = false;
};

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw rala::IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ordered_json metrics_json(const std::vector<tr::EpochMetrics>& history) {
  ordered_json rows = ordered_json::array();
  for (const auto& m : history)
    rows.push_back({{"epoch", m.epoch}, {"loss", m.loss}, {"accuracy", m.accuracy}, {"lr", m.lr}});
  return rows;
}

int run_train(const Global& g, const TrainOpts& o, bool seed_given) {
  const an::TableFormat format = an::parse_format(g.format);
  tr::TrainConfig config;
  if (!o.config_path.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(o.config_path));
    } catch (const nlohmann::json::exception& e) {
      throw rala::FormatError(o.config_path + ": " + e.what());
    }
    config = tr::train_config_from_json(j);
  }
  if (!o.preset.empty()) {
    config.preset = o.preset;
    config.model.reset();
  }
  if (seed_given || o.config_path.empty()) config.seed = g.seed;
  if (o.epochs > 0) config.epochs = o.epochs;
  if (o.samples > 0) config.n_samples = o.samples;
  if (o.target >= 0.0) config.target_accuracy = o.target;
  if (o.ablate) {
    bb::ModelConfig m = config.resolved_model();
    m.kv_augment = false;
    m.out_augment = false;
    config.model = m;
  }
  config.threads = env_threads();
  config.validate();
  print_config("train", tr::to_json(config));

  const tr::TrainResult result = tr::train_loop(config, [](const tr::EpochMetrics& m) {
    std::cerr << "epoch " << m.epoch << " loss " << rala::format_double(m.loss) << " acc "
              << rala::format_double(m.accuracy) << " lr " << rala::format_double(m.lr) << "\n";
  });
  const ordered_json rows = metrics_json(result.history);
  emit(format == an::TableFormat::csv ? tr::metrics_csv(result.history) : rows.dump(2) + "\n", g.out);
  if (!o.checkpoint.empty()) tr::save_checkpoint(result.model, rows, o.checkpoint);
  if (config.target_accuracy > 0.0 && !result.reached_target) {
    std::cerr << "train: target accuracy " << rala::format_double(config.target_accuracy)
              << " not reached in " << config.epochs << " epochs\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct InfoOpts {
  std::string preset = "ravlt-t";
  std::size_t resolution = 0;
};

int run_info(const Global& g, const InfoOpts& o) {
  const an::TableFormat format = an::parse_format(g.format);
  const bb::ModelConfig cfg = bb::preset(o.preset);
  const std::size_t res = o.resolution == 0 ? cfg.input_resolution : o.resolution;
  ordered_json shown;
  shown["seed"] = g.seed;
  shown["preset"] = o.preset;
  shown["resolution"] = res;
  shown["model"] = bb::to_json(cfg);
  print_config("info", shown);

  const bb::CostReport params = bb::count_params(cfg);
  const bb::CostReport flops = bb::count_flops(cfg, res);
  std::string text;
  if (format == an::TableFormat::csv) {
    std::ostringstream csv;
    csv << "component,params,flops\n";
    for (std::size_t i = 0; i < flops.breakdown.size(); ++i)
      csv << flops.breakdown[i].name << ',' << params.breakdown[i].params << ','
          << flops.breakdown[i].flops << '\n';
    csv << "total," << params.parameter_count << ',' << flops.flops << '\n';
    text = csv.str();
  } else {
    ordered_json j;
    j["preset"] = o.preset;
    j["architecture"] = bb::table_row(cfg);
    j["resolution"] = res;
    j["params"] = params.parameter_count;
    j["flops"] = flops.flops;
    j["breakdown"] = ordered_json::array();
    for (std::size_t i = 0; i < flops.breakdown.size(); ++i)
      j["breakdown"].push_back({{"component", flops.breakdown[i].name},
                                {"params", params.breakdown[i].params},
                                {"flops", flops.breakdown[i].flops}});
    j["config"] = bb::to_json(cfg);
    text = j.dump(2) + "\n";
  }
  emit(text, g.out);
  std::cerr << o.preset << " " << bb::table_row(cfg) << " params "
            << rala::format_double(static_cast<double>(params.parameter_count) / 1e6) << "M flops@"
            << res << " " << rala::format_double(static_cast<double>(flops.flops) / 1e9) << "G\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rank-augmented linear attention toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  Global g;
  auto* seed_opt = app.add_option("--seed", g.seed, "RNG seed (default 0)");
  app.add_option("--out", g.out, "Output file (default: standard output)");
  app.add_option("--format", g.format, "Table format")->check(CLI::IsMember({"csv", "json"}));

  RankOpts rank;
  auto* rank_cmd = app.add_subcommand("rank", "Numerical ranks of attention matrices");
  auto* preset_opt = rank_cmd->add_option("--preset", rank.preset, "Trace a randomly initialised model preset");
  rank_cmd->add_option("--variant", rank.variant, "softmax, linear_vanilla, efficient or rala")->excludes(preset_opt);
  rank_cmd->add_option("--n", rank.n, "Tokens")->excludes(preset_opt);
  rank_cmd->add_option("--d", rank.d, "Head dimension")->excludes(preset_opt);
  rank_cmd->add_option("--key-rank", rank.key_rank, "Rank of the key features (0 = unconstrained)")
      ->excludes(preset_opt);
  rank_cmd->add_flag("--no-kv-augment", rank.no_kv_augment, "Drop the alpha-weighted buffer")->excludes(preset_opt);
  rank_cmd->add_flag("--no-out-augment", rank.no_out_augment, "Drop the phi modulation")->excludes(preset_opt);
  rank_cmd->add_option("--rel-eps", rank.rel_eps, "Relative singular-value cutoff");
  rank_cmd->add_option("--head", rank.head, "Head traced in every layer")->needs(preset_opt);

  BenchOpts bench;
  auto* bench_cmd = app.add_subcommand("bench", "Attention-core FLOPs and wall time against N");
  bench_cmd->add_option("--variants", bench.variants)->delimiter(',');
  bench_cmd->add_option("--n-list", bench.n_list)->delimiter(',');
  bench_cmd->add_option("--d", bench.d);
  bench_cmd->add_option("--repeats", bench.repeats);

  GradcheckOpts grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Central finite-difference gradient checks");
  grad_cmd->add_option("--ops", grad.ops, "all or one operation name");
  grad_cmd->add_option("--trials", grad.trials);
  grad_cmd->set_help_flag("--help", "Print this help message and exit");
  grad_cmd->add_option("--h", grad.h, "Finite-difference step");
  grad_cmd->add_option("--tolerance", grad.tolerance);

  TrainOpts train;
  auto* train_cmd = app.add_subcommand("train", "Train a model on the synthetic task");
  auto* cfg_opt = train_cmd->add_option("--config", train.config_path, "Training config JSON");
  train_cmd->add_option("--preset", train.preset)->excludes(cfg_opt);
  train_cmd->add_option("--checkpoint", train.checkpoint, "Write the trained model here");
  train_cmd->add_option("--epochs", train.epochs);
  train_cmd->add_option("--samples", train.samples);
  train_cmd->add_option("--target-accuracy", train.target);
  train_cmd->add_flag("--ablate", train.ablate, "Disable both augmentations");

  InfoOpts info;
  auto* info_cmd = app.add_subcommand("info", "Parameter and FLOP counts of a preset");
  info_cmd->add_option("--preset", info.preset);
  info_cmd->add_option("--resolution", info.resolution);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*rank_cmd) return run_rank(g, rank);
    if (*bench_cmd) return run_bench(g, bench);
    if (*grad_cmd) return run_gradcheck(g, grad);
    if (*train_cmd) return run_train(g, train, seed_opt->count() > 0);
    if (*info_cmd) return run_info(g, info);
  } catch (const rala::ArgumentError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
