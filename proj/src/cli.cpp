#include "caft/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "caft/corpus.hpp"
#include "caft/errors.hpp"
#include "caft/model.hpp"
#include "caft/run_config.hpp"
#include "caft/trainer.hpp"
#include "parse.hpp"

namespace caft::cli {
namespace fs = std::filesystem;

std::string three_significant(double v) {
  if (v == 0.0 || !std::isfinite(v)) {
    return v == 0.0 ? "0.00" : std::to_string(v);
  }
  const int magnitude = static_cast<int>(std::floor(std::log10(std::fabs(v))));
  int decimals = std::max(0, 2 - magnitude);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  // Rounding can carry into a new leading digit (9.995 -> 10.00).
  const double rounded = std::strtod(buf, nullptr);
  if (rounded != 0.0 &&
      static_cast<int>(std::floor(std::log10(std::fabs(rounded)))) > magnitude && decimals > 0) {
    std::snprintf(buf, sizeof buf, "%.*f", decimals - 1, v);
  }
  return buf;
}

namespace {

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void print_stats(const Corpus& corpus, std::ostream& out) {
  const CorpusStats s = corpus_stats(corpus);
  out << "streams=" << s.streams << " segments=" << s.segments << " frames=" << s.frames
      << " tokens=" << s.tokens << " ambiguous_tokens=" << s.ambiguous_tokens
      << " cued_segments=" << s.cued_segments << '\n';
  if (!s.class_counts.empty()) {
    out << "class_counts=";
    for (std::size_t c = 0; c < s.class_counts.size(); ++c) {
      out << (c ? "," : "") << s.class_counts[c];
    }
    out << '\n';
  }
}

int cmd_synth(const fs::path& config, const fs::path& out_dir, std::ostream& out) {
  RunConfig cfg = load_run_config(config);
  cfg.synth.validate();
  const Corpus corpus = synth_generate(cfg.synth);
  save_corpus(corpus, out_dir);
  RunConfig echo;
  echo.synth = cfg.synth;
  echo.has_synth_section = true;
  save_run_config(echo, out_dir / "config.resolved.ini");
  print_stats(corpus, out);
  return kOk;
}

int cmd_train(const fs::path& config, const fs::path& data, const std::string& mode,
              const fs::path& out_dir, const std::string& eval_data, std::size_t jobs,
              std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(config);
  cfg.train.model.mode = parse_mode(mode);
  if (cfg.train.model.mode == Mode::baseline && cfg.has_window_section) {
    err << "notice: [window] is ignored in baseline mode\n";
  }
  if (!cfg.train.alpha) {
    if (cfg.train.model.mode == Mode::context_aware) {
      out << "alpha=" << parse::real_text(cfg.train.resolved_alpha()) << " (default)\n";
    }
    cfg.train.alpha = cfg.train.resolved_alpha();
  }
  cfg.train.validate();

  const Corpus train_set = load_corpus(data);
  const Corpus eval_set = eval_data.empty() ? train_set : load_corpus(eval_data);
  const TrainResult result = train(cfg.train, train_set, eval_set, jobs);

  make_dir(out_dir);
  for (const SeedRun& run : result.runs) {
    save_checkpoint(make_checkpoint(cfg.train, run),
                    out_dir / ("seed_" + std::to_string(run.seed) + ".caft"));
  }
  write_metrics_json(result, out_dir / "metrics.json");
  write_metrics_tsv(result, out_dir / "metrics.tsv");
  save_run_config(cfg, out_dir / "config.resolved.ini");

  const std::string name = result.runs.front().eval.primary_name();
  for (const SeedRun& run : result.runs) {
    out << "seed=" << run.seed << " " << name << "=" << parse::real_text(run.eval.primary())
        << '\n';
  }
  out << "mean " << name << "=" << parse::real_text(result.primary.mean)
      << " stddev=" << parse::real_text(result.primary.stddev) << '\n';
  return kOk;
}

int cmd_eval(const fs::path& ckpt_path, const fs::path& data, const std::string& out_file,
             std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ContextWindowSpec window = checkpoint_window(ckpt);
  const Corpus corpus = load_corpus(data);
  const EvalMetrics m = evaluate(ckpt.model, corpus, window);
  write_eval_json(m, out_file.empty() ? fs::path(ckpt_path.string() + ".eval.json")
                                      : fs::path(out_file));
  out << "mode=" << to_string(ckpt.model.config().mode) << '\n';
  out << "segments=" << m.segments << " skipped=" << m.skipped << '\n';
  out << "mean_task_loss=" << parse::real_text(m.mean_task_loss) << '\n';
  out << "neighbor_reads=" << m.neighbor_reads << '\n';
  out << "metric=" << m.primary_name() << " value=" << parse::real_text(m.primary()) << '\n';
  return kOk;
}

int cmd_bench(const fs::path& p_base, const fs::path& p_inj, const fs::path& p_ctx,
              const fs::path& data, const fs::path& out_file, BenchOptions options,
              std::ostream& out) {
  const Checkpoint base = load_checkpoint(p_base);
  const Checkpoint inj = load_checkpoint(p_inj);
  const Checkpoint ctx = load_checkpoint(p_ctx);
  const Corpus corpus = load_corpus(data);
  const BenchReport report = bench_inference(base.model, inj.model, ctx.model, corpus,
                                             checkpoint_window(inj), options);
  write_bench_tsv(report, out_file);
  out << "segments=" << report.segments << " injection_neighbors=" << report.injection_neighbors
      << " baseline_repeat_ratio=" << parse::real_text(report.baseline_repeat_ratio) << '\n';
  out << "mode\tseconds_per_segment\tratio_vs_baseline\n";
  for (const BenchRow& r : report.rows) {
    out << r.mode << '\t' << parse::real_text(r.seconds_per_segment) << '\t'
        << parse::real_text(r.ratio) << '\n';
  }
  return kOk;
}

int cmd_params(const fs::path& config, const std::string& mode, std::ostream& out) {
  RunConfig cfg = load_run_config(config);
  if (!mode.empty()) cfg.train.model.mode = parse_mode(mode);
  cfg.train.model.validate();
  const ParamCount pc = count_params(cfg.train.model);
  out << "mode=" << to_string(cfg.train.model.mode) << '\n';
  out << "baseline_params=" << pc.baseline_total << '\n';
  out << "mode_params=" << pc.total << '\n';
  out << "delta=" << pc.delta << '\n';
  out << "formula_delta=" << context_overhead_formula(cfg.train.model) << '\n';
  out << "delta_percent=" << three_significant(100.0 * pc.delta_fraction()) << "%\n";
  return kOk;
}

int cmd_sweep(const fs::path& config, const fs::path& data, const std::string& grid_spec,
              const fs::path& out_dir, const std::string& eval_data, std::size_t jobs,
              std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(config);
  const SweepGrid grid =
      parse_grid(grid_spec, [&](const std::string& w) { err << "warning: " << w << '\n'; });
  if (!cfg.train.alpha) cfg.train.alpha = cfg.train.resolved_alpha();
  cfg.train.validate();
  const Corpus train_set = load_corpus(data);
  const Corpus eval_set = eval_data.empty() ? train_set : load_corpus(eval_data);
  const std::vector<SweepRow> rows = run_sweep(cfg.train, grid, train_set, eval_set, jobs);
  make_dir(out_dir);
  write_sweep_tsv(rows, out_dir / "sweep.tsv");
  write_sweep_jsonl(rows, out_dir / "sweep.jsonl");
  save_run_config(cfg, out_dir / "config.resolved.ini");
  for (const SweepRow& r : rows) {
    if (r.seed != "mean") continue;
    out << "point=" << r.point << " alpha=" << parse::real_text(r.params.alpha)
        << " D=" << r.params.context_dim << " window=(" << r.params.window.length << ","
        << r.params.window.offset << ") " << r.metric_name << "="
        << parse::real_text(r.metric) << '\n';
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Context-aware fine-tuning experiments on synthetic speech streams", "caft"};
  app.require_subcommand(1);

  std::string config, data, out_path, mode, eval_data, grid, ckpt, ckpt_b, ckpt_i, ckpt_c;
  std::string bench_out = "bench.tsv";
  std::size_t jobs = 1;
  BenchOptions bench;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  synth->add_option("--config", config, "Config file")->required();
  synth->add_option("--out", out_path, "Output corpus directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Train one mode over all configured seeds");
  train_cmd->add_option("--config", config, "Config file")->required();
  train_cmd->add_option("--data", data, "Training corpus directory")->required();
  train_cmd->add_option("--mode", mode, "baseline, injection or context_aware")
      ->required()
      ->check(CLI::IsMember({"baseline", "injection", "context_aware"}));
  train_cmd->add_option("--out", out_path, "Output directory")->required();
  train_cmd->add_option("--eval-data", eval_data, "Evaluation corpus (default: training corpus)");
  train_cmd->add_option("--jobs", jobs, "Seeds trained in parallel")->check(CLI::PositiveNumber);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", data, "Corpus directory")->required();
  eval_cmd->add_option("--out", out_path, "Metrics JSON (default: <ckpt>.eval.json)");

  auto* bench_cmd = app.add_subcommand("bench", "Time inference of the three modes");
  bench_cmd->add_option("--ckpt-baseline", ckpt_b, "Baseline checkpoint")->required();
  bench_cmd->add_option("--ckpt-injection", ckpt_i, "Injection checkpoint")->required();
  bench_cmd->add_option("--ckpt-context", ckpt_c, "Context-aware checkpoint")->required();
  bench_cmd->add_option("--data", data, "Corpus directory")->required();
  bench_cmd->add_option("--out", bench_out, "Report TSV")->capture_default_str();
  bench_cmd->add_option("--segments", bench.segments, "Timed segments")->default_val(100);
  bench_cmd->add_option("--warmup", bench.warmup, "Warmup segments")->default_val(10);
  bench_cmd->add_option("--rounds", bench.rounds, "Timing rounds")->default_val(7)->check(
      CLI::PositiveNumber);

  auto* params = app.add_subcommand("params", "Count parameters for a config");
  params->add_option("--config", config, "Config file")->required();
  params->add_option("--mode", mode, "Override [model] mode")
      ->check(CLI::IsMember({"baseline", "injection", "context_aware"}));

  auto* sweep = app.add_subcommand("sweep", "Train over a hyper-parameter grid");
  sweep->add_option("--config", config, "Config file")->required();
  sweep->add_option("--data", data, "Training corpus directory")->required();
  sweep->add_option("--grid", grid, "Grid, e.g. \"alpha=1e-5..1e5:x10;D=4,8\"")->required();
  sweep->add_option("--out", out_path, "Output directory")->required();
  sweep->add_option("--eval-data", eval_data, "Evaluation corpus (default: training corpus)");
  sweep->add_option("--jobs", jobs, "Runs in parallel")->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(config, out_path, out);
    if (*train_cmd) return cmd_train(config, data, mode, out_path, eval_data, jobs, out, err);
    if (*eval_cmd) return cmd_eval(ckpt, data, out_path, out);
    if (*bench_cmd) return cmd_bench(ckpt_b, ckpt_i, ckpt_c, data, bench_out, bench, out);
    if (*params) return cmd_params(config, mode, out);
    if (*sweep) return cmd_sweep(config, data, grid, out_path, eval_data, jobs, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const InvalidWindowError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const TaskMismatchError& e) {
    err << "mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const DimensionError& e) {
    err << "mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

}  // namespace caft::cli
