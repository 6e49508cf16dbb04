#include <fstream>
#include <json.hpp>

#include "caft/errors.hpp"
#include "caft/trainer.hpp"
#include "parse.hpp"

namespace caft {
namespace {

using nlohmann::ordered_json;

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

ordered_json window_json(ContextWindowSpec w) {
  return {{"length", w.length}, {"offset", w.offset}};
}

ordered_json eval_json(const EvalMetrics& m) {
  ordered_json j;
  j["task"] = to_string(m.task);
  j["metric"] = m.primary_name();
  j["value"] = m.primary();
  if (m.task == TaskKind::ctc) {
    j["token_error_rate"] = m.token_error_rate;
    j["edit_errors"] = m.edit_errors;
    j["reference_tokens"] = m.reference_tokens;
  } else {
    j["macro_f1"] = m.macro_f1;
    j["accuracy"] = m.accuracy;
    j["class_f1"] = m.class_f1;
  }
  j["mean_task_loss"] = m.mean_task_loss;
  j["segments"] = m.segments;
  j["skipped"] = m.skipped;
  j["neighbor_reads"] = m.neighbor_reads;
  return j;
}


std::string tsv_real(double v) { return parse::real_text(v); }

}  // namespace

void write_metrics_json(const TrainResult& result, const std::filesystem::path& path) {
  const TrainConfig& cfg = result.config;
  ordered_json j;
  j["mode"] = to_string(cfg.model.mode);
  j["task"] = to_string(cfg.model.task);
  j["metric"] = result.runs.empty() ? std::string() : result.runs.front().eval.primary_name();
  j["alpha"] = cfg.resolved_alpha();
  j["context_dim"] = cfg.model.context_dim;
  j["window"] = window_json(cfg.window);
  ordered_json seeds = ordered_json::array();
  for (const SeedRun& run : result.runs) {
    ordered_json s;
    s["seed"] = run.seed;
    s["value"] = run.eval.primary();
    s["eval"] = eval_json(run.eval);
    ordered_json history = ordered_json::array();
    for (std::size_t e = 0; e < run.history.size(); ++e) {
      const EpochStats& h = run.history[e];
      history.push_back({{"epoch", e},
                         {"mean_task_loss", h.mean_task_loss},
                         {"mean_context_loss", h.mean_context_loss},
                         {"mean_total_loss", h.mean_total_loss},
                         {"samples", h.samples},
                         {"context_samples", h.context_samples},
                         {"skipped", h.skipped}});
    }
    s["history"] = std::move(history);
    seeds.push_back(std::move(s));
  }
  j["per_seed"] = std::move(seeds);
  j["mean"] = {{"value", result.primary.mean},
               {"mean_task_loss", result.eval_task_loss.mean},
               {"first_epoch_context_loss", result.first_epoch_context_loss.mean},
               {"final_epoch_context_loss", result.final_epoch_context_loss.mean}};
  j["stddev"] = {{"value", result.primary.stddev},
                 {"mean_task_loss", result.eval_task_loss.stddev},
                 {"first_epoch_context_loss", result.first_epoch_context_loss.stddev},
                 {"final_epoch_context_loss", result.final_epoch_context_loss.stddev}};
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  finish(out, path);
}

void write_metrics_tsv(const TrainResult& result, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "seed\tmetric\tvalue\teval_task_loss\tfirst_epoch_context_loss\t"
         "final_epoch_context_loss\n";
  const std::string name =
      result.runs.empty() ? std::string() : result.runs.front().eval.primary_name();
  for (const SeedRun& run : result.runs) {
    const double first = run.history.empty() ? 0.0 : run.history.front().mean_context_loss;
    const double last = run.history.empty() ? 0.0 : run.history.back().mean_context_loss;
    out << run.seed << '\t' << name << '\t' << tsv_real(run.eval.primary()) << '\t'
        << tsv_real(run.eval.mean_task_loss) << '\t' << tsv_real(first) << '\t'
        << tsv_real(last) << '\n';
  }
  out << "mean\t" << name << '\t' << tsv_real(result.primary.mean) << '\t'
      << tsv_real(result.eval_task_loss.mean) << '\t'
      << tsv_real(result.first_epoch_context_loss.mean) << '\t'
      << tsv_real(result.final_epoch_context_loss.mean) << '\n';
  out << "stddev\t" << name << '\t' << tsv_real(result.primary.stddev) << '\t'
      << tsv_real(result.eval_task_loss.stddev) << '\t'
      << tsv_real(result.first_epoch_context_loss.stddev) << '\t'
      << tsv_real(result.final_epoch_context_loss.stddev) << '\n';
  finish(out, path);
}

void write_eval_json(const EvalMetrics& metrics, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << eval_json(metrics).dump(2) << '\n';
  finish(out, path);
}

void write_sweep_tsv(std::span<const SweepRow> rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "point\talpha\tcontext_dim\twindow_length\twindow_offset\tseed\tmetric\tvalue\t"
         "final_task_loss\tfinal_context_loss\n";
  for (const SweepRow& r : rows) {
    out << r.point << '\t' << tsv_real(r.params.alpha) << '\t' << r.params.context_dim << '\t'
        << r.params.window.length << '\t' << r.params.window.offset << '\t' << r.seed << '\t'
        << r.metric_name << '\t' << tsv_real(r.metric) << '\t' << tsv_real(r.final_task_loss)
        << '\t' << tsv_real(r.final_context_loss) << '\n';
  }
  finish(out, path);
}

void write_sweep_jsonl(std::span<const SweepRow> rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (const SweepRow& r : rows) {
    ordered_json j{{"point", r.point},
                   {"alpha", r.params.alpha},
                   {"context_dim", r.params.context_dim},
                   {"window", window_json(r.params.window)},
                   {"seed", r.seed},
                   {"metric", r.metric_name},
                   {"value", r.metric},
                   {"final_task_loss", r.final_task_loss},
                   {"final_context_loss", r.final_context_loss}};
    out << j.dump() << '\n';
  }
  finish(out, path);
}

void write_bench_tsv(const BenchReport& report, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "mode\tseconds_per_segment\tratio_vs_baseline\n";
  for (const BenchRow& r : report.rows) {
    out << r.mode << '\t' << tsv_real(r.seconds_per_segment) << '\t' << tsv_real(r.ratio)
        << '\n';
  }
  finish(out, path);
}

}  // namespace caft
