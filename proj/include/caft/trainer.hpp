#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "caft/corpus.hpp"
#include "caft/losses.hpp"
#include "caft/model.hpp"

namespace caft {

// Default context-loss weight when a config leaves `alpha` unset. The
// reference weight 10 goes with a CTC loss summed over whole utterances of
// hundreds of frames. A synthetic segment carries about 1/30 of that loss,
// and a 3-way cross-entropy about 1/300, so the weight is scaled to match.
inline constexpr double kReferenceAlpha = 10.0;
inline constexpr double kCtcLossScale = 0.03;
inline constexpr double kClassifyLossScale = 0.003;

constexpr double default_alpha(TaskKind task) {
  return kReferenceAlpha * (task == TaskKind::ctc ? kCtcLossScale : kClassifyLossScale);
}

struct TrainConfig {
  ModelConfig model;
  ContextWindowSpec window;
  std::optional<double> alpha;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  bool detach_target = false;
  bool train_with_target_embedding = false;
  // When false the context-aware loss branch (neighbor encoding and context
  // loss) is not built at all. Only used to check alpha = 0 equivalence.
  bool context_branch = true;

  double resolved_alpha() const { return alpha.value_or(default_alpha(model.task)); }
  ContextAwareOptions context_options() const {
    return {detach_target, train_with_target_embedding};
  }
  void validate() const;

  // [train] section keys.
  std::vector<std::pair<std::string, std::string>> entries() const;
  bool set(std::string_view key, std::string_view value);

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Adam with bias correction and a constant learning rate.
class Adam {
 public:
  Adam(std::span<const Parameter> params, double learning_rate, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  void step(std::span<Parameter> params, std::span<const Tensor> grads);
  std::size_t steps() const { return steps_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t steps_ = 0;
  std::vector<Tensor> m_, v_;
};

// Task loss for one forward output against its target.
Var task_loss(Var output, const Target& target);

// Full training objective for one example. Returns nullopt when the example
// is skipped (injection mode with no neighbor available).
std::optional<LossBundle> sample_loss(Tape& tape, const Model& model, const Segment& current,
                                      std::span<const Segment* const> neighbors,
                                      const TrainConfig& cfg);

struct EpochStats {
  double mean_task_loss = 0.0;
  double mean_context_loss = 0.0;  // over samples that had a context loss
  double mean_total_loss = 0.0;
  std::size_t samples = 0;
  std::size_t context_samples = 0;
  std::size_t skipped = 0;

  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

struct EvalMetrics {
  TaskKind task = TaskKind::ctc;
  double token_error_rate = 0.0;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  double mean_task_loss = 0.0;
  std::vector<double> class_f1;
  std::size_t edit_errors = 0;
  std::size_t reference_tokens = 0;
  std::size_t segments = 0;
  std::size_t skipped = 0;
  std::size_t neighbor_reads = 0;

  std::string primary_name() const {
    return task == TaskKind::ctc ? "token_error_rate" : "macro_f1";
  }
  double primary() const { return task == TaskKind::ctc ? token_error_rate : macro_f1; }

  friend bool operator==(const EvalMetrics&, const EvalMetrics&) = default;
};

// Greedy-decodes (CTC) or argmaxes (classify) every segment. Context-aware
// models are evaluated without reading any neighbor; injection models read
// neighbors through a counted reader and skip segments that have none.
EvalMetrics evaluate(const Model& model, const Corpus& corpus, ContextWindowSpec window);

std::size_t levenshtein(std::span<const int> a, std::span<const int> b);

// Unweighted mean of per-class F1; a class never predicted and never present
// scores 0.
double macro_f1(std::span<const int> labels, std::span<const int> predictions,
                std::size_t num_classes, std::vector<double>* per_class = nullptr);

struct SeedRun {
  std::uint64_t seed = 0;
  Model model;
  std::vector<EpochStats> history;
  EvalMetrics eval;
};

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;
};

Summary summarize(std::span<const double> values);

struct TrainResult {
  TrainConfig config;
  std::vector<SeedRun> runs;
  Summary primary;
  Summary eval_task_loss;
  Summary first_epoch_context_loss;
  Summary final_epoch_context_loss;
};

// One seed: init from the seed, then `epochs` passes of Adam over shuffled
// batches, then evaluation. Throws DivergenceError on a non-finite loss.
SeedRun train_seed(const TrainConfig& cfg, const Corpus& train_set, const Corpus& eval_set,
                   std::uint64_t seed);

// All seeds, optionally on `jobs` threads; results are independent of jobs.
TrainResult train(const TrainConfig& cfg, const Corpus& train_set, const Corpus& eval_set,
                  std::size_t jobs = 1);

Checkpoint make_checkpoint(const TrainConfig& cfg, const SeedRun& run);
// Window and options recorded by make_checkpoint (defaults when absent).
ContextWindowSpec checkpoint_window(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Inference benchmark

struct BenchOptions {
  std::size_t warmup = 10;
  std::size_t segments = 100;
  std::size_t rounds = 7;
};

struct BenchRow {
  std::string mode;
  double seconds_per_segment = 0.0;
  double ratio = 0.0;  // vs baseline
};

struct BenchReport {
  std::vector<BenchRow> rows;  // baseline, injection, context_aware
  // Second, independent timing of the baseline relative to the first.
  double baseline_repeat_ratio = 0.0;
  std::size_t segments = 0;
  std::size_t injection_neighbors = 0;  // neighbors per timed injection segment (max)

  const BenchRow& row(std::string_view mode) const;
};

// Times forward passes only (no tape recording, data already in memory),
// single-threaded. Uses segments that have at least one neighbor under the
// injection model's window so every mode sees the same inputs. Each round
// times every mode once over all segments; the reported time is the median
// of the per-round means.
BenchReport bench_inference(const Model& baseline, const Model& injection,
                            const Model& context_aware, const Corpus& corpus,
                            ContextWindowSpec injection_window, BenchOptions options = {});

// ---------------------------------------------------------------------------
// Hyper-parameter sweep

struct SweepGrid {
  std::vector<double> alphas;
  std::vector<std::size_t> context_dims;
  std::vector<ContextWindowSpec> windows;

  bool empty() const { return alphas.empty() && context_dims.empty() && windows.empty(); }
};

// Grammar, one or more `key=values` items separated by ';':
//   alpha=1e-5..1e5:x10     geometric range (inclusive)
//   alpha=0.1,1,10          explicit list
//   D=4,8,16,32,64          (also D=4..64:x2)
//   window=(2,0),(2,-1),(3,-2)
// Duplicate values are dropped and reported through `warn`.
SweepGrid parse_grid(std::string_view spec,
                     const std::function<void(const std::string&)>& warn = {});

struct SweepPoint {
  double alpha = 0.0;
  std::size_t context_dim = 0;
  ContextWindowSpec window;
};

// Cartesian product over the grid; unset dimensions take the base config value.
std::vector<SweepPoint> expand_grid(const SweepGrid& grid, const TrainConfig& base);

struct SweepRow {
  std::size_t point = 0;
  SweepPoint params;
  std::string seed;  // decimal seed, or "mean"
  std::string metric_name;
  double metric = 0.0;
  double final_task_loss = 0.0;
  double final_context_loss = 0.0;
};

std::vector<SweepRow> run_sweep(const TrainConfig& base, const SweepGrid& grid,
                                const Corpus& train_set, const Corpus& eval_set,
                                std::size_t jobs = 1);

// ---------------------------------------------------------------------------
// Report files

void write_metrics_json(const TrainResult& result, const std::filesystem::path& path);
void write_metrics_tsv(const TrainResult& result, const std::filesystem::path& path);
void write_eval_json(const EvalMetrics& metrics, const std::filesystem::path& path);
void write_sweep_tsv(std::span<const SweepRow> rows, const std::filesystem::path& path);
void write_sweep_jsonl(std::span<const SweepRow> rows, const std::filesystem::path& path);
void write_bench_tsv(const BenchReport& report, const std::filesystem::path& path);

}  // namespace caft
