#include "caft/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <sstream>
#include <thread>

#include "caft/errors.hpp"
#include "parallel.hpp"
#include "parse.hpp"

namespace caft {

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  model.validate();
  window.validate();
  if (alpha && !(*alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
}

std::vector<std::pair<std::string, std::string>> TrainConfig::entries() const {
  std::string seed_list;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) seed_list += ",";
    seed_list += std::to_string(seeds[i]);
  }
  std::vector<std::pair<std::string, std::string>> out;
  if (alpha) out.emplace_back("alpha", parse::real_text(*alpha));
  out.emplace_back("learning_rate", parse::real_text(learning_rate));
  out.emplace_back("beta1", parse::real_text(beta1));
  out.emplace_back("beta2", parse::real_text(beta2));
  out.emplace_back("adam_eps", parse::real_text(adam_eps));
  out.emplace_back("epochs", std::to_string(epochs));
  out.emplace_back("batch_size", std::to_string(batch_size));
  out.emplace_back("seeds", seed_list);
  out.emplace_back("detach_target", detach_target ? "true" : "false");
  out.emplace_back("train_with_target_embedding", train_with_target_embedding ? "true" : "false");
  return out;
}

bool TrainConfig::set(std::string_view key, std::string_view value) {
  if (key == "alpha") alpha = parse::real(key, value);
  else if (key == "learning_rate") learning_rate = parse::real(key, value);
  else if (key == "beta1") beta1 = parse::real(key, value);
  else if (key == "beta2") beta2 = parse::real(key, value);
  else if (key == "adam_eps") adam_eps = parse::real(key, value);
  else if (key == "epochs") epochs = parse::size(key, value);
  else if (key == "batch_size") batch_size = parse::size(key, value);
  else if (key == "detach_target") detach_target = parse::boolean(key, value);
  else if (key == "train_with_target_embedding")
    train_with_target_embedding = parse::boolean(key, value);
  else if (key == "seeds") {
    seeds.clear();
    std::string item;
    std::istringstream is{std::string(value)};
    while (std::getline(is, item, ',')) {
      const auto b = item.find_first_not_of(' ');
      const auto e = item.find_last_not_of(' ');
      if (b == std::string::npos) throw ConfigError("empty entry in seeds list");
      seeds.push_back(parse::u64(key, item.substr(b, e - b + 1)));
    }
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
  } else {
    return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::span<const Parameter> params, double learning_rate, double beta1, double beta2,
           double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Parameter& p : params) {
    m_.emplace_back(p.value.shape());
    v_.emplace_back(p.value.shape());
  }
}

void Adam::step(std::span<Parameter> params, std::span<const Tensor> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ContractError("Adam::step: parameter count changed");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k].value.shape() || m_[k].shape() != grads[k].shape()) {
      throw DimensionError("Adam::step: gradient " + shape_string(grads[k].shape()) +
                           " for parameter '" + params[k].name + "' of shape " +
                           shape_string(params[k].value.shape()));
    }
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& value = params[k].value;
    const Tensor& g = grads[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g[i];
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g[i] * g[i];
      const double m_hat = m_[k][i] / c1;
      const double v_hat = v_[k][i] / c2;
      value[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// Losses per example

Var task_loss(Var output, const Target& target) {
  if (const auto* t = std::get_if<CtcTarget>(&target)) {
    if (output.value().rank() != 2) {
      throw TaskMismatchError("CTC target given to a classification head");
    }
    return ctc_loss(output, *t);
  }
  if (output.value().rank() != 1) {
    throw TaskMismatchError("class label given to a CTC head");
  }
  const int label = std::get<ClassLabel>(target).value;
  if (label < 0) throw ContractError("negative class label");
  return cross_entropy(output, static_cast<std::size_t>(label));
}

namespace {

std::vector<const Tensor*> frames_of(std::span<const Segment* const> segments) {
  std::vector<const Tensor*> out;
  out.reserve(segments.size());
  for (const Segment* s : segments) out.push_back(&s->frames);
  return out;
}

void check_compatible(const Model& model, const Corpus& corpus) {
  const ModelConfig& cfg = model.config();
  if (corpus.task() != cfg.task) {
    throw TaskMismatchError("model has a " + to_string(cfg.task) + " head but the corpus has " +
                            to_string(corpus.task()) + " targets");
  }
  if (corpus.frame_dim() != cfg.frame_dim) {
    throw TaskMismatchError("model expects frame dim " + std::to_string(cfg.frame_dim) +
                            ", corpus has " + std::to_string(corpus.frame_dim()));
  }
  if (cfg.task != TaskKind::ctc) return;
  for (const Stream& s : corpus.streams) {
    for (const Segment& seg : s.segments) {
      for (int tok : std::get<CtcTarget>(seg.target).tokens) {
        if (tok >= static_cast<int>(cfg.vocab_size)) {
          throw TaskMismatchError("corpus token " + std::to_string(tok) +
                                  " is outside the model vocabulary of " +
                                  std::to_string(cfg.vocab_size));
        }
      }
    }
  }
}

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return seed * 0x9E3779B97F4A7C15ull + epoch + 1;
}

}  // namespace

std::optional<LossBundle> sample_loss(Tape& tape, const Model& model, const Segment& current,
                                      std::span<const Segment* const> neighbors,
                                      const TrainConfig& cfg) {
  const double alpha = cfg.resolved_alpha();
  switch (model.config().mode) {
    case Mode::baseline:
      return total_loss(task_loss(forward_baseline(tape, model, current.frames), current.target),
                        std::nullopt, alpha);
    case Mode::injection: {
      if (neighbors.empty()) return std::nullopt;
      const auto frames = frames_of(neighbors);
      Var out = forward_injection(tape, model, current.frames, frames);
      return total_loss(task_loss(out, current.target), std::nullopt, alpha);
    }
    case Mode::context_aware: {
      std::vector<const Tensor*> frames;
      if (cfg.context_branch) frames = frames_of(neighbors);
      ContextAwareOutput out = forward_context_aware(tape, model, current.frames, frames,
                                                     Phase::train, cfg.context_options());
      std::optional<Var> ctx;
      if (out.neighbor) ctx = context_loss(*out.neighbor, out.current);
      return total_loss(task_loss(out.output, current.target), ctx, alpha);
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Evaluation

std::size_t levenshtein(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0u : 1u)});
      diag = up;
    }
  }
  return row[b.size()];
}

double macro_f1(std::span<const int> labels, std::span<const int> predictions,
                std::size_t num_classes, std::vector<double>* per_class) {
  if (labels.size() != predictions.size()) {
    throw ContractError("macro_f1: labels and predictions differ in length");
  }
  std::vector<std::size_t> tp(num_classes), fp(num_classes), fn(num_classes);
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const auto y = static_cast<std::size_t>(labels[k]);
    const auto p = static_cast<std::size_t>(predictions[k]);
    if (y >= num_classes || p >= num_classes) throw ContractError("macro_f1: class out of range");
    if (y == p) {
      ++tp[y];
    } else {
      ++fp[p];
      ++fn[y];
    }
  }
  double total = 0.0;
  if (per_class) per_class->assign(num_classes, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
    const double f1 = denom ? 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom) : 0.0;
    if (per_class) (*per_class)[c] = f1;
    total += f1;
  }
  return num_classes ? total / static_cast<double>(num_classes) : 0.0;
}

EvalMetrics evaluate(const Model& model, const Corpus& corpus, ContextWindowSpec window) {
  check_compatible(model, corpus);
  const ModelConfig& cfg = model.config();
  NeighborReader reader(corpus, window);
  EvalMetrics m;
  m.task = cfg.task;
  std::vector<int> labels, predictions;
  double loss_sum = 0.0;

  for (const Stream& stream : corpus.streams) {
    for (const Segment& seg : stream.segments) {
      Tape tape(false);
      Var out;
      switch (cfg.mode) {
        case Mode::baseline:
          out = forward_baseline(tape, model, seg.frames);
          break;
        case Mode::injection: {
          const auto neighbors = reader.neighbors(seg);
          if (neighbors.empty()) {
            ++m.skipped;
            continue;
          }
          const auto frames = frames_of(neighbors);
          out = forward_injection(tape, model, seg.frames, frames);
          break;
        }
        case Mode::context_aware:
          out = forward_context_aware(tape, model, seg.frames, {}, Phase::infer).output;
          break;
      }
      ++m.segments;
      loss_sum += task_loss(out, seg.target).item();
      if (const auto* ref = std::get_if<CtcTarget>(&seg.target)) {
        const std::vector<int> hyp = ctc_greedy_decode(out.value());
        m.edit_errors += levenshtein(hyp, ref->tokens);
        m.reference_tokens += ref->size();
      } else {
        const Tensor& logits = out.value();
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.size(); ++c) {
          if (logits[c] > logits[best]) best = c;
        }
        labels.push_back(std::get<ClassLabel>(seg.target).value);
        predictions.push_back(static_cast<int>(best));
      }
    }
  }

  m.neighbor_reads = reader.reads();
  m.mean_task_loss = m.segments ? loss_sum / static_cast<double>(m.segments) : 0.0;
  if (cfg.task == TaskKind::ctc) {
    m.token_error_rate = m.reference_tokens
                             ? static_cast<double>(m.edit_errors) /
                                   static_cast<double>(m.reference_tokens)
                             : static_cast<double>(m.edit_errors);
  } else {
    m.macro_f1 = macro_f1(labels, predictions, cfg.num_classes, &m.class_f1);
    std::size_t correct = 0;
    for (std::size_t k = 0; k < labels.size(); ++k) correct += labels[k] == predictions[k];
    m.accuracy = labels.empty() ? 0.0
                                : static_cast<double>(correct) / static_cast<double>(labels.size());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training

Summary summarize(std::span<const double> values) {
  Summary s;
  if (values.empty()) return s;
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

SeedRun train_seed(const TrainConfig& cfg, const Corpus& train_set, const Corpus& eval_set,
                   std::uint64_t seed) {
  cfg.validate();
  if (train_set.segment_count() == 0) throw ContractError("training corpus is empty");
  SeedRun run{seed, Model(cfg.model, seed), {}, {}};
  check_compatible(run.model, train_set);
  Model& model = run.model;
  Adam adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats stats;
    double task_sum = 0.0, ctx_sum = 0.0, total_sum = 0.0;
    for (const Batch& batch : make_batches(train_set, cfg.window, cfg.batch_size,
                                           epoch_seed(seed, epoch))) {
      std::vector<Tensor> grads;
      for (const Parameter& p : model.parameters()) grads.emplace_back(p.value.shape());
      std::size_t used = 0;
      for (const Example& ex : batch) {
        Tape tape;
        std::optional<LossBundle> loss;
        try {
          loss = sample_loss(tape, model, *ex.current, ex.neighbors, cfg);
        } catch (const NumericError& e) {
          throw DivergenceError("seed " + std::to_string(seed) + " epoch " +
                                std::to_string(epoch) + " step " + std::to_string(step) +
                                ": " + e.what());
        }
        if (!loss) {
          ++stats.skipped;
          continue;
        }
        if (!std::isfinite(loss->total_value())) {
          throw DivergenceError("seed " + std::to_string(seed) + " epoch " +
                                std::to_string(epoch) + " step " + std::to_string(step) +
                                ": non-finite loss");
        }
        tape.backward(loss->total);
        for (std::size_t k = 0; k < grads.size(); ++k) {
          const Tensor g = tape.param_grad(model.parameters()[k]);
          for (std::size_t i = 0; i < g.size(); ++i) grads[k][i] += g[i];
        }
        ++used;
        ++stats.samples;
        task_sum += loss->task_value();
        total_sum += loss->total_value();
        if (loss->context_loss) {
          ++stats.context_samples;
          ctx_sum += loss->context_value();
        }
      }
      if (used == 0) continue;
      const double inv = 1.0 / static_cast<double>(used);
      for (Tensor& g : grads)
        for (double& v : g.values()) v *= inv;
      adam.step(model.parameters(), grads);
      ++step;
    }
    if (stats.samples) {
      stats.mean_task_loss = task_sum / static_cast<double>(stats.samples);
      stats.mean_total_loss = total_sum / static_cast<double>(stats.samples);
    }
    if (stats.context_samples) {
      stats.mean_context_loss = ctx_sum / static_cast<double>(stats.context_samples);
    }
    run.history.push_back(stats);
  }
  run.eval = evaluate(model, eval_set, cfg.window);
  return run;
}

TrainResult train(const TrainConfig& cfg, const Corpus& train_set, const Corpus& eval_set,
                  std::size_t jobs) {
  cfg.validate();
  std::vector<std::optional<SeedRun>> slots(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), jobs, [&](std::size_t k) {
    slots[k] = train_seed(cfg, train_set, eval_set, cfg.seeds[k]);
  });

  TrainResult result;
  result.config = cfg;
  std::vector<double> primary, loss, first_ctx, final_ctx;
  for (auto& slot : slots) {
    SeedRun& run = *slot;
    primary.push_back(run.eval.primary());
    loss.push_back(run.eval.mean_task_loss);
    if (!run.history.empty()) {
      first_ctx.push_back(run.history.front().mean_context_loss);
      final_ctx.push_back(run.history.back().mean_context_loss);
    }
    result.runs.push_back(std::move(run));
  }
  result.primary = summarize(primary);
  result.eval_task_loss = summarize(loss);
  result.first_epoch_context_loss = summarize(first_ctx);
  result.final_epoch_context_loss = summarize(final_ctx);
  return result;
}

Checkpoint make_checkpoint(const TrainConfig& cfg, const SeedRun& run) {
  return Checkpoint{
      run.model,
      {
          {"window.length", std::to_string(cfg.window.length)},
          {"window.offset", std::to_string(cfg.window.offset)},
          {"train.seed", std::to_string(run.seed)},
          {"train.alpha", parse::real_text(cfg.resolved_alpha())},
          {"train.detach_target", cfg.detach_target ? "true" : "false"},
          {"train.train_with_target_embedding", cfg.train_with_target_embedding ? "true" : "false"},
      }};
}

ContextWindowSpec checkpoint_window(const Checkpoint& ckpt) {
  ContextWindowSpec w;
  try {
    if (auto v = ckpt.find("window.length")) w.length = parse::integer("window.length", *v);
    if (auto v = ckpt.find("window.offset")) w.offset = parse::integer("window.offset", *v);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  w.validate();
  return w;
}

// ---------------------------------------------------------------------------
// Benchmark

const BenchRow& BenchReport::row(std::string_view mode) const {
  for (const BenchRow& r : rows) {
    if (r.mode == mode) return r;
  }
  throw ContractError("no bench row for mode " + std::string(mode));
}

BenchReport bench_inference(const Model& baseline, const Model& injection,
                            const Model& context_aware, const Corpus& corpus,
                            ContextWindowSpec injection_window, BenchOptions options) {
  if (baseline.config().mode != Mode::baseline || injection.config().mode != Mode::injection ||
      context_aware.config().mode != Mode::context_aware) {
    throw TaskMismatchError("bench needs baseline, injection and context_aware checkpoints");
  }
  const ModelConfig& b = baseline.config();
  for (const Model* m : {&injection, &context_aware}) {
    const ModelConfig& c = m->config();
    if (c.frame_dim != b.frame_dim || c.hidden_dim != b.hidden_dim ||
        c.encoder_layers != b.encoder_layers || c.attention_heads != b.attention_heads ||
        c.resolved_ffn_dim() != b.resolved_ffn_dim() || c.task != b.task) {
      throw TaskMismatchError("bench checkpoints do not share encoder dimensions and task");
    }
    check_compatible(*m, corpus);
  }
  check_compatible(baseline, corpus);

  struct Item {
    const Tensor* frames;
    std::vector<const Tensor*> neighbors;
  };
  std::vector<Item> items;
  NeighborReader reader(corpus, injection_window);
  for (const Stream& s : corpus.streams) {
    for (const Segment& seg : s.segments) {
      auto neighbors = reader.neighbors(seg);
      if (neighbors.empty()) continue;
      items.push_back({&seg.frames, frames_of(neighbors)});
    }
  }
  if (items.size() < options.warmup + 1) {
    throw ContractError("bench: corpus has too few segments with neighbors");
  }
  std::vector<Item> warm(items.begin(), items.begin() + static_cast<long>(options.warmup));
  items.erase(items.begin(), items.begin() + static_cast<long>(options.warmup));
  if (items.size() > options.segments) items.resize(options.segments);

  BenchReport report;
  report.segments = items.size();
  for (const Item& it : items) {
    report.injection_neighbors = std::max(report.injection_neighbors, it.neighbors.size());
  }

  double sink = 0.0;
  auto run_baseline = [&](const Item& it) {
    Tape tape(false);
    sink += forward_baseline(tape, baseline, *it.frames).value()[0];
  };
  auto run_injection = [&](const Item& it) {
    Tape tape(false);
    sink += forward_injection(tape, injection, *it.frames, it.neighbors).value()[0];
  };
  auto run_context = [&](const Item& it) {
    Tape tape(false);
    sink += forward_context_aware(tape, context_aware, *it.frames, {}, Phase::infer)
                .output.value()[0];
  };
  const std::function<void(const Item&)> runners[] = {run_baseline, run_injection, run_context,
                                                       run_baseline};

  for (const auto& run : runners)
    for (const Item& it : warm) run(it);

  std::vector<std::vector<double>> per_round(4);
  for (std::size_t r = 0; r < options.rounds; ++r) {
    for (std::size_t k = 0; k < 4; ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      for (const Item& it : items) runners[k](it);
      const auto t1 = std::chrono::steady_clock::now();
      per_round[k].push_back(std::chrono::duration<double>(t1 - t0).count() /
                             static_cast<double>(items.size()));
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  const double base_time = median(per_round[0]);
  const char* names[] = {"baseline", "injection", "context_aware"};
  for (std::size_t k = 0; k < 3; ++k) {
    const double t = median(per_round[k]);
    report.rows.push_back({names[k], t, t / base_time});
  }
  report.baseline_repeat_ratio = median(per_round[3]) / base_time;
  if (!std::isfinite(sink)) report.baseline_repeat_ratio = std::nan("");
  return report;
}

}  // namespace caft
