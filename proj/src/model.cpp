#include "caft/model.hpp"

#include <cmath>
#include <random>

#include "caft/errors.hpp"
#include "parse.hpp"

namespace caft {

namespace {

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string layer_prefix(std::size_t layer) {
  return "encoder.layer" + std::to_string(layer) + ".";
}

bool is_bias_like(const std::string& name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".bias") || ends_with(".shift");
}

bool is_gain(const std::string& name) {
  return name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
}

Tensor sinusoidal_positions(std::size_t rows, std::size_t dim) {
  Tensor pe({rows, dim});
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t k = 0; k < dim; ++k) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(2 * (k / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(t) * freq;
      pe.at(t, k) = (k % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Var linear(Tape& tape, const Model& model, Var x, const std::string& prefix) {
  Var w = tape.watch(model.param(prefix + ".weight"));
  Var b = tape.watch(model.param(prefix + ".bias"));
  return add_bias(matmul(x, w), b);
}

// A key bias shifts every score of a query row equally, so softmax cancels it.
Var linear_no_bias(Tape& tape, const Model& model, Var x, const std::string& prefix) {
  return matmul(x, tape.watch(model.param(prefix + ".weight")));
}

Var self_attention(Tape& tape, const Model& model, Var x, const std::string& prefix) {
  const ModelConfig& cfg = model.config();
  Var q = linear(tape, model, x, prefix + "query");
  Var k = linear_no_bias(tape, model, x, prefix + "key");
  Var v = linear(tape, model, x, prefix + "value");
  const std::size_t heads = cfg.attention_heads;
  const std::size_t head_dim = cfg.hidden_dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::optional<Var> merged;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t lo = h * head_dim, hi = lo + head_dim;
    Var qh = heads == 1 ? q : slice_cols(q, lo, hi);
    Var kh = heads == 1 ? k : slice_cols(k, lo, hi);
    Var vh = heads == 1 ? v : slice_cols(v, lo, hi);
    Var weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
    Var out = matmul(weights, vh);
    merged = merged ? concat_feature(*merged, out) : out;
  }
  return linear(tape, model, *merged, prefix + "out");
}

Var layer_norm_named(Tape& tape, const Model& model, Var x, const std::string& prefix) {
  return layer_norm(x, tape.watch(model.param(prefix + ".gain")),
                    tape.watch(model.param(prefix + ".shift")));
}

// Task head over per-frame inputs [T×H'].
Var apply_head(Tape& tape, const Model& model, Var head_input) {
  const ModelConfig& cfg = model.config();
  if (cfg.task == TaskKind::ctc) {
    return log_softmax_rows(linear(tape, model, head_input, "head"));
  }
  Var pooled = reshape(mean_time(head_input), {1, cfg.head_input_dim()});
  Var logits = linear(tape, model, pooled, "head");
  return reshape(logits, {cfg.num_classes});
}

void require_mode(const Model& model, Mode mode, const char* fn) {
  if (model.config().mode != mode) {
    throw ContractError(std::string(fn) + " called on a " + to_string(model.config().mode) +
                        " model");
  }
}

std::vector<Var> encode_all(Tape& tape, const Model& model,
                            std::span<const Tensor* const> frames) {
  std::vector<Var> reps;
  reps.reserve(frames.size());
  for (const Tensor* f : frames) reps.push_back(encode(tape, model, *f));
  return reps;
}

Var append_embedding(Var reps, const ContextEmbedding& e) {
  return concat_feature(reps, broadcast_rows(e.values, reps.value().rows()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::baseline: return "baseline";
    case Mode::injection: return "injection";
    case Mode::context_aware: return "context_aware";
  }
  return "?";
}

std::string to_string(TaskKind task) { return task == TaskKind::ctc ? "ctc" : "classify"; }

Mode parse_mode(std::string_view text) {
  if (text == "baseline") return Mode::baseline;
  if (text == "injection") return Mode::injection;
  if (text == "context_aware") return Mode::context_aware;
  throw ConfigError("unknown mode '" + std::string(text) +
                    "' (expected baseline, injection or context_aware)");
}

TaskKind parse_task(std::string_view text) {
  if (text == "ctc") return TaskKind::ctc;
  if (text == "classify") return TaskKind::classify;
  throw ConfigError("unknown task '" + std::string(text) + "' (expected ctc or classify)");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(frame_dim, "frame_dim");
  positive(hidden_dim, "hidden_dim");
  positive(attention_heads, "attention_heads");
  if (hidden_dim % attention_heads != 0) {
    throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                      " is not divisible by attention_heads " +
                      std::to_string(attention_heads));
  }
  if (has_context() && context_dim == 0) {
    throw ConfigError("context_dim must be >= 1 in " + to_string(mode) + " mode");
  }
  if (task == TaskKind::ctc && vocab_size < 2) {
    throw ConfigError("vocab_size must be >= 2 for the ctc task");
  }
  if (task == TaskKind::classify && num_classes < 2) {
    throw ConfigError("num_classes must be >= 2 for the classify task");
  }
}

std::vector<std::pair<std::string, std::string>> ModelConfig::entries() const {
  return {
      {"frame_dim", std::to_string(frame_dim)},
      {"hidden_dim", std::to_string(hidden_dim)},
      {"encoder_layers", std::to_string(encoder_layers)},
      {"attention_heads", std::to_string(attention_heads)},
      {"ffn_dim", std::to_string(ffn_dim)},
      {"attention_dim", std::to_string(attention_dim)},
      {"vocab_size", std::to_string(vocab_size)},
      {"context_dim", std::to_string(context_dim)},
      {"mode", to_string(mode)},
      {"task", to_string(task)},
      {"num_classes", std::to_string(num_classes)},
      {"positional_encoding", positional_encoding ? "true" : "false"},
  };
}

bool ModelConfig::set(std::string_view key, std::string_view value) {
  if (key == "frame_dim") frame_dim = parse::size(key, value);
  else if (key == "hidden_dim") hidden_dim = parse::size(key, value);
  else if (key == "encoder_layers") encoder_layers = parse::size(key, value);
  else if (key == "attention_heads") attention_heads = parse::size(key, value);
  else if (key == "ffn_dim") ffn_dim = parse::size(key, value);
  else if (key == "attention_dim") attention_dim = parse::size(key, value);
  else if (key == "vocab_size") vocab_size = parse::size(key, value);
  else if (key == "context_dim") context_dim = parse::size(key, value);
  else if (key == "mode") mode = parse_mode(value);
  else if (key == "task") task = parse_task(value);
  else if (key == "num_classes") num_classes = parse::size(key, value);
  else if (key == "positional_encoding") positional_encoding = parse::boolean(key, value);
  else return false;
  return true;
}

// ---------------------------------------------------------------------------
// Parameters

std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t f = cfg.frame_dim, h = cfg.hidden_dim, ffn = cfg.resolved_ffn_dim();
  std::vector<ParamSpec> layout;
  layout.push_back({"encoder.input.weight", {f, h}});
  layout.push_back({"encoder.input.bias", {h}});
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    const std::string p = layer_prefix(l);
    layout.push_back({p + "norm1.gain", {h}});
    layout.push_back({p + "norm1.shift", {h}});
    for (const char* proj : {"query", "key", "value", "out"}) {
      layout.push_back({p + "attn." + proj + ".weight", {h, h}});
      if (std::string_view(proj) != "key") layout.push_back({p + "attn." + proj + ".bias", {h}});
    }
    layout.push_back({p + "norm2.gain", {h}});
    layout.push_back({p + "norm2.shift", {h}});
    layout.push_back({p + "ffn.hidden.weight", {h, ffn}});
    layout.push_back({p + "ffn.hidden.bias", {ffn}});
    layout.push_back({p + "ffn.out.weight", {ffn, h}});
    layout.push_back({p + "ffn.out.bias", {h}});
  }
  layout.push_back({"encoder.final_norm.gain", {h}});
  layout.push_back({"encoder.final_norm.shift", {h}});
  if (cfg.has_context()) {
    const std::size_t a = cfg.resolved_attention_dim(), d = cfg.context_dim;
    layout.push_back({"context.score.weight", {h, a}});
    layout.push_back({"context.score.vector", {a}});
    layout.push_back({"context.proj.weight", {h, d}});
    layout.push_back({"context.proj.bias", {d}});
  }
  layout.push_back({"head.weight", {cfg.head_input_dim(), cfg.output_dim()}});
  layout.push_back({"head.bias", {cfg.output_dim()}});
  return layout;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  for (ParamSpec& spec : parameter_layout(cfg_)) {
    Tensor value(spec.shape);
    if (is_gain(spec.name)) {
      value.fill(1.0);
    } else if (!is_bias_like(spec.name)) {
      const double fan_in = static_cast<double>(spec.shape[0]);
      const double fan_out = spec.shape.size() > 1 ? static_cast<double>(spec.shape[1]) : 1.0;
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(fnv1a(spec.name)),
                        static_cast<std::uint32_t>(fnv1a(spec.name) >> 32)};
      std::mt19937_64 rng(seq);
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (double& v : value.values()) v = dist(rng);
    }
    params_.push_back({std::move(spec.name), std::move(value)});
  }
  index_params();
}

Model::Model(ModelConfig cfg, std::vector<Parameter> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  const auto layout = parameter_layout(cfg_);
  if (layout.size() != params_.size()) {
    throw ConfigError("expected " + std::to_string(layout.size()) + " parameters, got " +
                      std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name != params_[i].name || layout[i].shape != params_[i].value.shape()) {
      throw ConfigError("parameter " + std::to_string(i) + " is '" + params_[i].name + "' " +
                        shape_string(params_[i].value.shape()) + ", expected '" +
                        layout[i].name + "' " + shape_string(layout[i].shape));
    }
  }
  index_params();
}

void Model::index_params() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace(params_[i].name, i);
}

std::vector<Parameter*> Model::parameter_ptrs() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (Parameter& p : params_) out.push_back(&p);
  return out;
}

bool Model::has_param(std::string_view name) const {
  return index_.contains(std::string(name));
}

Parameter& Model::param(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("no parameter named '" + std::string(name) + "'");
  return params_[it->second];
}

const Parameter& Model::param(std::string_view name) const {
  return const_cast<Model*>(this)->param(name);
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const Parameter& p : params_) total += p.value.size();
  return total;
}

ParamCount count_params(const ModelConfig& cfg) {
  auto total_of = [](const ModelConfig& c) {
    std::size_t n = 0;
    for (const ParamSpec& spec : parameter_layout(c)) {
      std::size_t k = 1;
      for (std::size_t d : spec.shape) k *= d;
      n += k;
    }
    return n;
  };
  ModelConfig base = cfg;
  base.mode = Mode::baseline;
  ParamCount out;
  out.total = total_of(cfg);
  out.baseline_total = total_of(base);
  out.delta = out.total - out.baseline_total;
  return out;
}

std::size_t context_overhead_formula(const ModelConfig& cfg) {
  if (!cfg.has_context()) return 0;
  const std::size_t h = cfg.hidden_dim, a = cfg.resolved_attention_dim(), d = cfg.context_dim;
  return (a * h + a) + (h * d + d) + d * cfg.output_dim();
}

// ---------------------------------------------------------------------------
// Forward passes

Var encode(Tape& tape, const Model& model, const Tensor& frames) {
  const ModelConfig& cfg = model.config();
  if (frames.rank() != 2 || frames.cols() != cfg.frame_dim) {
    throw DimensionError("encode: expected frames [T x " + std::to_string(cfg.frame_dim) +
                         "], got " + shape_string(frames.shape()));
  }
  Var x = linear(tape, model, tape.constant(frames), "encoder.input");
  if (cfg.positional_encoding) {
    x = add(x, tape.constant(sinusoidal_positions(frames.rows(), cfg.hidden_dim)));
  }
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    const std::string p = layer_prefix(l);
    Var attn = self_attention(tape, model, layer_norm_named(tape, model, x, p + "norm1"),
                              p + "attn.");
    x = add(x, attn);
    Var hidden = relu(linear(tape, model, layer_norm_named(tape, model, x, p + "norm2"),
                             p + "ffn.hidden"));
    x = add(x, linear(tape, model, hidden, p + "ffn.out"));
  }
  return layer_norm_named(tape, model, x, "encoder.final_norm");
}

Var context_attention_weights(Tape& tape, const Model& model, std::span<const Var> reps) {
  if (reps.empty()) throw ContractError("context_embed: no representations to pool");
  if (!model.config().has_context()) {
    throw ContractError("context_embed: baseline models have no context module");
  }
  const std::size_t a = model.config().resolved_attention_dim();
  Var z = reps.size() == 1 ? reps.front() : concat_time(reps);
  Var hidden = tanh(matmul(z, tape.watch(model.param("context.score.weight"))));
  Var v = reshape(tape.watch(model.param("context.score.vector")), {a, 1});
  Var scores = transpose(matmul(hidden, v));  // [1 x ΣT]
  return softmax_rows(scores);
}

ContextEmbedding context_embed(Tape& tape, const Model& model, std::span<const Var> reps,
                               EmbeddingSource source) {
  Var weights = context_attention_weights(tape, model, reps);
  Var z = reps.size() == 1 ? reps.front() : concat_time(reps);
  Var pooled = matmul(weights, z);  // [1 x H]
  Var projected = linear(tape, model, pooled, "context.proj");
  return {reshape(projected, {model.config().context_dim}), source};
}

Var forward_baseline(Tape& tape, const Model& model, const Tensor& frames) {
  require_mode(model, Mode::baseline, "forward_baseline");
  return apply_head(tape, model, encode(tape, model, frames));
}

Var injection_head_input(Tape& tape, const Model& model, const Tensor& frames,
                         std::span<const Tensor* const> neighbors) {
  require_mode(model, Mode::injection, "forward_injection");
  if (neighbors.empty()) {
    throw ContractError("forward_injection: no neighboring segments available");
  }
  Var reps = encode(tape, model, frames);
  std::vector<Var> neighbor_reps = encode_all(tape, model, neighbors);
  ContextEmbedding e =
      context_embed(tape, model, neighbor_reps, EmbeddingSource::from_neighbors);
  return append_embedding(reps, e);
}

Var forward_injection(Tape& tape, const Model& model, const Tensor& frames,
                      std::span<const Tensor* const> neighbors) {
  return apply_head(tape, model, injection_head_input(tape, model, frames, neighbors));
}

ContextAwareOutput forward_context_aware(Tape& tape, const Model& model,
                                         const Tensor& frames,
                                         std::span<const Tensor* const> neighbors,
                                         Phase phase, ContextAwareOptions options) {
  require_mode(model, Mode::context_aware, "forward_context_aware");
  if (phase == Phase::infer && !neighbors.empty()) {
    throw ContractError("forward_context_aware: neighbors must not be supplied at inference");
  }
  Var reps = encode(tape, model, frames);
  const Var current_reps[] = {reps};
  ContextEmbedding current =
      context_embed(tape, model, current_reps, EmbeddingSource::from_current);

  std::optional<ContextEmbedding> neighbor;
  if (phase == Phase::train && !neighbors.empty()) {
    std::vector<Var> neighbor_reps = encode_all(tape, model, neighbors);
    neighbor = context_embed(tape, model, neighbor_reps, EmbeddingSource::from_neighbors);
    if (options.detach_target) neighbor->values = detach(neighbor->values);
  }

  const ContextEmbedding& fed =
      (phase == Phase::train && options.train_with_target_embedding && neighbor) ? *neighbor
                                                                                 : current;
  Var head_input = append_embedding(reps, fed);
  return {apply_head(tape, model, head_input), current, neighbor, head_input};
}

}  // namespace caft
