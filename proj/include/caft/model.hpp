#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "caft/tensor.hpp"

namespace caft {

// Which of the three architectures a model implements:
//   baseline       frame representations go straight to the task head;
//   injection      an embedding of the neighboring segments is appended to
//                  every frame, so neighbors are needed at inference;
//   context_aware  the appended embedding comes from the current segment,
//                  and a context loss pulls it toward the neighbor embedding
//                  during training only.
enum class Mode { baseline, injection, context_aware };
enum class TaskKind { ctc, classify };

std::string to_string(Mode mode);
std::string to_string(TaskKind task);
Mode parse_mode(std::string_view text);
TaskKind parse_task(std::string_view text);

struct ModelConfig {
  std::size_t frame_dim = 8;
  std::size_t hidden_dim = 16;
  std::size_t encoder_layers = 1;
  std::size_t attention_heads = 2;
  // Feed-forward inner width; 0 means 2 * hidden_dim.
  std::size_t ffn_dim = 0;
  // Width of the additive-attention scoring layer in the context module;
  // 0 means hidden_dim.
  std::size_t attention_dim = 0;
  // CTC vocabulary including the blank at index 0.
  std::size_t vocab_size = 9;
  std::size_t context_dim = 4;
  Mode mode = Mode::context_aware;
  TaskKind task = TaskKind::ctc;
  std::size_t num_classes = 3;
  bool positional_encoding = true;

  std::size_t resolved_ffn_dim() const { return ffn_dim ? ffn_dim : 2 * hidden_dim; }
  std::size_t resolved_attention_dim() const {
    return attention_dim ? attention_dim : hidden_dim;
  }
  std::size_t output_dim() const { return task == TaskKind::ctc ? vocab_size : num_classes; }
  bool has_context() const { return mode != Mode::baseline; }
  // H for baseline, H + D otherwise.
  std::size_t head_input_dim() const {
    return hidden_dim + (has_context() ? context_dim : 0);
  }

  // Throws ConfigError on a violated invariant.
  void validate() const;

  // Flat key=value form used by run-config files and checkpoints.
  std::vector<std::pair<std::string, std::string>> entries() const;
  // Returns false when `key` is not a model key; throws ConfigError on a bad value.
  bool set(std::string_view key, std::string_view value);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ParamSpec {
  std::string name;
  Shape shape;
};

// Registry order of every parameter for `cfg`. Model construction and the
// checkpoint format both follow this order.
std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg);

class Model {
 public:
  // Xavier-uniform weights, zero biases, unit layer-norm gains. Each
  // parameter draws from its own stream keyed by (seed, name), so models of
  // different modes built with the same seed share encoder weights.
  Model(ModelConfig cfg, std::uint64_t seed);
  // Adopts existing parameters; names and shapes must match the layout.
  Model(ModelConfig cfg, std::vector<Parameter> params);

  const ModelConfig& config() const { return cfg_; }
  std::span<Parameter> parameters() { return params_; }
  std::span<const Parameter> parameters() const { return params_; }
  std::vector<Parameter*> parameter_ptrs();

  bool has_param(std::string_view name) const;
  Parameter& param(std::string_view name);
  const Parameter& param(std::string_view name) const;

  std::size_t parameter_count() const;

 private:
  void index_params();

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Frames [T×F] -> representations [T×H]. No subsampling.
Var encode(Tape& tape, const Model& model, const Tensor& frames);

enum class EmbeddingSource { from_neighbors, from_current };

struct ContextEmbedding {
  Var values;  // [D]
  EmbeddingSource source;
};

// Time-concatenates `reps`, pools with additive attention
// a_t = softmax_t(vᵀ tanh(W z_t)) and projects the pooled row to D.
ContextEmbedding context_embed(Tape& tape, const Model& model, std::span<const Var> reps,
                               EmbeddingSource source);

// Attention weights over the time-concatenated reps; exposed for tests.
Var context_attention_weights(Tape& tape, const Model& model, std::span<const Var> reps);

// Output of every forward pass: CTC log-probabilities [T×V], or class logits
// [C] for the classification head (mean over time, then linear).
Var forward_baseline(Tape& tape, const Model& model, const Tensor& frames);

// Encodes each neighbor, builds e_j from them and appends it to every frame.
Var forward_injection(Tape& tape, const Model& model, const Tensor& frames,
                      std::span<const Tensor* const> neighbors);

enum class Phase { train, infer };

struct ContextAwareOptions {
  // Treat e_j as a constant target in the context loss.
  bool detach_target = false;
  // Feed e_j rather than e_i to the head while training.
  bool train_with_target_embedding = false;
};

struct ContextAwareOutput {
  Var output;
  ContextEmbedding current;
  std::optional<ContextEmbedding> neighbor;
  Var head_input;
};

// At Phase::infer, `neighbors` must be empty and the result depends only on
// `frames`. At Phase::train an empty list means the boundary case: no e_j.
ContextAwareOutput forward_context_aware(Tape& tape, const Model& model,
                                         const Tensor& frames,
                                         std::span<const Tensor* const> neighbors,
                                         Phase phase, ContextAwareOptions options = {});

// Per-frame head input ([z_t] or [z_t, e]) for injection; exposed for the
// frame-concatenation structure tests.
Var injection_head_input(Tape& tape, const Model& model, const Tensor& frames,
                         std::span<const Tensor* const> neighbors);

struct ParamCount {
  std::size_t total = 0;
  std::size_t baseline_total = 0;
  std::size_t delta = 0;
  double delta_fraction() const {
    return baseline_total ? static_cast<double>(delta) / static_cast<double>(baseline_total)
                          : 0.0;
  }
};

// Counted from the parameter layout, so huge configs need no allocation.
ParamCount count_params(const ModelConfig& cfg);

// Closed form of the context overhead: (A·H + A) + (H·D + D) + D·V_out,
// zero for the baseline.
std::size_t context_overhead_formula(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints.
//
//   "CAFT" | u32 version | u32 len, config text | blobs...
//   blob = u32 len, name | u32 rank | u32 dims[rank] | f64 values[]
//
// All integers and floats little-endian. The config text is newline-separated
// key=value lines: model keys from ModelConfig::entries() followed by
// free-form metadata (window, seed, options).

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  std::vector<std::pair<std::string, std::string>> metadata;

  std::optional<std::string> find(std::string_view key) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace caft
