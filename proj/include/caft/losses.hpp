#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "caft/model.hpp"
#include "caft/tensor.hpp"

namespace caft {

inline constexpr int kBlank = 0;

// Label sequence for CTC. Tokens live in [1, V-1]; 0 is the blank.
struct CtcTarget {
  std::vector<int> tokens;

  std::size_t size() const { return tokens.size(); }
  // U plus the number of adjacent equal pairs: the fewest frames that can
  // emit this target.
  std::size_t min_frames() const;

  friend bool operator==(const CtcTarget&, const CtcTarget&) = default;
};

// −log Σ over alignments, by the log-space forward recursion over the
// 2U+1 extended label sequence. Gradient w.r.t. `log_probs` comes from the
// matching backward recursion. Throws InfeasibleTargetError when T is too
// short for the target.
Var ctc_loss(Var log_probs, const CtcTarget& target);

// Enumerates all Vᵀ frame paths. Test oracle; refuses Vᵀ > 1e6.
double ctc_brute_force(const Tensor& log_probs, const CtcTarget& target);

// Per-frame argmax (lowest index wins ties), merge repeats, drop blanks.
std::vector<int> ctc_greedy_decode(const Tensor& log_probs);

// −log_softmax(logits)[label] for logits [C].
Var cross_entropy(Var logits, std::size_t label);

// ‖e_j − e_i‖₂.
Var context_loss(const ContextEmbedding& e_j, const ContextEmbedding& e_i);

struct LossBundle {
  Var task_loss;
  std::optional<Var> context_loss;  // absent when no neighbor embedding exists
  Var total;
  double alpha = 0.0;

  double task_value() const { return task_loss.item(); }
  double context_value() const { return context_loss ? context_loss->item() : 0.0; }
  double total_value() const { return total.item(); }
};

// total = task + alpha * ctx, evaluated in exactly that order. Without a
// context term total is the task node itself.
LossBundle total_loss(Var task, std::optional<Var> ctx, double alpha);

}  // namespace caft
