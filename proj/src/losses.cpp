#include "caft/losses.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "caft/errors.hpp"

namespace caft {

namespace {

constexpr double kLogZero = -std::numeric_limits<double>::infinity();

void check_tokens(const CtcTarget& target, std::size_t vocab) {
  for (int tok : target.tokens) {
    if (tok == kBlank || tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
      throw ContractError("CTC target token " + std::to_string(tok) +
                          " outside [1, " + std::to_string(vocab - 1) + "]");
    }
  }
}

void check_feasible(const CtcTarget& target, std::size_t frames) {
  if (frames < target.min_frames()) {
    throw InfeasibleTargetError("CTC target of length " + std::to_string(target.size()) +
                                " needs at least " + std::to_string(target.min_frames()) +
                                " frames, got " + std::to_string(frames));
  }
}

std::vector<int> extended_labels(const CtcTarget& target) {
  std::vector<int> ext(2 * target.size() + 1, kBlank);
  for (std::size_t u = 0; u < target.size(); ++u) ext[2 * u + 1] = target.tokens[u];
  return ext;
}

// Whether state s may be entered from s-2 (skipping the blank between them).
bool can_skip(const std::vector<int>& ext, std::size_t s) {
  return s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2];
}

}  // namespace

std::size_t CtcTarget::min_frames() const {
  std::size_t repeats = 0;
  for (std::size_t u = 1; u < tokens.size(); ++u) repeats += tokens[u] == tokens[u - 1];
  return tokens.size() + repeats;
}

Var ctc_loss(Var log_probs, const CtcTarget& target) {
  const Tensor& lp = log_probs.value();
  if (lp.rank() != 2) {
    throw DimensionError("ctc_loss: expected log_probs [T x V], got " + shape_string(lp.shape()));
  }
  const std::size_t frames = lp.rows(), vocab = lp.cols();
  check_tokens(target, vocab);
  check_feasible(target, frames);

  const std::vector<int> ext = extended_labels(target);
  const std::size_t states = ext.size();
  std::vector<double> alpha(frames * states, kLogZero);
  auto a = [&](std::size_t t, std::size_t s) -> double& { return alpha[t * states + s]; };

  a(0, 0) = lp.at(0, kBlank);
  if (states > 1) a(0, 1) = lp.at(0, ext[1]);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < states; ++s) {
      double acc = a(t - 1, s);
      if (s >= 1) acc = logsumexp(acc, a(t - 1, s - 1));
      if (can_skip(ext, s)) acc = logsumexp(acc, a(t - 1, s - 2));
      if (acc != kLogZero) a(t, s) = acc + lp.at(t, ext[s]);
    }
  }
  double log_likelihood = a(frames - 1, states - 1);
  if (states > 1) log_likelihood = logsumexp(log_likelihood, a(frames - 1, states - 2));
  if (log_likelihood == kLogZero) {
    throw InfeasibleTargetError("ctc_loss: target has zero probability");
  }

  Tape& tape = *log_probs.tape;
  return tape.record(
      Tensor::scalar(-log_likelihood), {log_probs},
      [log_probs, ext, alpha = std::move(alpha), log_likelihood](Tape& t, const Tensor& g) {
        const Tensor& lp = t.value(log_probs);
        const std::size_t frames = lp.rows(), states = ext.size();
        std::vector<double> beta(frames * states, kLogZero);
        auto b = [&](std::size_t tt, std::size_t s) -> double& { return beta[tt * states + s]; };
        b(frames - 1, states - 1) = lp.at(frames - 1, ext[states - 1]);
        if (states > 1) b(frames - 1, states - 2) = lp.at(frames - 1, ext[states - 2]);
        for (std::size_t tt = frames - 1; tt-- > 0;) {
          for (std::size_t s = 0; s < states; ++s) {
            double acc = b(tt + 1, s);
            if (s + 1 < states) acc = logsumexp(acc, b(tt + 1, s + 1));
            if (s + 2 < states && can_skip(ext, s + 2)) acc = logsumexp(acc, b(tt + 1, s + 2));
            if (acc != kLogZero) b(tt, s) = acc + lp.at(tt, ext[s]);
          }
        }
        // dL/dlp[t,k] = −Σ_{s: ext[s]=k} exp(α_t(s) + β_t(s) − lp[t,k] − log P).
        Tensor& grad = t.grad_buffer(log_probs.id);
        const std::size_t vocab = lp.cols();
        for (std::size_t tt = 0; tt < frames; ++tt) {
          for (std::size_t s = 0; s < states; ++s) {
            const double ab = alpha[tt * states + s] + beta[tt * states + s];
            if (ab == kLogZero) continue;
            const int k = ext[s];
            grad[tt * vocab + k] -= g[0] * std::exp(ab - lp.at(tt, k) - log_likelihood);
          }
        }
      });
}

double ctc_brute_force(const Tensor& log_probs, const CtcTarget& target) {
  if (log_probs.rank() != 2) {
    throw DimensionError("ctc_brute_force: expected log_probs [T x V]");
  }
  const std::size_t frames = log_probs.rows(), vocab = log_probs.cols();
  check_tokens(target, vocab);
  double paths = 1.0;
  for (std::size_t t = 0; t < frames; ++t) paths *= static_cast<double>(vocab);
  if (paths > 1e6) {
    throw ContractError("ctc_brute_force: " + std::to_string(vocab) + "^" +
                        std::to_string(frames) + " paths exceeds the 1e6 guard");
  }

  std::vector<double> matching;
  std::vector<std::size_t> path(frames, 0);
  std::vector<int> collapsed;
  for (;;) {
    collapsed.clear();
    int prev = -1;
    double score = 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
      const int k = static_cast<int>(path[t]);
      score += log_probs.at(t, path[t]);
      if (k != prev && k != kBlank) collapsed.push_back(k);
      prev = k;
    }
    if (collapsed == target.tokens) matching.push_back(score);

    std::size_t pos = 0;
    while (pos < frames && ++path[pos] == vocab) path[pos++] = 0;
    if (pos == frames) break;
  }
  if (matching.empty()) {
    throw InfeasibleTargetError("ctc_brute_force: no alignment collapses to the target");
  }
  return -logsumexp(matching);
}

std::vector<int> ctc_greedy_decode(const Tensor& log_probs) {
  std::vector<int> out;
  if (log_probs.empty()) return out;
  const std::size_t frames = log_probs.rows(), vocab = log_probs.cols();
  int prev = -1;
  for (std::size_t t = 0; t < frames; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < vocab; ++k) {
      if (log_probs.at(t, k) > log_probs.at(t, best)) best = k;
    }
    const int tok = static_cast<int>(best);
    if (tok != prev && tok != kBlank) out.push_back(tok);
    prev = tok;
  }
  return out;
}

Var cross_entropy(Var logits, std::size_t label) {
  const std::size_t classes = logits.value().size();
  if (label >= classes) {
    throw ContractError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                        std::to_string(classes) + ")");
  }
  Var row = reshape(logits, {1, classes});
  return neg(select(log_softmax_rows(row), label));
}

Var context_loss(const ContextEmbedding& e_j, const ContextEmbedding& e_i) {
  return l2_distance(e_j.values, e_i.values);
}

LossBundle total_loss(Var task, std::optional<Var> ctx, double alpha) {
  if (!(alpha >= 0.0)) {
    throw ContractError("context loss weight must be non-negative, got " +
                        std::to_string(alpha));
  }
  LossBundle out{task, ctx, task, alpha};
  if (ctx) out.total = add(task, scale(*ctx, alpha));
  return out;
}

}  // namespace caft
