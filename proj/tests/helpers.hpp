#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "caft/model.hpp"
#include "caft/tensor.hpp"

namespace caft::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline Parameter random_param(const std::string& name, Shape shape, std::mt19937_64& rng,
                              double lo = -1.0, double hi = 1.0) {
  return Parameter{name, random_tensor(std::move(shape), rng, lo, hi)};
}

inline std::vector<Parameter*> ptrs(std::vector<Parameter>& ps) {
  std::vector<Parameter*> out;
  for (auto& p : ps) out.push_back(&p);
  return out;
}

// Scalar that depends on every entry of x through fixed random weights.
inline Var weighted_sum(Tape& tape, Var x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(x, tape.constant(random_tensor(x.shape(), rng))));
}

inline ModelConfig tiny_config(Mode mode, TaskKind task = TaskKind::ctc) {
  ModelConfig cfg;
  cfg.frame_dim = 3;
  cfg.hidden_dim = 8;
  cfg.encoder_layers = 2;
  cfg.attention_heads = 2;
  cfg.ffn_dim = 8;
  cfg.vocab_size = 4;
  cfg.context_dim = 4;
  cfg.mode = mode;
  cfg.task = task;
  return cfg;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static int counter = 0;
  auto dir = std::filesystem::temp_directory_path() /
             ("caft_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
              std::to_string(counter++));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace caft::testing
