#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "caft/corpus.hpp"
#include "caft/trainer.hpp"

namespace caft {

// Line-based config file:
//
//   # comment
//   [model]
//   hidden_dim = 16
//   [window]
//   length = 2
//   offset = 0
//   [train]
//   alpha = 0.3
//   seeds = 1,2,3
//   [synth]
//   num_streams = 40
//
// Every key belongs to exactly one section. Unknown sections or keys, keys
// outside a section and repeated keys are ConfigErrors naming the line.
struct RunConfig {
  TrainConfig train;  // [model], [window] and [train]
  SynthConfig synth;  // [synth]
  bool has_window_section = false;
  bool has_synth_section = false;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

RunConfig parse_run_config(std::string_view text, const std::string& origin = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

// All sections with every key spelled out; parses back to an equal config.
std::string serialize_run_config(const RunConfig& cfg);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

}  // namespace caft
