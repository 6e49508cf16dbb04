#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "caft/losses.hpp"
#include "caft/model.hpp"
#include "caft/tensor.hpp"

namespace caft {

struct ClassLabel {
  int value = 0;
  friend bool operator==(const ClassLabel&, const ClassLabel&) = default;
};

using Target = std::variant<CtcTarget, ClassLabel>;

struct Segment {
  int stream_id = 0;
  int index = 0;
  Tensor frames;  // [T x F]
  Target target;

  std::size_t frame_count() const { return frames.rows(); }
  TaskKind task() const {
    return std::holds_alternative<CtcTarget>(target) ? TaskKind::ctc : TaskKind::classify;
  }
};

struct Stream {
  int stream_id = 0;
  std::vector<Segment> segments;
  // Generator-side latent; -1 when unknown (e.g. loaded from disk).
  int latent_topic = -1;
};

struct Corpus {
  std::vector<Stream> streams;

  std::size_t segment_count() const;
  std::size_t frame_dim() const;
  TaskKind task() const;
  const Stream& stream(int stream_id) const;
};

// Same streams and segments, frames compared at f32 precision. Latent
// topics are ignored because they are not persisted.
bool equivalent(const Corpus& a, const Corpus& b);

// ---------------------------------------------------------------------------
// Context windows

// L consecutive segment slots starting at offset O from the current index.
// The window must contain the current segment: O <= 0 <= O + L - 1.
struct ContextWindowSpec {
  int length = 2;
  int offset = 0;

  void validate() const;
  bool includes_future() const { return length + offset > 1; }
  friend bool operator==(const ContextWindowSpec&, const ContextWindowSpec&) = default;
};

// Window [i+O, i+O+L-1] minus {i}, clipped to the stream, ascending.
std::vector<int> select_context_indices(int i, ContextWindowSpec spec, int stream_len);

// Hands out neighbor segments and counts every read, so evaluation can prove
// that context-aware inference never touched them.
class NeighborReader {
 public:
  NeighborReader(const Corpus& corpus, ContextWindowSpec spec);

  std::vector<const Segment*> neighbors(const Segment& current);
  std::size_t reads() const { return reads_; }

 private:
  const Corpus* corpus_;
  ContextWindowSpec spec_;
  std::unordered_map<int, std::size_t> stream_index_;
  std::size_t reads_ = 0;
};

struct Example {
  const Segment* current = nullptr;
  std::vector<const Segment*> neighbors;
};

using Batch = std::vector<Example>;

// One epoch: every segment exactly once in an order shuffled by `seed`,
// grouped into batches of `batch_size` (the last may be short). Neighbor
// lists may be empty at stream boundaries.
std::vector<Batch> make_batches(const Corpus& corpus, ContextWindowSpec spec,
                                std::size_t batch_size, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic corpus
//
// Token layout (CTC): 0 blank, 1 and 2 the ambiguous pair, 3 and 4 the topic
// cues, 5.. fillers. Tokens 1 and 2 share one acoustic prototype; which one
// is correct depends on the stream's latent topic (1 under topic 0, 2 under
// topic 1). Cue 3 appears only in topic-0 streams and cue 4 only in topic-1
// streams, each segment carrying one with probability p_cue.
//
// Classification variant: fillers plus cues, and with probability
// parity_prob a parity token (two dedicated prototypes). Class is
// topic XOR parity when a parity token is present, otherwise class 2.

inline constexpr int kAmbiguousA = 1;
inline constexpr int kAmbiguousB = 2;
inline constexpr int kCueTopic0 = 3;
inline constexpr int kCueTopic1 = 4;
inline constexpr int kFirstFiller = 5;
inline constexpr int kNeutralClass = 2;

struct SynthConfig {
  std::size_t num_streams = 40;
  std::size_t segments_per_stream = 6;
  std::size_t min_tokens = 4;
  std::size_t max_tokens = 6;
  std::size_t frames_per_token = 3;
  std::size_t frame_dim = 8;
  std::size_t vocab_size = 9;
  std::size_t topic_count = 2;
  double p_cue = 0.5;
  double noise_std = 0.1;
  // Per-slot probability of an ambiguous token (CTC task).
  double ambiguous_prob = 0.3;
  // Per-segment probability of a parity token (classify task).
  double parity_prob = 2.0 / 3.0;
  // Sampling seed. Prototypes come from prototype_seed so that splits drawn
  // with different sampling seeds share one set of acoustic units.
  std::uint64_t seed = 1;
  std::uint64_t prototype_seed = 1;
  TaskKind task = TaskKind::ctc;

  std::size_t filler_count() const { return vocab_size - kFirstFiller; }
  void validate() const;
  std::vector<std::pair<std::string, std::string>> entries() const;
  bool set(std::string_view key, std::string_view value);

  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

// Acoustic units and their prototypes. Exposed so tests can build
// Bayes-optimal reference decoders.
struct SynthPrototypes {
  Tensor ambiguous;
  Tensor cue[2];
  std::vector<Tensor> fillers;
  Tensor parity[2];
};

SynthPrototypes synth_prototypes(const SynthConfig& cfg);

Corpus synth_generate(const SynthConfig& cfg);

struct CorpusStats {
  std::size_t streams = 0;
  std::size_t segments = 0;
  std::size_t frames = 0;
  std::size_t tokens = 0;
  std::size_t ambiguous_tokens = 0;
  std::size_t cued_segments = 0;
  std::vector<std::size_t> class_counts;
};

CorpusStats corpus_stats(const Corpus& corpus);

// ---------------------------------------------------------------------------
// On-disk formats
//
// Segment file: "CASG" | u32 version | u32 T | u32 F | f32[T*F] row-major,
// little-endian. Manifest: UTF-8 TSV with header
//   stream_id  segment_index  frames_path  target_kind  target
// where target_kind is "ctc" (space-separated tokens, possibly empty) or
// "class" (one integer). frames_path is relative to the corpus directory.

inline constexpr std::uint32_t kSegmentVersion = 1;

void save_segment_frames(const Tensor& frames, const std::filesystem::path& path);
Tensor load_segment_frames(const std::filesystem::path& path);

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

// Rounds every value to the nearest f32, the precision frames are stored at.
Tensor round_to_f32(Tensor t);

}  // namespace caft
