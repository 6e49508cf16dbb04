#include "caft/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "caft/errors.hpp"
#include "parse.hpp"

namespace caft {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Corpus

std::size_t Corpus::segment_count() const {
  std::size_t n = 0;
  for (const Stream& s : streams) n += s.segments.size();
  return n;
}

std::size_t Corpus::frame_dim() const {
  for (const Stream& s : streams)
    for (const Segment& seg : s.segments) return seg.frames.cols();
  return 0;
}

TaskKind Corpus::task() const {
  for (const Stream& s : streams)
    for (const Segment& seg : s.segments) return seg.task();
  return TaskKind::ctc;
}

const Stream& Corpus::stream(int stream_id) const {
  for (const Stream& s : streams) {
    if (s.stream_id == stream_id) return s;
  }
  throw ContractError("no stream with id " + std::to_string(stream_id));
}

bool equivalent(const Corpus& a, const Corpus& b) {
  if (a.streams.size() != b.streams.size()) return false;
  for (std::size_t s = 0; s < a.streams.size(); ++s) {
    const Stream& sa = a.streams[s];
    const Stream& sb = b.streams[s];
    if (sa.stream_id != sb.stream_id || sa.segments.size() != sb.segments.size()) return false;
    for (std::size_t i = 0; i < sa.segments.size(); ++i) {
      const Segment& x = sa.segments[i];
      const Segment& y = sb.segments[i];
      if (x.stream_id != y.stream_id || x.index != y.index || x.target != y.target) return false;
      if (x.frames.shape() != y.frames.shape()) return false;
      for (std::size_t k = 0; k < x.frames.size(); ++k) {
        if (static_cast<float>(x.frames[k]) != static_cast<float>(y.frames[k])) return false;
      }
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Context windows

void ContextWindowSpec::validate() const {
  if (length < 1) {
    throw InvalidWindowError("context window length must be >= 1, got " +
                             std::to_string(length));
  }
  if (offset > 0 || offset + length - 1 < 0) {
    throw InvalidWindowError("context window (L=" + std::to_string(length) +
                             ", O=" + std::to_string(offset) +
                             ") does not contain the current segment");
  }
}

std::vector<int> select_context_indices(int i, ContextWindowSpec spec, int stream_len) {
  spec.validate();
  if (i < 0 || i >= stream_len) {
    throw ContractError("segment index " + std::to_string(i) + " outside stream of length " +
                        std::to_string(stream_len));
  }
  std::vector<int> out;
  for (int j = i + spec.offset; j <= i + spec.offset + spec.length - 1; ++j) {
    if (j != i && j >= 0 && j < stream_len) out.push_back(j);
  }
  return out;
}

NeighborReader::NeighborReader(const Corpus& corpus, ContextWindowSpec spec)
    : corpus_(&corpus), spec_(spec) {
  spec_.validate();
  for (std::size_t s = 0; s < corpus.streams.size(); ++s) {
    stream_index_.emplace(corpus.streams[s].stream_id, s);
  }
}

std::vector<const Segment*> NeighborReader::neighbors(const Segment& current) {
  auto it = stream_index_.find(current.stream_id);
  if (it == stream_index_.end()) {
    throw ContractError("segment from unknown stream " + std::to_string(current.stream_id));
  }
  const Stream& stream = corpus_->streams[it->second];
  std::vector<const Segment*> out;
  for (int j : select_context_indices(current.index, spec_,
                                      static_cast<int>(stream.segments.size()))) {
    out.push_back(&stream.segments[static_cast<std::size_t>(j)]);
    ++reads_;
  }
  return out;
}

std::vector<Batch> make_batches(const Corpus& corpus, ContextWindowSpec spec,
                                std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw ContractError("batch_size must be positive");
  NeighborReader reader(corpus, spec);
  std::vector<const Segment*> order;
  order.reserve(corpus.segment_count());
  for (const Stream& s : corpus.streams)
    for (const Segment& seg : s.segments) order.push_back(&seg);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    Batch batch;
    for (std::size_t k = start; k < std::min(order.size(), start + batch_size); ++k) {
      batch.push_back({order[k], reader.neighbors(*order[k])});
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Synthetic generation

void SynthConfig::validate() const {
  if (num_streams == 0 || segments_per_stream == 0) {
    throw ConfigError("synth: num_streams and segments_per_stream must be positive");
  }
  if (min_tokens == 0 || min_tokens > max_tokens) {
    throw ConfigError("synth: need 1 <= min_tokens <= max_tokens");
  }
  if (frames_per_token == 0 || frame_dim == 0) {
    throw ConfigError("synth: frames_per_token and frame_dim must be positive");
  }
  if (topic_count != 2) throw ConfigError("synth: topic_count must be 2");
  if (!(p_cue >= 0.0 && p_cue <= 1.0)) throw ConfigError("synth: p_cue must lie in [0, 1]");
  if (!(noise_std >= 0.0)) throw ConfigError("synth: noise_std must be >= 0");
  if (!(ambiguous_prob >= 0.0 && ambiguous_prob <= 1.0)) {
    throw ConfigError("synth: ambiguous_prob must lie in [0, 1]");
  }
  if (!(parity_prob >= 0.0 && parity_prob <= 1.0)) {
    throw ConfigError("synth: parity_prob must lie in [0, 1]");
  }
  if (vocab_size < static_cast<std::size_t>(kFirstFiller) + 2) {
    throw ConfigError("synth: vocabulary too small for layout: vocab_size " +
                      std::to_string(vocab_size) + " leaves fewer than 2 filler tokens (need >= " +
                      std::to_string(kFirstFiller + 2) + ")");
  }
  if (task == TaskKind::classify && parity_prob > 0.0 && p_cue > 0.0 && max_tokens < 2) {
    throw ConfigError("synth: classify segments need max_tokens >= 2 to hold cue and parity");
  }
}

std::vector<std::pair<std::string, std::string>> SynthConfig::entries() const {
  return {
      {"num_streams", std::to_string(num_streams)},
      {"segments_per_stream", std::to_string(segments_per_stream)},
      {"min_tokens", std::to_string(min_tokens)},
      {"max_tokens", std::to_string(max_tokens)},
      {"frames_per_token", std::to_string(frames_per_token)},
      {"frame_dim", std::to_string(frame_dim)},
      {"vocab_size", std::to_string(vocab_size)},
      {"topic_count", std::to_string(topic_count)},
      {"p_cue", parse::real_text(p_cue)},
      {"noise_std", parse::real_text(noise_std)},
      {"ambiguous_prob", parse::real_text(ambiguous_prob)},
      {"parity_prob", parse::real_text(parity_prob)},
      {"seed", std::to_string(seed)},
      {"prototype_seed", std::to_string(prototype_seed)},
      {"task", to_string(task)},
  };
}

bool SynthConfig::set(std::string_view key, std::string_view value) {
  if (key == "num_streams") num_streams = parse::size(key, value);
  else if (key == "segments_per_stream") segments_per_stream = parse::size(key, value);
  else if (key == "min_tokens") min_tokens = parse::size(key, value);
  else if (key == "max_tokens") max_tokens = parse::size(key, value);
  else if (key == "frames_per_token") frames_per_token = parse::size(key, value);
  else if (key == "frame_dim") frame_dim = parse::size(key, value);
  else if (key == "vocab_size") vocab_size = parse::size(key, value);
  else if (key == "topic_count") topic_count = parse::size(key, value);
  else if (key == "p_cue") p_cue = parse::real(key, value);
  else if (key == "noise_std") noise_std = parse::real(key, value);
  else if (key == "ambiguous_prob") ambiguous_prob = parse::real(key, value);
  else if (key == "parity_prob") parity_prob = parse::real(key, value);
  else if (key == "seed") seed = parse::u64(key, value);
  else if (key == "prototype_seed") prototype_seed = parse::u64(key, value);
  else if (key == "task") task = parse_task(value);
  else return false;
  return true;
}

Tensor round_to_f32(Tensor t) {
  for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
  return t;
}

namespace {

std::seed_seq make_seed(std::uint64_t seed, std::uint64_t stream, std::uint32_t tag) {
  return std::seed_seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(stream),
                       static_cast<std::uint32_t>(stream >> 32), tag};
}

constexpr std::uint32_t kPrototypeTag = 0x70726f74;
constexpr std::uint32_t kStreamTag = 0x7374726d;

Tensor draw_prototype(std::mt19937_64& rng, std::size_t dim, const std::vector<Tensor>& taken) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Tensor p({dim});
    for (double& v : p.values()) v = normal(rng);
    p = round_to_f32(std::move(p));
    bool distinct = true;
    for (const Tensor& q : taken) {
      double ss = 0.0;
      for (std::size_t k = 0; k < dim; ++k) ss += (p[k] - q[k]) * (p[k] - q[k]);
      if (std::sqrt(ss) < 1.0) distinct = false;
    }
    if (distinct) return p;
  }
  throw ConfigError("synth: cannot draw well-separated prototypes; increase frame_dim");
}

// Acoustic unit ids used while laying out a segment.
enum UnitKind { kUnitAmbiguous, kUnitCue, kUnitFiller, kUnitParity };

struct Unit {
  UnitKind kind;
  int which;  // topic for cues, filler index, parity bit

  bool operator==(const Unit&) const = default;
};

}  // namespace

SynthPrototypes synth_prototypes(const SynthConfig& cfg) {
  cfg.validate();
  auto seq = make_seed(cfg.prototype_seed, 0, kPrototypeTag);
  std::mt19937_64 rng(seq);
  std::vector<Tensor> taken;
  auto next = [&] {
    taken.push_back(draw_prototype(rng, cfg.frame_dim, taken));
    return taken.back();
  };
  SynthPrototypes out;
  out.ambiguous = next();
  out.cue[0] = next();
  out.cue[1] = next();
  for (std::size_t f = 0; f < cfg.filler_count(); ++f) out.fillers.push_back(next());
  out.parity[0] = next();
  out.parity[1] = next();
  return out;
}

Corpus synth_generate(const SynthConfig& cfg) {
  const SynthPrototypes protos = synth_prototypes(cfg);
  const int fillers = static_cast<int>(cfg.filler_count());
  Corpus corpus;
  for (std::size_t s = 0; s < cfg.num_streams; ++s) {
    auto seq = make_seed(cfg.seed, s + 1, kStreamTag);
    std::mt19937_64 rng(seq);
    std::bernoulli_distribution coin(0.5);
    std::bernoulli_distribution cue_draw(cfg.p_cue);
    std::bernoulli_distribution ambiguous_draw(cfg.ambiguous_prob);
    std::bernoulli_distribution parity_draw(cfg.parity_prob);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> length_draw(cfg.min_tokens, cfg.max_tokens);

    Stream stream;
    stream.stream_id = static_cast<int>(s);
    stream.latent_topic = coin(rng) ? 1 : 0;
    const int topic = stream.latent_topic;

    for (std::size_t i = 0; i < cfg.segments_per_stream; ++i) {
      const std::size_t n = length_draw(rng);
      std::vector<std::size_t> slots(n);
      for (std::size_t k = 0; k < n; ++k) slots[k] = k;
      std::shuffle(slots.begin(), slots.end(), rng);
      std::size_t next_slot = 0;

      std::vector<std::optional<Unit>> layout(n);
      if (cue_draw(rng)) layout[slots[next_slot++]] = Unit{kUnitCue, topic};
      int parity_bit = -1;
      if (cfg.task == TaskKind::classify && next_slot < n && parity_draw(rng)) {
        parity_bit = coin(rng) ? 1 : 0;
        layout[slots[next_slot++]] = Unit{kUnitParity, parity_bit};
      }

      std::vector<Unit> units;
      for (std::size_t k = 0; k < n; ++k) {
        if (layout[k]) {
          units.push_back(*layout[k]);
          continue;
        }
        const bool prev_ambiguous = !units.empty() && units.back().kind == kUnitAmbiguous;
        if (cfg.task == TaskKind::ctc && ambiguous_draw(rng) && !prev_ambiguous) {
          units.push_back({kUnitAmbiguous, 0});
          continue;
        }
        // Filler that differs from both neighbors so no two adjacent units
        // share a prototype.
        std::uniform_int_distribution<int> filler_draw(0, fillers - 1);
        Unit u{kUnitFiller, filler_draw(rng)};
        const std::optional<Unit> right = k + 1 < n ? layout[k + 1] : std::nullopt;
        while ((!units.empty() && units.back() == u) || (right && *right == u)) {
          u.which = filler_draw(rng);
        }
        units.push_back(u);
      }

      Segment seg;
      seg.stream_id = stream.stream_id;
      seg.index = static_cast<int>(i);
      seg.frames = Tensor({n * cfg.frames_per_token, cfg.frame_dim});
      CtcTarget tokens;
      for (std::size_t k = 0; k < n; ++k) {
        const Unit& u = units[k];
        const Tensor* proto = nullptr;
        int token = 0;
        switch (u.kind) {
          case kUnitAmbiguous:
            proto = &protos.ambiguous;
            token = topic == 0 ? kAmbiguousA : kAmbiguousB;
            break;
          case kUnitCue:
            proto = &protos.cue[u.which];
            token = u.which == 0 ? kCueTopic0 : kCueTopic1;
            break;
          case kUnitFiller:
            proto = &protos.fillers[static_cast<std::size_t>(u.which)];
            token = kFirstFiller + u.which;
            break;
          case kUnitParity:
            proto = &protos.parity[u.which];
            break;
        }
        if (u.kind != kUnitParity) tokens.tokens.push_back(token);
        for (std::size_t r = 0; r < cfg.frames_per_token; ++r) {
          const std::size_t row = k * cfg.frames_per_token + r;
          for (std::size_t c = 0; c < cfg.frame_dim; ++c) {
            seg.frames.at(row, c) = (*proto)[c] + cfg.noise_std * noise(rng);
          }
        }
      }
      seg.frames = round_to_f32(std::move(seg.frames));
      if (cfg.task == TaskKind::ctc) {
        seg.target = std::move(tokens);
      } else {
        seg.target = ClassLabel{parity_bit < 0 ? kNeutralClass : (topic ^ parity_bit)};
      }
      stream.segments.push_back(std::move(seg));
    }
    corpus.streams.push_back(std::move(stream));
  }
  return corpus;
}

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats st;
  st.streams = corpus.streams.size();
  for (const Stream& s : corpus.streams) {
    for (const Segment& seg : s.segments) {
      ++st.segments;
      st.frames += seg.frame_count();
      if (const auto* t = std::get_if<CtcTarget>(&seg.target)) {
        st.tokens += t->size();
        bool cued = false;
        for (int tok : t->tokens) {
          st.ambiguous_tokens += tok == kAmbiguousA || tok == kAmbiguousB;
          cued = cued || tok == kCueTopic0 || tok == kCueTopic1;
        }
        st.cued_segments += cued;
      } else {
        const auto label = static_cast<std::size_t>(std::get<ClassLabel>(seg.target).value);
        if (st.class_counts.size() <= label) st.class_counts.resize(label + 1, 0);
        ++st.class_counts[label];
      }
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Files

namespace {

constexpr char kSegmentMagic[5] = "CASG";
constexpr const char* kManifestHeader =
    "stream_id\tsegment_index\tframes_path\ttarget_kind\ttarget";

std::string segment_path(int stream_id, int index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "segments/s%05d_%05d.casg", stream_id, index);
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

void save_segment_frames(const Tensor& frames, const fs::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  os.write(kSegmentMagic, 4);
  io::put_u32(os, kSegmentVersion);
  io::put_u32(os, static_cast<std::uint32_t>(frames.rows()));
  io::put_u32(os, static_cast<std::uint32_t>(frames.cols()));
  for (double v : frames.values()) io::put_f32(os, static_cast<float>(v));
  if (!os) throw IoError(path.string() + ": write failed");
}

Tensor load_segment_frames(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFileError(path.string() + ": segment file not found");
  io::Reader in(is, path.string());
  in.expect_magic(kSegmentMagic);
  const std::uint32_t version = in.u32();
  if (version != kSegmentVersion) {
    throw FormatError(path.string() + ": unsupported segment version " + std::to_string(version));
  }
  const std::uint32_t rows = in.u32();
  const std::uint32_t cols = in.u32();
  if (rows == 0 || cols == 0) throw FormatError(path.string() + ": empty segment");
  std::vector<double> values(static_cast<std::size_t>(rows) * cols);
  for (double& v : values) v = static_cast<double>(in.f32());
  if (!in.at_eof()) throw FormatError(path.string() + ": trailing bytes after frames");
  return Tensor({rows, cols}, std::move(values));
}

void save_corpus(const Corpus& corpus, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "segments", ec);
  if (ec) throw IoError(dir.string() + ": cannot create directory: " + ec.message());
  std::ofstream manifest(dir / "manifest.tsv", std::ios::binary | std::ios::trunc);
  if (!manifest) throw IoError((dir / "manifest.tsv").string() + ": cannot open for writing");
  manifest << kManifestHeader << '\n';
  for (const Stream& s : corpus.streams) {
    for (const Segment& seg : s.segments) {
      const std::string rel = segment_path(seg.stream_id, seg.index);
      save_segment_frames(seg.frames, dir / rel);
      manifest << seg.stream_id << '\t' << seg.index << '\t' << rel << '\t';
      if (const auto* t = std::get_if<CtcTarget>(&seg.target)) {
        manifest << "ctc\t";
        for (std::size_t k = 0; k < t->tokens.size(); ++k) {
          if (k) manifest << ' ';
          manifest << t->tokens[k];
        }
      } else {
        manifest << "class\t" << std::get<ClassLabel>(seg.target).value;
      }
      manifest << '\n';
    }
  }
  if (!manifest) throw IoError((dir / "manifest.tsv").string() + ": write failed");
}

Corpus load_corpus(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.tsv";
  std::ifstream manifest(manifest_path, std::ios::binary);
  if (!manifest) throw MissingFileError(manifest_path.string() + ": manifest not found");
  const std::string where = manifest_path.string();

  std::string line;
  if (!std::getline(manifest, line) || line != kManifestHeader) {
    throw ManifestError(where + ": missing or malformed header");
  }
  std::map<int, std::vector<Segment>> by_stream;
  std::optional<TaskKind> kind;
  std::size_t frame_dim = 0;
  std::size_t line_no = 1;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string at = where + ":" + std::to_string(line_no);
    const auto fields = split(line, '\t');
    if (fields.size() != 5) throw ManifestError(at + ": expected 5 tab-separated fields");
    Segment seg;
    try {
      seg.stream_id = parse::integer("stream_id", fields[0]);
      seg.index = parse::integer("segment_index", fields[1]);
      if (fields[3] == "ctc") {
        CtcTarget t;
        std::istringstream toks(fields[4]);
        std::string tok;
        while (toks >> tok) t.tokens.push_back(parse::integer("target", tok));
        seg.target = std::move(t);
      } else if (fields[3] == "class") {
        seg.target = ClassLabel{parse::integer("target", fields[4])};
      } else {
        throw ManifestError(at + ": unknown target_kind '" + fields[3] + "'");
      }
    } catch (const ConfigError& e) {
      throw ManifestError(at + ": " + e.what());
    }
    if (kind && *kind != seg.task()) throw ManifestError(at + ": mixed target kinds");
    kind = seg.task();

    const fs::path frames_path = dir / fields[2];
    if (!fs::exists(frames_path)) {
      throw MissingFileError(at + ": segment file " + frames_path.string() + " not found");
    }
    seg.frames = load_segment_frames(frames_path);
    if (frame_dim == 0) frame_dim = seg.frames.cols();
    if (seg.frames.cols() != frame_dim) {
      throw ManifestError(at + ": frame dim " + std::to_string(seg.frames.cols()) +
                          " differs from " + std::to_string(frame_dim));
    }
    if (const auto* t = std::get_if<CtcTarget>(&seg.target)) {
      for (int tok : t->tokens) {
        if (tok <= 0) throw ManifestError(at + ": CTC tokens must be >= 1 (0 is blank)");
      }
      if (t->min_frames() > seg.frame_count()) {
        throw ManifestError(at + ": target needs " + std::to_string(t->min_frames()) +
                            " frames, segment has " + std::to_string(seg.frame_count()));
      }
    }
    by_stream[seg.stream_id].push_back(std::move(seg));
  }

  Corpus corpus;
  for (auto& [id, segments] : by_stream) {
    std::sort(segments.begin(), segments.end(),
              [](const Segment& a, const Segment& b) { return a.index < b.index; });
    for (std::size_t i = 0; i < segments.size(); ++i) {
      if (segments[i].index != static_cast<int>(i)) {
        throw ManifestError(where + ": stream " + std::to_string(id) +
                            " segment indices are not contiguous from 0");
      }
    }
    corpus.streams.push_back(Stream{id, std::move(segments), -1});
  }
  if (corpus.streams.empty()) throw ManifestError(where + ": corpus is empty");
  return corpus;
}

}  // namespace caft
