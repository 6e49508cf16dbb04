#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "caft/errors.hpp"
#include "caft/losses.hpp"
#include "caft/model.hpp"
#include "helpers.hpp"

using namespace caft;
using caft::testing::random_tensor;
using caft::testing::temp_dir;
using caft::testing::tiny_config;
using caft::testing::weighted_sum;

namespace {

Tensor frames(std::size_t T, std::size_t F, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({T, F}, rng);
}

std::vector<Parameter*> encoder_params(Model& m) {
  std::vector<Parameter*> out;
  for (Parameter& p : m.parameters()) {
    if (p.name.rfind("encoder.", 0) == 0) out.push_back(&p);
  }
  return out;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("encode shapes and frame width check") {
  Model m(tiny_config(Mode::baseline), 1);
  Tape tape;
  CHECK(encode(tape, m, frames(1, 3, 1)).shape() == Shape{1, 8});
  CHECK(encode(tape, m, frames(7, 3, 1)).shape() == Shape{7, 8});
  CHECK_THROWS_AS(encode(tape, m, frames(4, 5, 1)), DimensionError);
}

TEST_CASE("encode is permutation-equivariant without positional signal") {
  ModelConfig cfg = tiny_config(Mode::baseline);
  cfg.positional_encoding = false;
  Model m(cfg, 2);
  Tensor x = frames(4, 3, 2);
  for (std::size_t c = 0; c < 3; ++c) x.at(1, c) = x.at(0, c);
  Tape tape;
  const Tensor z = encode(tape, m, x).value();
  for (std::size_t c = 0; c < 8; ++c) CHECK(z.at(0, c) == z.at(1, c));

  cfg.positional_encoding = true;
  Model mp(cfg, 2);
  const Tensor zp = encode(tape, mp, x).value();
  bool differs = false;
  for (std::size_t c = 0; c < 8; ++c) differs = differs || zp.at(0, c) != zp.at(1, c);
  CHECK(differs);
}

TEST_CASE("encode is deterministic") {
  Model m(tiny_config(Mode::baseline), 3);
  const Tensor x = frames(5, 3, 3);
  Tape a, b;
  CHECK(encode(a, m, x).value() == encode(b, m, x).value());
}

TEST_CASE("encoder gradient matches finite differences") {
  Model m(tiny_config(Mode::baseline), 4);
  const Tensor x = frames(4, 3, 4);
  auto f = [&](Tape& t) { return weighted_sum(t, mean_time(encode(t, m, x))); };
  auto p = encoder_params(m);
  CHECK(grad_check(f, p) < 1e-4);
}

TEST_CASE("context pooling of a single frame") {
  Model m(tiny_config(Mode::context_aware), 5);
  Tape tape;
  Var z = encode(tape, m, frames(1, 3, 5));
  const Var reps[] = {z};
  CHECK(context_attention_weights(tape, m, reps).value()[0] == 1.0);
  const ContextEmbedding e = context_embed(tape, m, reps, EmbeddingSource::from_current);
  CHECK(e.values.shape() == Shape{4});
  CHECK(e.source == EmbeddingSource::from_current);
  const Tensor& w = m.param("context.proj.weight").value;
  const Tensor& b = m.param("context.proj.bias").value;
  for (std::size_t d = 0; d < 4; ++d) {
    double expect = 0.0;
    for (std::size_t h = 0; h < 8; ++h) expect += z.value().at(0, h) * w.at(h, d);
    expect += b[d];
    CHECK(e.values.value()[d] == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("context pooling is unchanged by duplicating the input in time") {
  Model m(tiny_config(Mode::context_aware), 6);
  Tape tape;
  Var z = encode(tape, m, frames(5, 3, 6));
  const Var one[] = {z};
  const Var two[] = {z, z};
  const Tensor w1 = context_attention_weights(tape, m, one).value();
  const Tensor w2 = context_attention_weights(tape, m, two).value();
  double total = 0.0;
  for (std::size_t t = 0; t < 5; ++t) {
    CHECK(std::fabs(w2[t] - w1[t] / 2) < 1e-15);
    CHECK(std::fabs(w2[t + 5] - w1[t] / 2) < 1e-15);
    total += w1[t];
  }
  CHECK(std::fabs(total - 1.0) < 1e-12);
  const Tensor e1 = context_embed(tape, m, one, EmbeddingSource::from_neighbors).values.value();
  const Tensor e2 = context_embed(tape, m, two, EmbeddingSource::from_neighbors).values.value();
  for (std::size_t d = 0; d < 4; ++d) CHECK(std::fabs(e1[d] - e2[d]) < 1e-12);
}

TEST_CASE("context pooling gradient matches finite differences") {
  Model m(tiny_config(Mode::injection), 7);
  const Tensor a = frames(3, 3, 71), b = frames(2, 3, 72);
  auto f = [&](Tape& t) {
    const Var reps[] = {encode(t, m, a), encode(t, m, b)};
    return weighted_sum(t, context_embed(t, m, reps, EmbeddingSource::from_neighbors).values);
  };
  auto p = m.parameter_ptrs();
  std::vector<Parameter*> used;
  for (Parameter* q : p) {
    if (q->name.rfind("head.", 0) != 0) used.push_back(q);
  }
  CHECK(grad_check(f, used) < 1e-4);
  Tape tape;
  CHECK_THROWS_AS(context_embed(tape, m, {}, EmbeddingSource::from_neighbors), ContractError);
}

TEST_CASE("baseline forward normalization and zero head") {
  Model m(tiny_config(Mode::baseline), 8);
  Tape tape;
  const Tensor out = forward_baseline(tape, m, frames(6, 3, 8)).value();
  CHECK(out.shape() == Shape{6, 4});
  for (std::size_t t = 0; t < 6; ++t) {
    std::vector<double> row(out.values().begin() + static_cast<long>(t * 4),
                            out.values().begin() + static_cast<long>(t * 4 + 4));
    CHECK(std::fabs(logsumexp(row)) < 1e-10);
  }
  m.param("head.weight").value.fill(0.0);
  m.param("head.bias").value.fill(0.0);
  Tape fresh;
  const Tensor uni = forward_baseline(fresh, m, frames(3, 3, 9)).value();
  for (double v : uni.values()) CHECK(v == doctest::Approx(std::log(0.25)).epsilon(1e-15));
}

TEST_CASE("forward passes reject the wrong mode") {
  Model base(tiny_config(Mode::baseline), 1);
  Model inj(tiny_config(Mode::injection), 1);
  Model ca(tiny_config(Mode::context_aware), 1);
  const Tensor x = frames(3, 3, 1);
  const Tensor* nb[] = {&x};
  Tape tape;
  CHECK_THROWS_AS(forward_baseline(tape, inj, x), ContractError);
  CHECK_THROWS_AS(forward_injection(tape, base, x, nb), ContractError);
  CHECK_THROWS_AS(forward_context_aware(tape, inj, x, {}, Phase::infer), ContractError);
  CHECK_THROWS_AS(forward_injection(tape, inj, x, {}), ContractError);
  CHECK_THROWS_AS(forward_context_aware(tape, ca, x, nb, Phase::infer), ContractError);
}

TEST_CASE("baseline end-to-end gradient with CTC") {
  Model m(tiny_config(Mode::baseline), 10);
  const Tensor x = frames(5, 3, 10);
  auto f = [&](Tape& t) { return ctc_loss(forward_baseline(t, m, x), {{1, 2}}); };
  auto p = m.parameter_ptrs();
  CHECK(grad_check(f, p) < 1e-4);
}

TEST_CASE("injection head input follows frame concatenation") {
  Model m(tiny_config(Mode::injection), 11);
  const Tensor x = frames(4, 3, 11), n1 = frames(3, 3, 12), n2 = frames(2, 3, 13);
  const Tensor* nb[] = {&n1, &n2};
  Tape tape;
  const Tensor hin = injection_head_input(tape, m, x, nb).value();
  CHECK(hin.shape() == Shape{4, 12});
  const Tensor z = encode(tape, m, x).value();
  const Var reps[] = {encode(tape, m, n1), encode(tape, m, n2)};
  const Tensor e = context_embed(tape, m, reps, EmbeddingSource::from_neighbors).values.value();
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t h = 0; h < 8; ++h) CHECK(hin.at(t, h) == z.at(t, h));
    for (std::size_t d = 0; d < 4; ++d) CHECK(hin.at(t, 8 + d) == e[d]);
  }
  // Shifting e by delta moves only the last D columns, identically per frame.
  Var zv = tape.constant(z);
  const Tensor delta(Shape{4}, {0.5, -1.0, 2.0, 0.25});
  Tensor shifted = e;
  for (std::size_t d = 0; d < 4; ++d) shifted[d] += delta[d];
  const Tensor h0 = concat_feature(zv, broadcast_rows(tape.constant(e), 4)).value();
  const Tensor h1 = concat_feature(zv, broadcast_rows(tape.constant(shifted), 4)).value();
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t h = 0; h < 8; ++h) CHECK(h1.at(t, h) == h0.at(t, h));
    for (std::size_t d = 0; d < 4; ++d) CHECK(h1.at(t, 8 + d) - h0.at(t, 8 + d) == doctest::Approx(delta[d]));
  }
}

TEST_CASE("zero context dim is a construction error") {
  ModelConfig cfg = tiny_config(Mode::injection);
  cfg.context_dim = 0;
  CHECK_THROWS_AS(Model(cfg, 1), ConfigError);
  cfg.mode = Mode::baseline;
  CHECK_NOTHROW(Model(cfg, 1));
  cfg.hidden_dim = 9;
  CHECK_THROWS_AS(Model(cfg, 1), ConfigError);
}

TEST_CASE("zeroed context columns reduce injection to the baseline bit-exactly") {
  for (TaskKind task : {TaskKind::ctc, TaskKind::classify}) {
    Model inj(tiny_config(Mode::injection, task), 12);
    Model base(tiny_config(Mode::baseline, task), 12);
    for (const Parameter& p : base.parameters()) {
      if (p.name.rfind("encoder.", 0) == 0) CHECK(p.value == inj.param(p.name).value);
    }
    Tensor& wi = inj.param("head.weight").value;
    Tensor& wb = base.param("head.weight").value;
    for (std::size_t r = 8; r < 12; ++r)
      for (std::size_t c = 0; c < wi.cols(); ++c) wi.at(r, c) = 0.0;
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < wi.cols(); ++c) wb.at(r, c) = wi.at(r, c);
    base.param("head.bias").value = inj.param("head.bias").value;
    const Tensor x = frames(5, 3, 13), n = frames(4, 3, 14);
    const Tensor* nb[] = {&n};
    Tape tape;
    const Tensor with_context = forward_injection(tape, inj, x, nb).value();
    const Tensor without = forward_baseline(tape, base, x).value();
    CHECK(with_context == without);
  }
}

TEST_CASE("context-aware inference is pure") {
  Model m(tiny_config(Mode::context_aware), 15);
  const Tensor x = frames(5, 3, 15);
  Tape a, b;
  const ContextAwareOutput o1 = forward_context_aware(a, m, x, {}, Phase::infer);
  const ContextAwareOutput o2 = forward_context_aware(b, m, x, {}, Phase::infer);
  CHECK(o1.output.value() == o2.output.value());
  CHECK_FALSE(o1.neighbor.has_value());
  CHECK(o1.head_input.shape() == Shape{5, 12});
}

TEST_CASE("training on the current segment as its own neighbor gives zero context loss") {
  Model m(tiny_config(Mode::context_aware), 16);
  const Tensor x = frames(4, 3, 16);
  const Tensor* nb[] = {&x};
  Tape tape;
  const ContextAwareOutput o = forward_context_aware(tape, m, x, nb, Phase::train);
  REQUIRE(o.neighbor.has_value());
  CHECK(o.neighbor->source == EmbeddingSource::from_neighbors);
  CHECK(o.current.source == EmbeddingSource::from_current);
  CHECK(o.neighbor->values.value() == o.current.values.value());
  CHECK(context_loss(*o.neighbor, o.current).item() == 0.0);
}

TEST_CASE("context-aware total loss gradient through both embeddings") {
  for (ContextAwareOptions opt : {ContextAwareOptions{false, false}, ContextAwareOptions{false, true}}) {
    Model m(tiny_config(Mode::context_aware), 17);
    const Tensor x = frames(5, 3, 17), n = frames(4, 3, 18);
    const Tensor* nb[] = {&n};
    auto f = [&](Tape& t) {
      const ContextAwareOutput o = forward_context_aware(t, m, x, nb, Phase::train, opt);
      return total_loss(ctc_loss(o.output, {{1, 3}}), context_loss(*o.neighbor, o.current), 0.7)
          .total;
    };
    auto p = m.parameter_ptrs();
    CHECK(grad_check(f, p) < 1e-4);
  }
}

TEST_CASE("one generator serves both embeddings") {
  const auto layout = parameter_layout(tiny_config(Mode::context_aware));
  int score = 0, proj = 0;
  for (const ParamSpec& s : layout) {
    score += s.name == "context.score.weight";
    proj += s.name == "context.proj.weight";
  }
  CHECK(score == 1);
  CHECK(proj == 1);
}

TEST_CASE("classification head emits class logits") {
  Model m(tiny_config(Mode::context_aware, TaskKind::classify), 19);
  Tape tape;
  const Var out = forward_context_aware(tape, m, frames(4, 3, 19), {}, Phase::infer).output;
  CHECK(out.shape() == Shape{3});
}

TEST_CASE("detached target gradient equals a frozen-target finite difference") {
  Model m(tiny_config(Mode::context_aware), 19);
  const Tensor x = frames(5, 3, 19), n = frames(4, 3, 20);
  const Tensor* nb[] = {&n};
  Tensor frozen;
  {
    Tape t;
    frozen = forward_context_aware(t, m, x, nb, Phase::train).neighbor->values.value();
  }
  // Target held at its current value; only the current-segment path moves.
  auto oracle = [&](Tape& t) {
    const ContextAwareOutput o = forward_context_aware(t, m, x, {}, Phase::train);
    return add(ctc_loss(o.output, {{1, 3}}),
               scale(l2_distance(t.constant(frozen), o.current.values), 0.7));
  };
  auto p = m.parameter_ptrs();
  CHECK(grad_check(oracle, p) < 1e-4);

  Tape detached, reference;
  const ContextAwareOutput o = forward_context_aware(detached, m, x, nb, Phase::train, {true, false});
  detached.backward(
      total_loss(ctc_loss(o.output, {{1, 3}}), context_loss(*o.neighbor, o.current), 0.7).total);
  reference.backward(oracle(reference));
  for (Parameter* q : p) {
    const Tensor a = detached.param_grad(*q), b = reference.param_grad(*q);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
}

TEST_CASE("parameter count delta equals the closed form") {
  ModelConfig a = tiny_config(Mode::context_aware);
  ModelConfig b = tiny_config(Mode::injection, TaskKind::classify);
  ModelConfig c = tiny_config(Mode::context_aware);
  c.hidden_dim = 12;
  c.attention_heads = 3;
  c.attention_dim = 5;
  c.context_dim = 7;
  c.vocab_size = 11;
  for (const ModelConfig& cfg : {a, b, c}) {
    const ParamCount pc = count_params(cfg);
    CHECK(pc.delta == context_overhead_formula(cfg));
    CHECK(pc.total == Model(cfg, 1).parameter_count());
    ModelConfig base = cfg;
    base.mode = Mode::baseline;
    CHECK(pc.baseline_total == Model(base, 1).parameter_count());
    const std::size_t H = cfg.hidden_dim, A = cfg.resolved_attention_dim(), D = cfg.context_dim,
                      V = cfg.output_dim();
    CHECK(pc.delta == (A * H + A) + (H * D + D) + D * V);
  }
  ModelConfig base = a;
  base.mode = Mode::baseline;
  CHECK(count_params(base).delta == 0);
  CHECK(context_overhead_formula(base) == 0);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  Model m(tiny_config(Mode::context_aware), 20);
  const auto dir = temp_dir("ckpt");
  const auto path = dir / "m.caft";
  save_checkpoint({m, {{"window.length", "3"}, {"note", "x=y"}}}, path);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.model.config() == m.config());
  REQUIRE(back.model.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(back.model.parameters()[i].name == m.parameters()[i].name);
    CHECK(back.model.parameters()[i].value == m.parameters()[i].value);
  }
  CHECK(back.find("window.length") == std::optional<std::string>("3"));
  CHECK(back.find("note") == std::optional<std::string>("x=y"));
  CHECK_FALSE(back.find("absent").has_value());

  save_checkpoint(back, dir / "again.caft");
  std::ifstream f1(path, std::ios::binary), f2(dir / "again.caft", std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(f1), {}) ==
        std::string(std::istreambuf_iterator<char>(f2), {}));
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint errors are distinct") {
  Model m(tiny_config(Mode::baseline), 21);
  const auto dir = temp_dir("ckpt_err");
  save_checkpoint({m, {}}, dir / "ok.caft");
  std::ifstream in(dir / "ok.caft", std::ios::binary);
  std::string bytes(std::istreambuf_iterator<char>(in), {});

  CHECK_THROWS_AS(load_checkpoint(dir / "missing.caft"), MissingFileError);

  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream(dir / "magic.caft", std::ios::binary) << bad;
  try {
    load_checkpoint(dir / "magic.caft");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("magic.caft") != std::string::npos);
  }

  std::ofstream(dir / "short.caft", std::ios::binary) << bytes.substr(0, bytes.size() - 5);
  CHECK_THROWS_AS(load_checkpoint(dir / "short.caft"), TruncatedFileError);

  std::string version = bytes;
  version[4] = 9;
  std::ofstream(dir / "version.caft", std::ios::binary) << version;
  CHECK_THROWS_AS(load_checkpoint(dir / "version.caft"), FormatError);
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
