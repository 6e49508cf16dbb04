#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "caft/cli.hpp"
#include "caft/errors.hpp"
#include "caft/run_config.hpp"
#include "helpers.hpp"

using namespace caft;
using caft::testing::temp_dir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string last_line(const std::string& s) {
  std::string t = s;
  while (!t.empty() && t.back() == '\n') t.pop_back();
  const auto pos = t.rfind('\n');
  return pos == std::string::npos ? t : t.substr(pos + 1);
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) return false;
  }
  std::size_t other_files = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) other_files += e.is_regular_file();
  return files == other_files && files > 0;
}

const char* kSmallConfig = R"(# small run
[model]
hidden_dim = 8
attention_heads = 2

[window]
length = 2
offset = -1

[train]
epochs = 2
batch_size = 4
seeds = 1,2

[synth]
num_streams = 5
segments_per_stream = 4
)";

// Shared fixture: one config and one corpus for the whole suite.
struct Workspace {
  fs::path dir = temp_dir("cli");
  fs::path config = dir / "run.ini";
  fs::path data = dir / "data";

  Workspace() {
    write(config, kSmallConfig);
    const Result r = run({"synth", "--config", config.string(), "--out", data.string()});
    REQUIRE(r.code == cli::kOk);
  }
  ~Workspace() { fs::remove_all(dir); }
};

Workspace& workspace() {
  static Workspace ws;
  return ws;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("three significant digits") {
  CHECK(cli::three_significant(0.028) == "0.0280");
  CHECK(cli::three_significant(0.0587654) == "0.0588");
  CHECK(cli::three_significant(1.0) == "1.00");
  CHECK(cli::three_significant(12.34) == "12.3");
  CHECK(cli::three_significant(123.4) == "123");
  CHECK(cli::three_significant(9.996) == "10.0");
  CHECK(cli::three_significant(0.0) == "0.00");
}

TEST_CASE("config parse, serialize, parse is the identity") {
  const RunConfig a = parse_run_config(kSmallConfig);
  CHECK(a.has_window_section);
  CHECK(a.train.window == ContextWindowSpec{2, -1});
  CHECK(a.train.model.hidden_dim == 8);
  CHECK(a.synth.num_streams == 5);
  const std::string text = serialize_run_config(a);
  const RunConfig b = parse_run_config(text);
  CHECK(a == b);
  CHECK(serialize_run_config(b) == text);

  RunConfig c;
  c.train.alpha = 0.125;
  c.train.detach_target = true;
  c.train.model.mode = Mode::injection;
  c.train.model.task = TaskKind::classify;
  c.synth.task = TaskKind::classify;
  c.synth.noise_std = 1.0 / 3.0;
  c.has_synth_section = true;
  CHECK(parse_run_config(serialize_run_config(c)) == c);
}

TEST_CASE("config errors name the key and line") {
  auto message = [](std::string_view text) -> std::string {
    try {
      parse_run_config(text, "x.ini");
    } catch (const ConfigError& e) {
      return e.what();
    }
    return "";
  };
  const std::string unknown = message("[synth]\nnum_streams = 3\nfoo=1\n");
  CHECK(unknown.find("foo") != std::string::npos);
  CHECK(unknown.find("x.ini:3") != std::string::npos);
  CHECK(message("hidden_dim = 3\n").find("x.ini:1") != std::string::npos);
  CHECK(message("[nope]\n").find("nope") != std::string::npos);
  CHECK(message("[model]\nhidden_dim = 3\nhidden_dim = 4\n").find("x.ini:3") != std::string::npos);
  CHECK(message("[model]\nhidden_dim\n").find("x.ini:2") != std::string::npos);
  CHECK(message("[model]\nhidden_dim = abc\n").find("x.ini:2") != std::string::npos);
  CHECK(message("[model]\nnum_streams = 3\n").find("num_streams") != std::string::npos);
  CHECK_THROWS_AS(load_run_config("/nonexistent/run.ini"), MissingFileError);
}

TEST_CASE("synth writes a corpus and is byte-reproducible") {
  Workspace& ws = workspace();
  CHECK(fs::exists(ws.data / "manifest.tsv"));
  CHECK(fs::exists(ws.data / "config.resolved.ini"));
  const fs::path again = ws.dir / "data_again";
  const Result r = run({"synth", "--config", ws.config.string(), "--out", again.string()});
  CHECK(r.code == cli::kOk);
  CHECK(r.out.find("streams=5") != std::string::npos);
  CHECK(same_tree(ws.data, again));

  // Rerunning from the echoed config reproduces the corpus.
  const fs::path echoed = ws.dir / "data_echo";
  CHECK(run({"synth", "--config", (ws.data / "config.resolved.ini").string(), "--out",
             echoed.string()})
            .code == cli::kOk);
  CHECK(same_tree(ws.data, echoed));
}

TEST_CASE("synth reports config errors with exit 2") {
  Workspace& ws = workspace();
  const fs::path bad = ws.dir / "bad.ini";
  write(bad, "[synth]\nnum_streams = 3\nfoo=1\n");
  const Result r = run({"synth", "--config", bad.string(), "--out", (ws.dir / "x").string()});
  CHECK(r.code == cli::kConfig);
  CHECK(r.err.find("foo") != std::string::npos);
  CHECK(r.err.find(":3") != std::string::npos);
  CHECK(r.out.empty());

  const Result missing =
      run({"synth", "--config", (ws.dir / "none.ini").string(), "--out", (ws.dir / "y").string()});
  CHECK(missing.code == cli::kIo);
}

TEST_CASE("usage errors") {
  CHECK(run({}).code == cli::kUsage);
  CHECK(run({"frobnicate"}).code == cli::kUsage);
  CHECK(run({"train", "--config", "x"}).code == cli::kUsage);
  CHECK(run({"train", "--config", "x", "--data", "d", "--out", "o", "--mode", "fast"}).code ==
        cli::kUsage);
  CHECK(run({"--help"}).code == cli::kOk);
}

TEST_CASE("train, eval and rerun from the echoed config") {
  Workspace& ws = workspace();
  const fs::path out = ws.dir / "train_ca";
  const Result r = run({"train", "--config", ws.config.string(), "--data", ws.data.string(),
                        "--mode", "context_aware", "--out", out.string()});
  REQUIRE(r.code == cli::kOk);
  CHECK(r.out.find("alpha=0.3 (default)") != std::string::npos);
  CHECK(fs::exists(out / "seed_1.caft"));
  CHECK(fs::exists(out / "seed_2.caft"));
  CHECK(fs::exists(out / "metrics.tsv"));

  const auto j = nlohmann::json::parse(slurp(out / "metrics.json"));
  CHECK(j.at("mode") == "context_aware");
  CHECK(j.at("per_seed").size() == 2);
  CHECK(j.at("mean").contains("value"));
  CHECK(j.at("stddev").contains("value"));
  const double mean = j["mean"]["value"].get<double>();
  const double s1 = j["per_seed"][0]["value"].get<double>();
  const double s2 = j["per_seed"][1]["value"].get<double>();
  CHECK(mean == (s1 + s2) / 2);

  const Result e = run({"eval", "--ckpt", (out / "seed_1.caft").string(), "--data",
                        ws.data.string()});
  REQUIRE(e.code == cli::kOk);
  CHECK(e.out.find("neighbor_reads=0") != std::string::npos);
  const std::string line = last_line(e.out);
  CHECK(line.rfind("metric=token_error_rate value=", 0) == 0);
  CHECK(std::stod(line.substr(line.find("value=") + 6)) == s1);
  CHECK(fs::exists(out / "seed_1.caft.eval.json"));

  const fs::path rerun = ws.dir / "train_ca_rerun";
  const Result r2 = run({"train", "--config", (out / "config.resolved.ini").string(), "--data",
                         ws.data.string(), "--mode", "context_aware", "--out", rerun.string()});
  REQUIRE(r2.code == cli::kOk);
  CHECK(r2.out.find("(default)") == std::string::npos);
  for (const char* f : {"seed_1.caft", "seed_2.caft", "metrics.json", "metrics.tsv",
                        "config.resolved.ini"}) {
    CAPTURE(f);
    CHECK(slurp(out / f) == slurp(rerun / f));
  }
}

TEST_CASE("baseline training ignores the window with a notice") {
  Workspace& ws = workspace();
  const Result r = run({"train", "--config", ws.config.string(), "--data", ws.data.string(),
                        "--mode", "baseline", "--out", (ws.dir / "train_base").string()});
  CHECK(r.code == cli::kOk);
  CHECK(r.err.find("[window] is ignored") != std::string::npos);
  CHECK(r.out.find("(default)") == std::string::npos);
}

TEST_CASE("injection eval reads neighbors") {
  Workspace& ws = workspace();
  const fs::path out = ws.dir / "train_inj";
  REQUIRE(run({"train", "--config", ws.config.string(), "--data", ws.data.string(), "--mode",
               "injection", "--out", out.string()})
              .code == cli::kOk);
  const Result e = run({"eval", "--ckpt", (out / "seed_1.caft").string(), "--data",
                        ws.data.string(), "--out", (ws.dir / "inj_eval.json").string()});
  CHECK(e.code == cli::kOk);
  CHECK(e.out.find("neighbor_reads=0") == std::string::npos);
  CHECK(fs::exists(ws.dir / "inj_eval.json"));
}

TEST_CASE("eval on a corpus with another task exits 5") {
  Workspace& ws = workspace();
  const fs::path cls_cfg = ws.dir / "cls.ini";
  write(cls_cfg, "[synth]\ntask = classify\nnum_streams = 2\n");
  const fs::path cls = ws.dir / "cls_data";
  REQUIRE(run({"synth", "--config", cls_cfg.string(), "--out", cls.string()}).code == cli::kOk);
  const fs::path out = ws.dir / "train_base_ckpt";
  REQUIRE(run({"train", "--config", ws.config.string(), "--data", ws.data.string(), "--mode",
               "baseline", "--out", out.string()})
              .code == cli::kOk);
  const Result e = run({"eval", "--ckpt", (out / "seed_1.caft").string(), "--data", cls.string()});
  CHECK(e.code == cli::kMismatch);
  CHECK(e.err.find("mismatch") != std::string::npos);

  const Result missing = run({"eval", "--ckpt", (ws.dir / "none.caft").string(), "--data",
                              ws.data.string()});
  CHECK(missing.code == cli::kIo);
}

TEST_CASE("training divergence exits 4") {
  Workspace& ws = workspace();
  const fs::path cfg = ws.dir / "diverge.ini";
  write(cfg, std::string(kSmallConfig).replace(std::string(kSmallConfig).find("epochs"), 0,
                                               "learning_rate = 1e300\n"));
  const Result r = run({"train", "--config", cfg.string(), "--data", ws.data.string(), "--mode",
                        "baseline", "--out", (ws.dir / "diverged").string()});
  CHECK(r.code == cli::kDivergence);
  CHECK(r.err.find("epoch") != std::string::npos);
}

TEST_CASE("bench writes three rows and rejects mismatched checkpoints") {
  Workspace& ws = workspace();
  for (const char* mode : {"baseline", "injection", "context_aware"}) {
    const fs::path out = ws.dir / (std::string("bench_") + mode);
    REQUIRE(run({"train", "--config", ws.config.string(), "--data", ws.data.string(), "--mode",
                 mode, "--out", out.string()})
                .code == cli::kOk);
  }
  auto ck = [&](const std::string& mode) { return (ws.dir / ("bench_" + mode) / "seed_1.caft").string(); };
  const fs::path tsv = ws.dir / "bench.tsv";
  const Result r = run({"bench", "--ckpt-baseline", ck("baseline"), "--ckpt-injection",
                        ck("injection"), "--ckpt-context", ck("context_aware"), "--data",
                        ws.data.string(), "--out", tsv.string(), "--segments", "8", "--warmup",
                        "2", "--rounds", "3"});
  REQUIRE(r.code == cli::kOk);
  std::ifstream in(tsv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "mode\tseconds_per_segment\tratio_vs_baseline");
  CHECK(lines[1].rfind("baseline\t", 0) == 0);
  CHECK(lines[1].substr(lines[1].rfind('\t') + 1) == "1");
  CHECK(lines[2].rfind("injection\t", 0) == 0);
  CHECK(lines[3].rfind("context_aware\t", 0) == 0);

  const fs::path wide_cfg = ws.dir / "wide.ini";
  write(wide_cfg, "[model]\nhidden_dim = 12\nattention_heads = 2\n[train]\nepochs = 1\nseeds = 1\n");
  const fs::path wide = ws.dir / "bench_wide";
  REQUIRE(run({"train", "--config", wide_cfg.string(), "--data", ws.data.string(), "--mode",
               "context_aware", "--out", wide.string()})
              .code == cli::kOk);
  const Result bad = run({"bench", "--ckpt-baseline", ck("baseline"), "--ckpt-injection",
                          ck("injection"), "--ckpt-context", (wide / "seed_1.caft").string(),
                          "--data", ws.data.string(), "--out", tsv.string()});
  CHECK(bad.code == cli::kMismatch);
}

TEST_CASE("params reports delta and percentage") {
  Workspace& ws = workspace();
  const fs::path big = ws.dir / "big.ini";
  write(big,
        "[model]\nframe_dim = 512\nhidden_dim = 768\nencoder_layers = 12\nattention_heads = 12\n"
        "ffn_dim = 3072\nattention_dim = 32\nvocab_size = 32\ncontext_dim = 32\n");
  const Result r = run({"params", "--config", big.string()});
  REQUIRE(r.code == cli::kOk);
  auto value = [&](const std::string& key) {
    const auto pos = r.out.find(key + "=");
    REQUIRE(pos != std::string::npos);
    const auto end = r.out.find('\n', pos);
    return r.out.substr(pos + key.size() + 1, end - pos - key.size() - 1);
  };
  CHECK(value("delta") == value("formula_delta"));
  const std::size_t H = 768, A = 32, D = 32, V = 32;
  CHECK(value("delta") == std::to_string((A * H + A) + (H * D + D) + D * V));
  const std::string pct = value("delta_percent");
  CHECK(pct.back() == '%');

  const Result base = run({"params", "--config", big.string(), "--mode", "baseline"});
  REQUIRE(base.code == cli::kOk);
  CHECK(base.out.find("\ndelta=0\n") != std::string::npos);

  const fs::path bad = ws.dir / "badparams.ini";
  write(bad, "[model]\nhidden_dim = 7\nattention_heads = 2\n");
  CHECK(run({"params", "--config", bad.string()}).code == cli::kConfig);
}

TEST_CASE("sweep writes per-seed and mean rows") {
  Workspace& ws = workspace();
  const fs::path cfg = ws.dir / "sweep.ini";
  write(cfg, "[model]\nhidden_dim = 8\n[train]\nepochs = 1\nseeds = 1,2\n");
  const fs::path out = ws.dir / "sweep_out";
  const Result r = run({"sweep", "--config", cfg.string(), "--data", ws.data.string(), "--grid",
                        "alpha=0.1,1,1;window=(2,0),(3,-1)", "--out", out.string()});
  REQUIRE(r.code == cli::kOk);
  CHECK(r.err.find("warning") != std::string::npos);
  const std::string tsv = slurp(out / "sweep.tsv");
  CHECK(std::count(tsv.begin(), tsv.end(), '\n') == 1 + 4 * 3);
  CHECK(fs::exists(out / "sweep.jsonl"));
  CHECK(fs::exists(out / "config.resolved.ini"));

  for (const char* grid : {"", "alpha=", "window=(2,1)", "gamma=1"}) {
    CAPTURE(grid);
    CHECK(run({"sweep", "--config", cfg.string(), "--data", ws.data.string(), "--grid", grid,
               "--out", out.string()})
              .code == cli::kConfig);
  }
}

TEST_CASE("the installed binary returns the documented exit codes") {
  Workspace& ws = workspace();
  const std::string bin = CAFT_BINARY;
  auto code = [&](const std::string& args) {
    const int status = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
  };
  CHECK(code("params --config " + ws.config.string()) == cli::kOk);
  CHECK(code("bogus") == cli::kUsage);
  const fs::path bad = ws.dir / "bin_bad.ini";
  write(bad, "[model]\nfoo = 1\n");
  CHECK(code("params --config " + bad.string()) == cli::kConfig);
}

}  // TEST_SUITE
