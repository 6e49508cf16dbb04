#include <cmath>
#include <cstdio>
#include <optional>
#include <regex>
#include <set>
#include <string>

#include "caft/errors.hpp"
#include "caft/trainer.hpp"
#include "parallel.hpp"
#include "parse.hpp"

namespace caft {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Trims accumulated floating error from geometric steps (1e-5 * 10^n).
double tidy(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return std::strtod(buf, nullptr);
}

std::vector<double> parse_numbers(const std::string& key, const std::string& text) {
  static const std::regex range(R"(^([^.][^:]*?)\.\.([^:]+):x([^:]+)$)");
  std::smatch m;
  std::vector<double> out;
  if (std::regex_match(text, m, range)) {
    const double lo = parse::real(key, trim(m[1].str()));
    const double hi = parse::real(key, trim(m[2].str()));
    const double factor = parse::real(key, trim(m[3].str()));
    if (!(lo > 0.0) || !(hi >= lo) || !(factor > 1.0)) {
      throw ConfigError("grid range for " + key + " needs 0 < lo <= hi and factor > 1: '" +
                        text + "'");
    }
    for (int n = 0;; ++n) {
      const double v = tidy(lo * std::pow(factor, n));
      if (v > hi * (1.0 + 1e-9)) break;
      out.push_back(v);
      if (n > 10000) throw ConfigError("grid range for " + key + " is too long");
    }
    return out;
  }
  for (const std::string& item : split(text, ',')) {
    if (item.empty()) throw ConfigError("empty value in grid list for " + key);
    out.push_back(parse::real(key, item));
  }
  return out;
}

template <class T>
std::vector<T> dedupe(std::vector<T> values, const std::string& key,
                      const std::function<void(const std::string&)>& warn) {
  std::vector<T> out;
  for (const T& v : values) {
    bool seen = false;
    for (const T& u : out) seen = seen || u == v;
    if (seen) {
      if (warn) warn("duplicate " + key + " value dropped from grid");
      continue;
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace

SweepGrid parse_grid(std::string_view spec, const std::function<void(const std::string&)>& warn) {
  SweepGrid grid;
  if (trim(spec).empty()) throw ConfigError("sweep grid is empty");
  std::set<std::string> keys;
  for (const std::string& item : split(spec, ';')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("grid item without '=': '" + item + "'");
    std::string key = trim(std::string_view(item).substr(0, eq));
    const std::string value = trim(std::string_view(item).substr(eq + 1));
    if (key == "context_dim") key = "D";
    if (value.empty()) throw ConfigError("grid item has no values: '" + item + "'");
    if (!keys.insert(key).second) throw ConfigError("grid key given twice: " + key);

    if (key == "alpha") {
      for (double a : parse_numbers(key, value)) {
        if (!(a >= 0.0)) throw ConfigError("grid alpha must be >= 0");
        grid.alphas.push_back(a);
      }
      grid.alphas = dedupe(grid.alphas, key, warn);
    } else if (key == "D") {
      for (double d : parse_numbers(key, value)) {
        if (!(d >= 1.0) || d != std::floor(d)) {
          throw ConfigError("grid D values must be positive integers");
        }
        grid.context_dims.push_back(static_cast<std::size_t>(d));
      }
      grid.context_dims = dedupe(grid.context_dims, key, warn);
    } else if (key == "window") {
      static const std::regex pair(R"(\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\))");
      std::string rest = value;
      std::smatch m;
      while (std::regex_search(rest, m, pair)) {
        if (!trim(m.prefix().str()).empty() && trim(m.prefix().str()) != ",") {
          throw ConfigError("malformed window list: '" + value + "'");
        }
        ContextWindowSpec w{parse::integer("window", m[1].str()),
                            parse::integer("window", m[2].str())};
        try {
          w.validate();
        } catch (const Error& e) {
          throw ConfigError(std::string("grid window: ") + e.what());
        }
        grid.windows.push_back(w);
        rest = m.suffix().str();
      }
      if (!trim(rest).empty() || grid.windows.empty()) {
        throw ConfigError("malformed window list: '" + value + "'");
      }
      grid.windows = dedupe(grid.windows, key, warn);
    } else {
      throw ConfigError("unknown grid key: " + key);
    }
  }
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  return grid;
}

std::vector<SweepPoint> expand_grid(const SweepGrid& grid, const TrainConfig& base) {
  const std::vector<double> alphas =
      grid.alphas.empty() ? std::vector<double>{base.resolved_alpha()} : grid.alphas;
  const std::vector<std::size_t> dims =
      grid.context_dims.empty() ? std::vector<std::size_t>{base.model.context_dim}
                                : grid.context_dims;
  const std::vector<ContextWindowSpec> windows =
      grid.windows.empty() ? std::vector<ContextWindowSpec>{base.window} : grid.windows;
  std::vector<SweepPoint> out;
  for (double a : alphas)
    for (std::size_t d : dims)
      for (const ContextWindowSpec& w : windows) out.push_back({a, d, w});
  return out;
}

std::vector<SweepRow> run_sweep(const TrainConfig& base, const SweepGrid& grid,
                                const Corpus& train_set, const Corpus& eval_set,
                                std::size_t jobs) {
  const std::vector<SweepPoint> points = expand_grid(grid, base);
  std::vector<TrainConfig> configs;
  for (const SweepPoint& p : points) {
    TrainConfig c = base;
    c.alpha = p.alpha;
    c.model.context_dim = p.context_dim;
    c.window = p.window;
    c.validate();
    configs.push_back(c);
  }
  const std::size_t seeds = base.seeds.size();
  std::vector<std::optional<SeedRun>> runs(points.size() * seeds);
  parallel_for(runs.size(), jobs, [&](std::size_t k) {
    const std::size_t p = k / seeds;
    runs[k] = train_seed(configs[p], train_set, eval_set, base.seeds[k % seeds]);
  });

  std::vector<SweepRow> rows;
  for (std::size_t p = 0; p < points.size(); ++p) {
    double metric = 0.0, task = 0.0, ctx = 0.0;
    std::string name;
    for (std::size_t s = 0; s < seeds; ++s) {
      const SeedRun& run = *runs[p * seeds + s];
      SweepRow row{p, points[p], std::to_string(run.seed), run.eval.primary_name(),
                   run.eval.primary(), 0.0, 0.0};
      if (!run.history.empty()) {
        row.final_task_loss = run.history.back().mean_task_loss;
        row.final_context_loss = run.history.back().mean_context_loss;
      }
      metric += row.metric;
      task += row.final_task_loss;
      ctx += row.final_context_loss;
      name = row.metric_name;
      rows.push_back(row);
    }
    const double n = static_cast<double>(seeds);
    rows.push_back({p, points[p], "mean", name, metric / n, task / n, ctx / n});
  }
  return rows;
}

}  // namespace caft
