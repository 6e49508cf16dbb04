#include "caft/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "caft/errors.hpp"
#include "parse.hpp"

namespace caft {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool set_window(ContextWindowSpec& w, std::string_view key, std::string_view value) {
  if (key == "length") w.length = parse::integer(key, value);
  else if (key == "offset") w.offset = parse::integer(key, value);
  else return false;
  return true;
}

}  // namespace

RunConfig parse_run_config(std::string_view text, const std::string& origin) {
  RunConfig cfg;
  std::string section;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header '" + line + "'");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section != "model" && section != "train" && section != "window" && section != "synth") {
        throw ConfigError(where + "unknown section [" + section + "]");
      }
      if (section == "window") cfg.has_window_section = true;
      if (section == "synth") cfg.has_synth_section = true;
      continue;
    }

    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "missing key before '='");
    if (section.empty()) {
      throw ConfigError(where + "unknown key '" + key + "' (keys must follow a [section] header)");
    }
    if (!seen.insert(section + "." + key).second) {
      throw ConfigError(where + "key '" + key + "' repeated in [" + section + "]");
    }

    bool known = false;
    try {
      if (section == "model") known = cfg.train.model.set(key, value);
      else if (section == "train") known = cfg.train.set(key, value);
      else if (section == "window") known = set_window(cfg.train.window, key, value);
      else known = cfg.synth.set(key, value);
    } catch (const Error& e) {
      throw ConfigError(where + e.what());
    }
    if (!known) throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), path.string());
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream out;
  auto section = [&](const char* name, const auto& entries) {
    out << '[' << name << "]\n";
    for (const auto& [k, v] : entries) out << k << " = " << v << '\n';
  };
  section("model", cfg.train.model.entries());
  out << '\n';
  if (cfg.has_window_section) {
    section("window", std::vector<std::pair<std::string, std::string>>{
                          {"length", std::to_string(cfg.train.window.length)},
                          {"offset", std::to_string(cfg.train.window.offset)}});
    out << '\n';
  }
  section("train", cfg.train.entries());
  if (cfg.has_synth_section) {
    out << '\n';
    section("synth", cfg.synth.entries());
  }
  return out.str();
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << serialize_run_config(cfg);
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace caft
