#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "caft/errors.hpp"
#include "caft/model.hpp"

namespace caft {

namespace {

constexpr char kMagic[5] = "CAFT";

std::string config_text(const Checkpoint& ckpt) {
  std::string text;
  for (const auto& [key, value] : ckpt.model.config().entries()) {
    text += "model." + key + "=" + value + "\n";
  }
  for (const auto& [key, value] : ckpt.metadata) text += key + "=" + value + "\n";
  return text;
}

}  // namespace

std::optional<std::string> Checkpoint::find(std::string_view key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) return v;
  }
  return std::nullopt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path.string() + ": cannot open for writing");
  os.write(kMagic, 4);
  io::put_u32(os, kCheckpointVersion);
  io::put_string(os, config_text(ckpt));
  for (const Parameter& p : ckpt.model.parameters()) {
    io::put_string(os, p.name);
    io::put_u32(os, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) io::put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : p.value.values()) io::put_f64(os, v);
  }
  if (!os) throw IoError(path.string() + ": write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFileError(path.string() + ": cannot open checkpoint");
  io::Reader in(is, path.string());
  in.expect_magic(kMagic);
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " +
                      std::to_string(version));
  }

  ModelConfig cfg;
  std::vector<std::pair<std::string, std::string>> metadata;
  std::istringstream text(in.string());
  std::string line;
  while (std::getline(text, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(path.string() + ": malformed config line '" + line + "'");
    }
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    if (key.rfind("model.", 0) == 0) {
      try {
        if (!cfg.set(std::string_view(key).substr(6), value)) {
          throw FormatError(path.string() + ": unknown model key '" + key + "'");
        }
      } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": " + e.what());
      }
    } else {
      metadata.emplace_back(std::move(key), std::move(value));
    }
  }

  std::vector<Parameter> params;
  while (!in.at_eof()) {
    Parameter p;
    p.name = in.string();
    const std::uint32_t rank = in.u32();
    if (rank == 0 || rank > 3) {
      throw FormatError(path.string() + ": parameter '" + p.name + "' has rank " +
                        std::to_string(rank));
    }
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = in.u32();
      if (d == 0) throw FormatError(path.string() + ": zero dimension in '" + p.name + "'");
      count *= d;
    }
    std::vector<double> values(count);
    for (double& v : values) v = in.f64();
    p.value = Tensor(std::move(shape), std::move(values));
    params.push_back(std::move(p));
  }

  try {
    return Checkpoint{Model(cfg, std::move(params)), std::move(metadata)};
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace caft
