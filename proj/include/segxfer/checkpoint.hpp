#pragma once

// CKPT binary format:
//   "CKPT" | version u8 | u32 LE descriptor length | UTF-8 descriptor
//   | u32 LE entry count | per entry: u32 LE name length, name, TNSR tensor
//
// The descriptor is newline-separated key=value text.

#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "segxfer/architectures.hpp"
#include "segxfer/tensor_io.hpp"

namespace segxfer {

inline constexpr std::array<char, 4> kCheckpointMagic{'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 0x01;

namespace detail {

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoi(item));
  }
  return out;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const std::uint32_t len = read_u32(is);
  std::string s(len, '\0');
  if (len && !is.read(s.data(), len)) throw IoError("truncated string");
  return s;
}

}  // namespace detail

/// Parses newline-separated key=value text; blank lines and '#' comments skipped.
inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed key=value line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline std::string to_descriptor(const NetworkSpec& spec) {
  std::ostringstream os;
  os << "arch=" << (spec.arch == Architecture::segnet ? "segnet" : "clsnet") << '\n'
     << "n=" << spec.n << '\n'
     << "N=" << spec.labels << '\n'
     << "levels=" << spec.levels << '\n'
     << "widths=" << detail::join_ints(spec.widths) << '\n'
     << "dense=" << detail::join_ints(spec.dense) << '\n'
     << "in_channels=" << spec.in_channels << '\n'
     << "input=" << spec.height << 'x' << spec.width << '\n'
     << "init=" << spec.init << '\n'
     << "seed=" << spec.seed << '\n';
  for (const auto& [k, v] : spec.extra) os << k << '=' << v << '\n';
  return os.str();
}

inline NetworkSpec from_descriptor(const std::string& text) {
  auto kv = parse_key_values(text);
  auto take = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw IoError("checkpoint descriptor lacks '" + key + "'");
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  NetworkSpec spec;
  try {
    const std::string arch = take("arch");
    if (arch == "segnet") spec.arch = Architecture::segnet;
    else if (arch == "clsnet") spec.arch = Architecture::clsnet;
    else throw IoError("unknown architecture '" + arch + "'");
    spec.n = std::stoi(take("n"));
    spec.labels = std::stoi(take("N"));
    spec.levels = std::stoi(take("levels"));
    spec.widths = detail::split_ints(take("widths"));
    spec.dense = detail::split_ints(take("dense"));
    spec.in_channels = std::stoi(take("in_channels"));
    const std::string input = take("input");
    const auto x = input.find('x');
    if (x == std::string::npos) throw IoError("bad input size '" + input + "'");
    spec.height = std::stoi(input.substr(0, x));
    spec.width = std::stoi(input.substr(x + 1));
    spec.init = take("init");
    spec.seed = std::stoull(take("seed"));
  } catch (const std::logic_error& e) {
    throw IoError(std::string("malformed checkpoint descriptor: ") + e.what());
  }
  spec.extra = std::move(kv);
  return spec;
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write(kCheckpointMagic.data(), 4);
  detail::write_u8(os, kCheckpointVersion);
  detail::write_string(os, to_descriptor(ckpt.spec));
  detail::write_u32(os, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    detail::write_string(os, name);
    write_tensor(os, t);
  }
  if (!os) throw IoError("failed writing checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kCheckpointMagic) throw IoError("bad CKPT magic");
  if (detail::read_u8(is) != kCheckpointVersion) throw IoError("unsupported CKPT version");
  Checkpoint ckpt;
  ckpt.spec = from_descriptor(detail::read_string(is));
  const std::uint32_t count = detail::read_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = detail::read_string(is);
    ckpt.params.add(std::move(name), read_tensor<float>(is));
  }
  // Shapes must agree with what the descriptor builds.
  NamedTensors<float> expected = init_parameters(ckpt.spec);
  if (expected.size() != ckpt.params.size()) throw IoError("checkpoint parameter count mismatch");
  for (const auto& [name, t] : expected) {
    if (!ckpt.params.contains(name) || ckpt.params.get(name).shape() != t.shape()) {
      throw IoError("checkpoint parameter '" + name + "' missing or misshapen");
    }
  }
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, ckpt);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_checkpoint(is);
}

}  // namespace segxfer
