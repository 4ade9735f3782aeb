#pragma once

// Flat key/value config documents:
//
//   [section]
//   key = value   # comment
//
// Numbers accept `_` digit separators and decimal unit suffixes K, M, G, T.

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "infinisim/error.hpp"
#include "infinisim/memory_model.hpp"
#include "infinisim/placement_planner.hpp"
#include "infinisim/train_harness.hpp"

namespace infinisim {

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace detail

/// Parses a number with optional `_` separators and a K/M/G/T (powers of 1000) suffix.
inline double parse_config_number(std::string_view text) {
  std::string s;
  for (char c : text) {
    if (c != '_') s.push_back(c);
  }
  if (s.empty()) throw DomainError("empty number");
  double mult = 1.0;
  switch (s.back()) {
    case 'K': mult = 1e3; break;
    case 'M': mult = 1e6; break;
    case 'G': mult = 1e9; break;
    case 'T': mult = 1e12; break;
    default: break;
  }
  if (mult != 1.0) s.pop_back();
  if (s.empty()) throw DomainError("number has only a suffix");
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw DomainError("not a number: '" + std::string(text) + "'");
  }
  return v * mult;
}

class FlatConfig {
 public:
  struct Entry {
    std::string value;
    int line = 0;
  };

  static FlatConfig parse(std::string_view text) {
    FlatConfig cfg;
    std::string section;
    int line_no = 0;
    std::istringstream in{std::string(text)};
    std::string raw;
    while (std::getline(in, raw)) {
      ++line_no;
      if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
      const std::string line = detail::trim(raw);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("unterminated section header", line_no);
        section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
        if (section != "model" && section != "cluster" && section != "run") {
          throw ConfigError("unknown section [" + section + "] (expected model, cluster or run)", line_no);
        }
        cfg.sections_[section];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("expected 'key = value'", line_no);
      if (section.empty()) throw ConfigError("key outside of any [section]", line_no);
      const std::string key = detail::trim(std::string_view(line).substr(0, eq));
      const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
      if (key.empty()) throw ConfigError("empty key", line_no);
      if (value.empty()) throw ConfigError("key '" + key + "' has no value", line_no);
      auto& sec = cfg.sections_[section];
      if (sec.count(key)) throw ConfigError("duplicate key '" + key + "' in [" + section + "]", line_no);
      sec[key] = {value, line_no};
    }
    return cfg;
  }

  static FlatConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    try {
      return parse(ss.str());
    } catch (const ConfigError& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }

  bool has_section(const std::string& section) const { return sections_.count(section) > 0; }

  bool section_empty(const std::string& section) const {
    auto it = sections_.find(section);
    return it == sections_.end() || it->second.empty();
  }

  bool has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key);
  }

  const Entry& entry(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    if (it == sections_.end() || !it->second.count(key)) {
      throw ConfigError("missing key '" + key + "' in [" + section + "]");
    }
    return it->second.at(key);
  }

  std::string get_string(const std::string& section, const std::string& key, const std::string& fallback) const {
    return has(section, key) ? entry(section, key).value : fallback;
  }

  double get_number(const std::string& section, const std::string& key) const {
    const auto& e = entry(section, key);
    try {
      return parse_config_number(e.value);
    } catch (const DomainError& err) {
      throw ConfigError("key '" + key + "': " + err.what(), e.line);
    }
  }

  double get_number(const std::string& section, const std::string& key, double fallback) const {
    return has(section, key) ? get_number(section, key) : fallback;
  }

  std::int64_t get_int(const std::string& section, const std::string& key, std::int64_t fallback) const {
    if (!has(section, key)) return fallback;
    const double v = get_number(section, key);
    if (v != std::floor(v) || std::fabs(v) > 9.0e15) {
      throw ConfigError("key '" + key + "' must be an integer", entry(section, key).line);
    }
    return static_cast<std::int64_t>(v);
  }

  /// Throws on the first key of `section` not accepted by `allowed`.
  template <typename Pred>
  void require_known(const std::string& section, Pred allowed) const {
    auto it = sections_.find(section);
    if (it == sections_.end()) return;
    for (const auto& [k, e] : it->second) {
      if (!allowed(k)) throw ConfigError("unknown key '" + k + "' in [" + section + "]", e.line);
    }
  }

  void require_known(const std::string& section, const std::set<std::string>& allowed) const {
    require_known(section, [&](const std::string& k) { return allowed.count(k) > 0; });
  }

 private:
  std::map<std::string, std::map<std::string, Entry>> sections_;
};

namespace config_keys {

inline const std::set<std::string> kTransformer = {"nl", "hd", "heads", "seq", "bsz", "ci"};
inline const std::set<std::string> kToy = {"layers", "tied", "seed"};
inline const std::set<std::string> kCluster = {"nodes",         "devices_per_node", "device_mem",       "host_mem_per_node",
                                               "nvme_per_node", "pcie_bw",          "host_bw_per_node", "nvme_bw_per_node",
                                               "d2d_bw",        "peak_tp",          "nvme_root"};
inline const std::set<std::string> kRun = {"steps", "lr",     "beta1",         "beta2",       "eps", "micro_batches",
                                           "samples", "ranks", "tier",         "chunk_elems", "seed"};

inline bool model_key(const std::string& k) {
  static const std::regex layer_key(R"(layer[0-9]+\.(in|out|act|tiles))");
  return kTransformer.count(k) || kToy.count(k) || std::regex_match(k, layer_key);
}

}  // namespace config_keys

inline void validate_config_keys(const FlatConfig& cfg) {
  cfg.require_known("model", config_keys::model_key);
  cfg.require_known("cluster", config_keys::kCluster);
  cfg.require_known("run", config_keys::kRun);
}

/// Transformer description from [model]: nl, hd, heads, seq, bsz, ci.
inline ModelConfig model_config_from(const FlatConfig& cfg) {
  validate_config_keys(cfg);
  if (cfg.section_empty("model")) throw ConfigError("[model] section is missing or empty");
  for (const char* k : {"nl", "hd"}) {
    if (!cfg.has("model", k)) throw ConfigError(std::string("[model] requires '") + k + "'");
  }
  ModelConfig m;
  m.nl = cfg.get_int("model", "nl", 1);
  m.hd = cfg.get_int("model", "hd", 1);
  m.attn_heads = cfg.get_int("model", "heads", 16);
  m.seq = cfg.get_int("model", "seq", 1024);
  m.bsz = cfg.get_number("model", "bsz", 1.0);
  m.ci = cfg.get_int("model", "ci", 1);
  try {
    m.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  return m;
}

/// Cluster profile from [cluster]; absent keys keep the single-node defaults.
inline ClusterConfig cluster_config_from(const FlatConfig& cfg) {
  validate_config_keys(cfg);
  ClusterConfig c;
  c.nodes = cfg.get_int("cluster", "nodes", c.nodes);
  c.devices_per_node = cfg.get_int("cluster", "devices_per_node", c.devices_per_node);
  c.device_mem_bytes = cfg.get_number("cluster", "device_mem", c.device_mem_bytes);
  c.host_mem_bytes_per_node = cfg.get_number("cluster", "host_mem_per_node", c.host_mem_bytes_per_node);
  c.nvme_bytes_per_node = cfg.get_number("cluster", "nvme_per_node", c.nvme_bytes_per_node);
  c.pcie_bw_per_device = cfg.get_number("cluster", "pcie_bw", c.pcie_bw_per_device);
  c.host_mem_bw_per_node = cfg.get_number("cluster", "host_bw_per_node", c.host_mem_bw_per_node);
  c.nvme_bw_per_node = cfg.get_number("cluster", "nvme_bw_per_node", c.nvme_bw_per_node);
  c.device_device_bw = cfg.get_number("cluster", "d2d_bw", c.device_device_bw);
  c.peak_tp_per_device = cfg.get_number("cluster", "peak_tp", c.peak_tp_per_device);
  try {
    c.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

/// Toy layered model from [model]: layers, layerN.{in,out,act,tiles}, tied = a:b[, c:d], seed.
inline ModelSpec model_spec_from(const FlatConfig& cfg) {
  validate_config_keys(cfg);
  if (cfg.section_empty("model")) throw ConfigError("[model] section is missing or empty");
  if (!cfg.has("model", "layers")) throw ConfigError("[model] requires 'layers'");
  const auto n = cfg.get_int("model", "layers", 0);
  if (n < 1) throw ConfigError("'layers' must be >= 1", cfg.entry("model", "layers").line);
  ModelSpec spec;
  spec.seed = static_cast<std::uint64_t>(cfg.get_int("model", "seed", 0));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    LayerSpec l;
    if (!cfg.has("model", p + "in") || !cfg.has("model", p + "out")) {
      throw ConfigError("[model] layer " + std::to_string(i) + " needs '" + p + "in' and '" + p + "out'");
    }
    l.in_dim = static_cast<std::size_t>(cfg.get_int("model", p + "in", 0));
    l.out_dim = static_cast<std::size_t>(cfg.get_int("model", p + "out", 0));
    l.tiles = static_cast<std::size_t>(cfg.get_int("model", p + "tiles", 1));
    try {
      l.activation = parse_activation(cfg.get_string("model", p + "act", "identity"));
    } catch (const DomainError& e) {
      throw ConfigError(e.what(), cfg.entry("model", p + "act").line);
    }
    spec.layers.push_back(l);
  }
  if (cfg.has("model", "tied")) {
    const auto& e = cfg.entry("model", "tied");
    std::stringstream ss(e.value);
    std::string pair;
    while (std::getline(ss, pair, ',')) {
      const auto colon = pair.find(':');
      if (colon == std::string::npos) throw ConfigError("tied pairs are written 'a:b'", e.line);
      try {
        const auto a = static_cast<std::size_t>(parse_config_number(detail::trim(pair.substr(0, colon))));
        const auto b = static_cast<std::size_t>(parse_config_number(detail::trim(pair.substr(colon + 1))));
        spec.tied_pairs.emplace_back(a, b);
      } catch (const DomainError& err) {
        throw ConfigError(std::string("tied: ") + err.what(), e.line);
      }
    }
  }
  try {
    spec.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  return spec;
}

}  // namespace infinisim
