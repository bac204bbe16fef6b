#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <set>
#include <string>

#include "voxmot/common.hpp"
#include "voxmot/curriculum.hpp"
#include "voxmot/model.hpp"

namespace voxmot {

// Flat `key = value` run configuration with CLI overrides. Every key must
// be known; precedence is flags > file > defaults.
class RunConfig {
 public:
  RunConfig() {
    set_default("d_model", "96");
    set_default("heads", "4");
    set_default("layers", "4");
    set_default("ffn_hidden", "384");
    set_default("grid_n", "16");
    set_default("use_positions", "1");
    set_default("mask_history", "0");
    set_default("seed", "0");
    set_default("stage_scale", "100");
    set_default("data_dir", "data");
    set_default("out_dir", "run");
    set_default("ckpt_every", "200");
    set_default("halt_after", "-1");
    set_default("sample_steps", "25");
    set_default("guidance", "3.0");
    set_default("sample_shift", "3.0");
    set_default("cfg_dropout", "0.1");
  }

  void load_file(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const size_t eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + " is not key = value: '" +
                          trimmed + "'");
      set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
  }

  void set(const std::string& key, const std::string& value) {
    if (values_.find(key) == values_.end())
      throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  // "key=value" as passed to --set
  void set_pair(const std::string& pair) {
    const size_t eq = pair.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + pair + "'");
    set(trim(pair.substr(0, eq)), trim(pair.substr(eq + 1)));
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }
  long integer(const std::string& key) const {
    try {
      return std::stol(str(key));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' is not an integer: '" + str(key) + "'");
    }
  }
  double real(const std::string& key) const {
    try {
      return std::stod(str(key));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' is not a number: '" + str(key) + "'");
    }
  }
  bool flag(const std::string& key) const { return integer(key) != 0; }

  ModelConfig model() const {
    ModelConfig cfg;
    cfg.d_model = static_cast<int>(integer("d_model"));
    cfg.n_heads = static_cast<int>(integer("heads"));
    cfg.n_layers = static_cast<int>(integer("layers"));
    cfg.ffn_hidden = static_cast<int>(integer("ffn_hidden"));
    cfg.grid_n = static_cast<int>(integer("grid_n"));
    cfg.use_positions = flag("use_positions");
    cfg.mask_history = flag("mask_history");
    cfg.validate();
    return cfg;
  }

  SamplerConfig sampler() const {
    SamplerConfig s;
    s.steps = static_cast<int>(integer("sample_steps"));
    s.guidance = real("guidance");
    s.shift = real("sample_shift");
    if (s.steps < 1) throw ConfigError("sample_steps must be >= 1");
    return s;
  }

  GuidanceConfig guidance_cfg() const {
    GuidanceConfig g;
    g.dropout_p = real("cfg_dropout");
    g.validate();
    return g;
  }

  void print_effective(std::ostream& os) const {
    for (const auto& [k, v] : values_) os << "config " << k << " = " << v << "\n";
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
  }
  void set_default(const std::string& k, const std::string& v) { values_[k] = v; }

  std::map<std::string, std::string> values_;
};

}  // namespace voxmot
