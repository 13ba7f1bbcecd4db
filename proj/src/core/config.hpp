#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "model.hpp"

namespace mfen {

struct TrainConfig {
  int epochs = 50;
  int batch_size = 16;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 42;
  bool augment = true;
  int eval_every = 1;
  double threshold = 0.5;

  void validate() const {
    require(epochs >= 1, "config: train.epochs must be >= 1");
    require(batch_size >= 1, "config: train.batch_size must be >= 1");
    require(lr > 0.0, "config: train.lr must be > 0");
    require(eval_every >= 1, "config: train.eval_every must be >= 1");
  }
};

struct DataConfig {
  std::string dir = "synth";  // directory path, or "synth" for the generator
  int size = 256;
  int synth_n = 16;
  double train_frac = 0.8;
  double crop_frac = 0.875;
  bool hflip = true;
};

// Union of model / train / data settings, parsed from flat key=value text
// with section prefixes and overridable from the command line.
struct RunConfig {
  std::string arch = "mfennet";
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

namespace cfg {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int r = std::stoi(v, &pos);
    require(pos == v.size(), "");
    return r;
  } catch (...) {
    throw std::runtime_error("config: bad integer for " + key + ": '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    require(pos == v.size(), "");
    return r;
  } catch (...) {
    throw std::runtime_error("config: bad number for " + key + ": '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::runtime_error("config: bad bool for " + key + ": '" + v + "' (use true/false)");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
  require(!out.empty(), "config: empty list for " + key);
  return out;
}

inline std::string join(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace cfg

inline void config_set(RunConfig& c, const std::string& key, const std::string& raw) {
  const std::string v = cfg::trim(raw);
  if (key == "model.arch") {
    require(v == "mfennet" || v == "unet", "config: model.arch must be mfennet or unet");
    c.arch = v;
  } else if (key == "model.stage_widths") {
    c.model.stage_widths = cfg::parse_int_list(key, v);
  } else if (key == "model.blocks_per_stage") {
    c.model.blocks_per_stage = cfg::parse_int_list(key, v);
  } else if (key == "model.mixer_kernel") {
    c.model.mixer_kernel = cfg::parse_int(key, v);
  } else if (key == "model.ffn_ratio") {
    c.model.ffn_ratio = cfg::parse_int(key, v);
  } else if (key == "model.spp_bins") {
    c.model.spp_bins = cfg::parse_int_list(key, v);
  } else if (key == "model.in_channels") {
    c.model.in_channels = cfg::parse_int(key, v);
  } else if (key == "model.out_channels") {
    c.model.out_channels = cfg::parse_int(key, v);
  } else if (key == "model.norm_eps") {
    c.model.norm_eps = cfg::parse_double(key, v);
  } else if (key == "model.mixer_subtract_input") {
    c.model.mixer_subtract_input = cfg::parse_bool(key, v);
  } else if (key == "train.epochs") {
    c.train.epochs = cfg::parse_int(key, v);
  } else if (key == "train.batch_size") {
    c.train.batch_size = cfg::parse_int(key, v);
  } else if (key == "train.lr") {
    c.train.lr = cfg::parse_double(key, v);
  } else if (key == "train.beta1") {
    c.train.beta1 = cfg::parse_double(key, v);
  } else if (key == "train.beta2") {
    c.train.beta2 = cfg::parse_double(key, v);
  } else if (key == "train.adam_eps") {
    c.train.adam_eps = cfg::parse_double(key, v);
  } else if (key == "train.seed") {
    c.train.seed = static_cast<std::uint64_t>(std::stoull(v));
  } else if (key == "train.augment") {
    c.train.augment = cfg::parse_bool(key, v);
  } else if (key == "train.eval_every") {
    c.train.eval_every = cfg::parse_int(key, v);
  } else if (key == "train.threshold") {
    c.train.threshold = cfg::parse_double(key, v);
  } else if (key == "data.dir") {
    c.data.dir = v;
  } else if (key == "data.size") {
    c.data.size = cfg::parse_int(key, v);
  } else if (key == "data.synth_n") {
    c.data.synth_n = cfg::parse_int(key, v);
  } else if (key == "data.train_frac") {
    c.data.train_frac = cfg::parse_double(key, v);
  } else if (key == "data.crop_frac") {
    c.data.crop_frac = cfg::parse_double(key, v);
  } else if (key == "data.hflip") {
    c.data.hflip = cfg::parse_bool(key, v);
  } else {
    throw std::runtime_error("config: unknown key '" + key + "'");
  }
}

// Canonical (key, value) listing; serialization and the effective-config echo
// both use this fixed order.
inline std::vector<std::pair<std::string, std::string>> config_items(const RunConfig& c) {
  return {
      {"model.arch", c.arch},
      {"model.stage_widths", cfg::join(c.model.stage_widths)},
      {"model.blocks_per_stage", cfg::join(c.model.blocks_per_stage)},
      {"model.mixer_kernel", std::to_string(c.model.mixer_kernel)},
      {"model.ffn_ratio", std::to_string(c.model.ffn_ratio)},
      {"model.spp_bins", cfg::join(c.model.spp_bins)},
      {"model.in_channels", std::to_string(c.model.in_channels)},
      {"model.out_channels", std::to_string(c.model.out_channels)},
      {"model.norm_eps", cfg::fmt(c.model.norm_eps)},
      {"model.mixer_subtract_input", c.model.mixer_subtract_input ? "true" : "false"},
      {"train.epochs", std::to_string(c.train.epochs)},
      {"train.batch_size", std::to_string(c.train.batch_size)},
      {"train.lr", cfg::fmt(c.train.lr)},
      {"train.beta1", cfg::fmt(c.train.beta1)},
      {"train.beta2", cfg::fmt(c.train.beta2)},
      {"train.adam_eps", cfg::fmt(c.train.adam_eps)},
      {"train.seed", std::to_string(c.train.seed)},
      {"train.augment", c.train.augment ? "true" : "false"},
      {"train.eval_every", std::to_string(c.train.eval_every)},
      {"train.threshold", cfg::fmt(c.train.threshold)},
      {"data.dir", c.data.dir},
      {"data.size", std::to_string(c.data.size)},
      {"data.synth_n", std::to_string(c.data.synth_n)},
      {"data.train_frac", cfg::fmt(c.data.train_frac)},
      {"data.crop_frac", cfg::fmt(c.data.crop_frac)},
      {"data.hflip", c.data.hflip ? "true" : "false"},
  };
}

inline std::string config_get(const RunConfig& c, const std::string& key) {
  for (const auto& [k, v] : config_items(c))
    if (k == key) return v;
  throw std::runtime_error("config: unknown key '" + key + "'");
}

inline std::string config_to_text(const RunConfig& c) {
  std::ostringstream os;
  for (const auto& [k, v] : config_items(c)) os << k << " = " << v << "\n";
  return os.str();
}

inline void config_parse_text(RunConfig& c, const std::string& text,
                              const std::string& origin = "<string>") {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = cfg::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    require(eq != std::string::npos,
            "config: missing '=' at " + origin + ":" + std::to_string(lineno));
    config_set(c, cfg::trim(t.substr(0, eq)), cfg::trim(t.substr(eq + 1)));
  }
}

inline void config_load_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot read config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  config_parse_text(c, ss.str(), path);
}

inline void config_save_file(const RunConfig& c, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write config file: " + path);
  out << config_to_text(c);
  require(out.good(), "cannot write config file: " + path);
}

// Model-identifying subset embedded in checkpoints.
inline std::string model_config_text(const std::string& arch, const ModelConfig& m) {
  RunConfig c;
  c.arch = arch;
  c.model = m;
  std::ostringstream os;
  for (const auto& [k, v] : config_items(c))
    if (k.rfind("model.", 0) == 0) os << k << " = " << v << "\n";
  return os.str();
}

}  // namespace mfen
