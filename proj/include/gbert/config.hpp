#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "gbert/error.hpp"

namespace gbert {

enum class Precision { kFp64, kFp32 };

/// One run, one config: a flat key-value bundle covering paths, model shape,
/// training, seed, precision, and ablation flags. Every command persists the
/// resolved config beside its outputs.
struct RunConfig {
  std::string dx_tree;
  std::string rx_tree;
  std::string records;
  std::string split;
  std::string checkpoint;
  std::string out_dir;

  std::size_t d0 = 75;
  std::size_t gat_heads = 4;
  std::size_t hidden = 300;
  std::size_t ffn = 300;
  std::size_t layers = 2;
  std::size_t enc_heads = 4;

  double lr = 5e-4;
  double mask_rate = 0.15;
  double threshold = 0.3;
  std::size_t pretrain_epochs = 5;
  std::size_t finetune_epochs = 5;
  std::size_t cycles = 15;
  std::size_t batch = 64;

  std::uint64_t seed = 1;
  Precision precision = Precision::kFp64;
  bool no_graph = false;
  bool no_pretrain = false;
  bool freeze_encoder = false;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) {
    return "";
  }
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

inline std::size_t parse_size(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size() || v < 0) {
      throw std::invalid_argument(value);
    }
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': expected a non-negative integer, got '" +
                          value + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) {
      throw std::invalid_argument(value);
    }
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': expected a number, got '" + value + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") {
    return true;
  }
  if (value == "false" || value == "0") {
    return false;
  }
  throw ValidationError("config key '" + key + "': expected true/false, got '" + value + "'");
}

inline std::string render_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace detail

inline Precision parse_precision(const std::string& value) {
  if (value == "fp64") {
    return Precision::kFp64;
  }
  if (value == "fp32") {
    return Precision::kFp32;
  }
  throw ValidationError("precision must be fp64 or fp32, got '" + value + "'");
}

inline std::string precision_name(Precision p) {
  return p == Precision::kFp64 ? "fp64" : "fp32";
}

/// Sets one key from its textual value; shared by the file parser and the
/// command-line override path so both accept exactly the same keys.
inline void apply_key(RunConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_size;
  if (key == "dx_tree") {
    c.dx_tree = value;
  } else if (key == "rx_tree") {
    c.rx_tree = value;
  } else if (key == "records") {
    c.records = value;
  } else if (key == "split") {
    c.split = value;
  } else if (key == "checkpoint") {
    c.checkpoint = value;
  } else if (key == "out_dir") {
    c.out_dir = value;
  } else if (key == "d0") {
    c.d0 = parse_size(key, value);
  } else if (key == "gat_heads") {
    c.gat_heads = parse_size(key, value);
  } else if (key == "hidden") {
    c.hidden = parse_size(key, value);
  } else if (key == "ffn") {
    c.ffn = parse_size(key, value);
  } else if (key == "layers") {
    c.layers = parse_size(key, value);
  } else if (key == "enc_heads") {
    c.enc_heads = parse_size(key, value);
  } else if (key == "lr") {
    c.lr = parse_double(key, value);
  } else if (key == "mask_rate") {
    c.mask_rate = parse_double(key, value);
  } else if (key == "threshold") {
    c.threshold = parse_double(key, value);
  } else if (key == "pretrain_epochs") {
    c.pretrain_epochs = parse_size(key, value);
  } else if (key == "finetune_epochs") {
    c.finetune_epochs = parse_size(key, value);
  } else if (key == "cycles") {
    c.cycles = parse_size(key, value);
  } else if (key == "batch") {
    c.batch = parse_size(key, value);
  } else if (key == "seed") {
    c.seed = static_cast<std::uint64_t>(parse_size(key, value));
  } else if (key == "precision") {
    c.precision = parse_precision(value);
  } else if (key == "no_graph") {
    c.no_graph = parse_bool(key, value);
  } else if (key == "no_pretrain") {
    c.no_pretrain = parse_bool(key, value);
  } else if (key == "freeze_encoder") {
    c.freeze_encoder = parse_bool(key, value);
  } else {
    throw ValidationError("unknown config key '" + key + "'");
  }
}

/// Reads `key = value` lines into an existing config. Blank lines and lines
/// starting with '#' are skipped.
inline void apply_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("cannot open config file: " + path);
  }
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = detail::trim(line);
    if (stripped.empty() || stripped[0] == '#') {
      continue;
    }
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    apply_key(c, detail::trim(stripped.substr(0, eq)), detail::trim(stripped.substr(eq + 1)));
  }
}

/// Stable-order textual form; the same text is what gets persisted and
/// fingerprinted, so byte-identical configs hash identically.
inline std::string render_config(const RunConfig& c) {
  std::ostringstream out;
  out << "dx_tree = " << c.dx_tree << '\n';
  out << "rx_tree = " << c.rx_tree << '\n';
  out << "records = " << c.records << '\n';
  out << "split = " << c.split << '\n';
  out << "checkpoint = " << c.checkpoint << '\n';
  out << "out_dir = " << c.out_dir << '\n';
  out << "d0 = " << c.d0 << '\n';
  out << "gat_heads = " << c.gat_heads << '\n';
  out << "hidden = " << c.hidden << '\n';
  out << "ffn = " << c.ffn << '\n';
  out << "layers = " << c.layers << '\n';
  out << "enc_heads = " << c.enc_heads << '\n';
  out << "lr = " << detail::render_double(c.lr) << '\n';
  out << "mask_rate = " << detail::render_double(c.mask_rate) << '\n';
  out << "threshold = " << detail::render_double(c.threshold) << '\n';
  out << "pretrain_epochs = " << c.pretrain_epochs << '\n';
  out << "finetune_epochs = " << c.finetune_epochs << '\n';
  out << "cycles = " << c.cycles << '\n';
  out << "batch = " << c.batch << '\n';
  out << "seed = " << c.seed << '\n';
  out << "precision = " << precision_name(c.precision) << '\n';
  out << "no_graph = " << (c.no_graph ? "true" : "false") << '\n';
  out << "no_pretrain = " << (c.no_pretrain ? "true" : "false") << '\n';
  out << "freeze_encoder = " << (c.freeze_encoder ? "true" : "false") << '\n';
  return out.str();
}

inline void save_config(const std::string& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write config file: " + path);
  }
  out << render_config(c);
  if (!out) {
    throw std::runtime_error("failed writing config file: " + path);
  }
}

inline RunConfig load_config(const std::string& path) {
  RunConfig c;
  apply_config_file(c, path);
  return c;
}

/// FNV-1a over the rendered config, as a 16-digit hex tag for reports.
inline std::string config_fingerprint(const RunConfig& c) {
  const std::string text = render_config(c);
  std::uint64_t h = 14695981039346656037ull;
  for (const char ch : text) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(ch));
    h *= 1099511628211ull;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

/// Structural checks shared by all commands; model modules re-check their own
/// invariants, this catches bad values before any work starts.
inline void validate_run_config(const RunConfig& c) {
  if (c.hidden == 0 || c.gat_heads == 0 || c.enc_heads == 0 || c.layers == 0 || c.d0 == 0) {
    throw ValidationError("model dimensions must be positive");
  }
  if (c.hidden % c.gat_heads != 0) {
    throw ValidationError("hidden must be divisible by gat_heads");
  }
  if (c.hidden % c.enc_heads != 0) {
    throw ValidationError("hidden must be divisible by enc_heads");
  }
  if (c.lr <= 0.0) {
    throw ValidationError("lr must be positive");
  }
  if (c.mask_rate < 0.0 || c.mask_rate >= 1.0) {
    throw ValidationError("mask_rate outside [0, 1)");
  }
  if (c.threshold < 0.0 || c.threshold > 1.0) {
    throw ValidationError("threshold outside [0, 1]");
  }
  if (c.batch == 0) {
    throw ValidationError("batch must be positive");
  }
  if (c.cycles == 0) {
    throw ValidationError("cycles must be positive");
  }
}

}  // namespace gbert
