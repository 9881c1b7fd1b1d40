#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gbert/adam.hpp"
#include "gbert/error.hpp"
#include "gbert/param_store.hpp"

namespace gbert {

/// Versioned binary checkpoint. Layout (all integers and floats little
/// endian, floats stored as 64-bit regardless of the run's scalar type):
///   "GBCK" | u32 version | u8 scalar_width |
///   u32 n_extras | { str key | str value } ... |
///   u64 n_params | { str name | u64 rows | u64 cols | f64 data... } ... |
///   u8 has_optimizer [ | u64 step | { m... | v... } per param ]
/// Strings are u32 length + bytes. Round-trips are bit-exact: f32 -> f64 ->
/// f32 is lossless, and f64 is stored verbatim.
namespace ckpt {

constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::ofstream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) {
    b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  }
  out.write(b, 4);
}

inline void put_u64(std::ofstream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) {
    b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  }
  out.write(b, 8);
}

inline void put_f64(std::ofstream& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void put_str(std::ofstream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t get_u32(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) {
    throw ValidationError("checkpoint stream truncated");
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  }
  return v;
}

inline std::uint64_t get_u64(std::ifstream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) {
    throw ValidationError("checkpoint stream truncated");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  }
  return v;
}

inline double get_f64(std::ifstream& in) { return std::bit_cast<double>(get_u64(in)); }

inline std::string get_str(std::ifstream& in) {
  const std::uint32_t n = get_u32(in);
  if (n > (1u << 20)) {
    throw ValidationError("checkpoint string length " + std::to_string(n) + " is implausible");
  }
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) {
    throw ValidationError("checkpoint stream truncated");
  }
  return s;
}

}  // namespace ckpt

/// Reads only the header metadata of a checkpoint, without touching any
/// parameter data; lets callers validate compatibility before loading.
inline std::map<std::string, std::string> peek_checkpoint_extras(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot open checkpoint '" + path + "'");
  }
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "GBCK") {
    throw ValidationError("'" + path + "' is not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = ckpt::get_u32(in);
  if (version != ckpt::kVersion) {
    throw ValidationError("checkpoint version " + std::to_string(version) + " unsupported");
  }
  in.get();  // scalar width
  std::map<std::string, std::string> extras;
  const std::uint32_t n_extras = ckpt::get_u32(in);
  for (std::uint32_t i = 0; i < n_extras; ++i) {
    const std::string k = ckpt::get_str(in);
    extras[k] = ckpt::get_str(in);
  }
  return extras;
}

template <typename Scalar>
void save_checkpoint(const std::string& path, const ParamStore<Scalar>& store,
                     const Adam<Scalar>* optimizer,
                     const std::map<std::string, std::string>& extras) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw ValidationError("cannot write checkpoint '" + path + "'");
  }
  out.write("GBCK", 4);
  ckpt::put_u32(out, ckpt::kVersion);
  out.put(static_cast<char>(sizeof(Scalar)));
  ckpt::put_u32(out, static_cast<std::uint32_t>(extras.size()));
  for (const auto& [k, v] : extras) {
    ckpt::put_str(out, k);
    ckpt::put_str(out, v);
  }
  ckpt::put_u64(out, store.size());
  for (std::size_t p = 0; p < store.size(); ++p) {
    const auto& e = store.entry(p);
    ckpt::put_str(out, e.name);
    ckpt::put_u64(out, e.value.rows());
    ckpt::put_u64(out, e.value.cols());
    for (const Scalar v : e.value.values) {
      ckpt::put_f64(out, static_cast<double>(v));
    }
  }
  const bool has_opt = optimizer != nullptr && optimizer->initialized();
  out.put(has_opt ? 1 : 0);
  if (has_opt) {
    ckpt::put_u64(out, optimizer->step_count());
    for (std::size_t p = 0; p < store.size(); ++p) {
      for (const Scalar v : optimizer->m()[p]) {
        ckpt::put_f64(out, static_cast<double>(v));
      }
      for (const Scalar v : optimizer->v()[p]) {
        ckpt::put_f64(out, static_cast<double>(v));
      }
    }
  }
  if (!out) {
    throw ValidationError("write failed for checkpoint '" + path + "'");
  }
}

/// Loads parameter values (and optimizer state when present and requested)
/// into an already-registered store; names, order, and shapes must match
/// exactly. Returns the extras map.
template <typename Scalar>
std::map<std::string, std::string> load_checkpoint(const std::string& path,
                                                   ParamStore<Scalar>& store,
                                                   Adam<Scalar>* optimizer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot open checkpoint '" + path + "'");
  }
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "GBCK") {
    throw ValidationError("'" + path + "' is not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = ckpt::get_u32(in);
  if (version != ckpt::kVersion) {
    throw ValidationError("checkpoint version " + std::to_string(version) + " unsupported");
  }
  const int width = in.get();
  if (width != static_cast<int>(sizeof(Scalar))) {
    throw ValidationError("checkpoint was written at scalar width " + std::to_string(width) +
                          ", run uses " + std::to_string(sizeof(Scalar)));
  }
  std::map<std::string, std::string> extras;
  const std::uint32_t n_extras = ckpt::get_u32(in);
  for (std::uint32_t i = 0; i < n_extras; ++i) {
    const std::string k = ckpt::get_str(in);
    extras[k] = ckpt::get_str(in);
  }
  const std::uint64_t n_params = ckpt::get_u64(in);
  if (n_params != store.size()) {
    throw ValidationError("checkpoint has " + std::to_string(n_params) +
                          " parameters, model expects " + std::to_string(store.size()));
  }
  for (std::size_t p = 0; p < store.size(); ++p) {
    auto& e = store.entry(p);
    const std::string name = ckpt::get_str(in);
    if (name != e.name) {
      throw ValidationError("checkpoint parameter #" + std::to_string(p) + " is '" + name +
                            "', model expects '" + e.name + "'");
    }
    const std::uint64_t rows = ckpt::get_u64(in);
    const std::uint64_t cols = ckpt::get_u64(in);
    if (rows != e.value.rows() || cols != e.value.cols()) {
      throw ValidationError("checkpoint shape mismatch for '" + name + "'");
    }
    for (auto& v : e.value.values) {
      v = static_cast<Scalar>(ckpt::get_f64(in));
    }
  }
  const int has_opt = in.get();
  if (has_opt == 1) {
    const std::uint64_t step = ckpt::get_u64(in);
    std::vector<std::vector<Scalar>> m(store.size()), v(store.size());
    for (std::size_t p = 0; p < store.size(); ++p) {
      m[p].resize(store.entry(p).value.numel());
      v[p].resize(store.entry(p).value.numel());
      for (auto& x : m[p]) {
        x = static_cast<Scalar>(ckpt::get_f64(in));
      }
      for (auto& x : v[p]) {
        x = static_cast<Scalar>(ckpt::get_f64(in));
      }
    }
    if (optimizer != nullptr) {
      optimizer->restore(std::move(m), std::move(v), step);
    }
  }
  if (!in) {
    throw ValidationError("checkpoint '" + path + "' is truncated");
  }
  return extras;
}

}  // namespace gbert
