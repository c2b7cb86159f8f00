#pragma once

// Binary checkpoint containers. All integers are little-endian u64 unless
// noted; parameters are raw IEEE-754 doubles in row-major layout order, so a
// save/load round trip is bit-exact.
//
// Policy blob:
//   "CAPOPOL1"  magic (8 bytes)
//   u32 format version (=1), u32 reserved (=0)
//   d, Q, K, fillers, L, flags, f64 input_gain, version, n_values
//   (flags: bit 0 stop token, bit 1 answer features)
//   n_values doubles
//
// Trainer checkpoint:
//   "CAPOTRN1"  magic
//   u32 format version (=1), u32 reserved
//   step
//   policy blob (current), policy blob (reference)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "capo/errors.hpp"
#include "capo/policy.hpp"

namespace capo {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

constexpr char kPolicyMagic[8] = {'C', 'A', 'P', 'O', 'P', 'O', 'L', '1'};
constexpr char kTrainerMagic[8] = {'C', 'A', 'P', 'O', 'T', 'R', 'N', '1'};
constexpr std::uint32_t kFormatVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated checkpoint");
  return v;
}

inline void expect_magic(std::istream& in, const char (&magic)[8]) {
  char buf[8];
  in.read(buf, 8);
  if (!in || std::memcmp(buf, magic, 8) != 0) throw IoError("bad checkpoint magic");
  const auto version = get<std::uint32_t>(in);
  get<std::uint32_t>(in);
  if (version != kFormatVersion) throw IoError("unsupported checkpoint format version " + std::to_string(version));
}

inline void write_header(std::ostream& out, const char (&magic)[8]) {
  out.write(magic, 8);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint32_t>(out, 0);
}

}  // namespace detail

inline void write_policy(std::ostream& out, const PolicyParams& p) {
  const auto& s = p.shape();
  detail::write_header(out, detail::kPolicyMagic);
  for (std::uint64_t v : {std::uint64_t(s.d), std::uint64_t(s.Q), std::uint64_t(s.K),
                          std::uint64_t(s.fillers), std::uint64_t(s.L),
                          std::uint64_t(s.stop_token) | (std::uint64_t(s.answer_features) << 1)})
    detail::put(out, v);
  detail::put(out, std::bit_cast<std::uint64_t>(s.input_gain));
  detail::put(out, p.version());
  detail::put(out, std::uint64_t(p.values().size()));
  out.write(reinterpret_cast<const char*>(p.values().data()),
            static_cast<std::streamsize>(p.values().size() * sizeof(double)));
}

inline PolicyParams read_policy(std::istream& in) {
  detail::expect_magic(in, detail::kPolicyMagic);
  PolicyShape s;
  s.d = static_cast<int>(detail::get<std::uint64_t>(in));
  s.Q = static_cast<int>(detail::get<std::uint64_t>(in));
  s.K = static_cast<int>(detail::get<std::uint64_t>(in));
  s.fillers = static_cast<int>(detail::get<std::uint64_t>(in));
  s.L = static_cast<int>(detail::get<std::uint64_t>(in));
  const auto flags = detail::get<std::uint64_t>(in);
  if (flags > 3) throw IoError("checkpoint has unknown shape flags");
  s.stop_token = (flags & 1) != 0;
  s.answer_features = (flags & 2) != 0;
  s.input_gain = std::bit_cast<double>(detail::get<std::uint64_t>(in));
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint shape is invalid: ") + e.what());
  }
  const auto version = detail::get<std::uint64_t>(in);
  const auto n = detail::get<std::uint64_t>(in);
  PolicyParams p(s, version);
  if (n != p.values().size()) throw IoError("checkpoint parameter count does not match its shape");
  in.read(reinterpret_cast<char*>(p.values().data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw IoError("truncated checkpoint");
  return p;
}

inline void save_policy(const std::string& path, const PolicyParams& p) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_policy(out, p);
  if (!out) throw IoError("write failed: " + path);
}

struct TrainerState {
  PolicyParams params;
  PolicyParams reference;
  std::uint64_t step = 0;

  friend bool operator==(const TrainerState&, const TrainerState&) = default;
};

inline void save_trainer(const std::string& path, const TrainerState& st) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  detail::write_header(out, detail::kTrainerMagic);
  detail::put<std::uint64_t>(out, st.step);
  write_policy(out, st.params);
  write_policy(out, st.reference);
  if (!out) throw IoError("write failed: " + path);
}

inline TrainerState load_trainer(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  detail::expect_magic(in, detail::kTrainerMagic);
  TrainerState st;
  st.step = detail::get<std::uint64_t>(in);
  st.params = read_policy(in);
  st.reference = read_policy(in);
  return st;
}

/// Loads the current policy from either a policy blob or a trainer checkpoint.
inline PolicyParams load_policy(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8] = {};
  in.read(magic, 8);
  if (!in) throw IoError("truncated checkpoint: " + path);
  in.seekg(0);
  if (std::memcmp(magic, detail::kTrainerMagic, 8) == 0) return load_trainer(path).params;
  return read_policy(in);
}

}  // namespace capo
