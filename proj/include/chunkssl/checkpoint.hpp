#pragma once

// Checkpoint layout (little-endian):
//   "CSSL-CKPT" u32 version
//   str kind, str config echo
//   u32 count, then per tensor: str name, u32 frozen, u32 rows, u32 cols
//   payloads in table order, float32
// str = u32 byte length + bytes.

#include <string>

#include "chunkssl/io.hpp"
#include "chunkssl/params.hpp"

namespace chunkssl {

inline constexpr const char* kCheckpointMagic = "CSSL-CKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
  std::string kind;
  std::string config;
  ParamSet<T> params;
};

template <class T>
std::string encode_checkpoint(const std::string& kind, const std::string& config, const ParamSet<T>& params) {
  ByteWriter w;
  w.raw(kCheckpointMagic, std::strlen(kCheckpointMagic));
  w.u32(kCheckpointVersion);
  w.str(kind);
  w.str(config);
  w.u32(static_cast<std::uint32_t>(params.names().size()));
  for (const auto& n : params.names()) {
    const auto& a = params.at(n);
    w.str(n);
    w.u32(params.frozen(n) ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(a.rows()));
    w.u32(static_cast<std::uint32_t>(a.cols()));
  }
  for (const auto& n : params.names())
    for (auto v : params.at(n).data()) w.f32(static_cast<float>(v));
  return w.bytes();
}

template <class T>
Checkpoint<T> decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  ByteReader r(bytes, what);
  r.expect(kCheckpointMagic);
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  Checkpoint<T> c;
  c.kind = r.str();
  c.config = r.str();
  struct Entry {
    std::string name;
    bool frozen;
    std::size_t rows, cols;
  };
  std::vector<Entry> table(r.u32());
  for (auto& e : table) {
    e.name = r.str();
    e.frozen = r.u32() != 0;
    e.rows = r.u32();
    e.cols = r.u32();
  }
  for (const auto& e : table) {
    std::vector<T> data(e.rows * e.cols);
    for (auto& v : data) v = static_cast<T>(r.f32());
    Array<T> a({e.rows, e.cols}, std::move(data));
    if (!a.all_finite()) throw FormatError(what + ": non-finite value in " + e.name);
    c.params.add(e.name, std::move(a), e.frozen);
  }
  r.finish();
  return c;
}

template <class T>
void save_checkpoint(const fs::path& path, const std::string& kind, const std::string& config, const ParamSet<T>& params) {
  atomic_write(path, encode_checkpoint(kind, config, params));
}

/// Loads and checks the kind tag.
template <class T>
Checkpoint<T> load_checkpoint(const fs::path& path, const std::string& expected_kind) {
  auto c = decode_checkpoint<T>(read_file(path), path.string());
  if (c.kind != expected_kind) {
    throw FormatError(path.string() + ": checkpoint holds '" + c.kind + "', expected '" + expected_kind + "'");
  }
  return c;
}

}  // namespace chunkssl
