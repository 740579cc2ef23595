#pragma once

// LoRA state dictionaries and the FLRA checkpoint format.
//
//   "FLRA" | u16 version | 32-byte fingerprint | u32 adapter count
//   per adapter: u16 path length, path bytes (UTF-8),
//                u32 rows(A), u32 cols(A), u32 rows(B), u32 cols(B),
//                A then B as row-major f64
//
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedlora/errors.hpp"
#include "fedlora/hash.hpp"
#include "fedlora/model.hpp"

namespace fedlora {

inline constexpr char kCheckpointMagic[4] = {'F', 'L', 'R', 'A'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

// Identifies the network an adapter set belongs to: architecture plus the
// exact frozen base weights.
inline Digest adapter_fingerprint(const MsDeit& model) {
  const Digest base = model.base_checksum();
  return Sha256().update("fedlora/adapters;").update(model.config.canonical()).update(to_hex(base)).finish();
}

struct LoraPair {
  Tensor A;
  Tensor B;
};

class LoraStateDict {
 public:
  Digest fingerprint{};
  std::vector<std::pair<std::string, LoraPair>> entries;  // model order

  // Value copy of a model's adapters.
  static LoraStateDict capture(const MsDeit& model) {
    LoraStateDict d;
    d.fingerprint = adapter_fingerprint(model);
    for (const auto& [path, a] : model.adapters()) d.entries.push_back({path, {a->A.detach(), a->B.detach()}});
    return d;
  }

  std::size_t size() const { return entries.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [p, e] : entries) n += e.A.numel() + e.B.numel();
    return n;
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> k;
    for (const auto& [p, e] : entries) k.push_back(p);
    return k;
  }

  // Writes the values into the model's existing adapter tensors, so optimizer
  // state bound to those tensors stays valid.
  void apply_to(MsDeit& model) const {
    if (fingerprint != adapter_fingerprint(model))
      throw ProtocolError("adapter fingerprint " + to_hex(fingerprint).substr(0, 16) +
                          " does not match the model (" + to_hex(adapter_fingerprint(model)).substr(0, 16) + ")");
    auto targets = model.adapters();
    if (targets.size() != entries.size())
      throw ProtocolError("adapter count " + std::to_string(entries.size()) + " does not match model's " +
                          std::to_string(targets.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& [path, e] = entries[i];
      auto& [mpath, a] = targets[i];
      if (path != mpath) throw ProtocolError("adapter key '" + path + "' where model expects '" + mpath + "'");
      if (e.A.shape() != a->A.shape() || e.B.shape() != a->B.shape())
        throw ProtocolError("adapter '" + path + "' has mismatched shapes");
      std::copy(e.A.data().begin(), e.A.data().end(), a->A.mutable_data().begin());
      std::copy(e.B.data().begin(), e.B.data().end(), a->B.mutable_data().begin());
    }
  }

  // Bitwise equality of keys, shapes, values and fingerprint.
  bool operator==(const LoraStateDict& o) const {
    if (fingerprint != o.fingerprint || entries.size() != o.entries.size()) return false;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& a = entries[i];
      const auto& b = o.entries[i];
      if (a.first != b.first || a.second.A.shape() != b.second.A.shape() || a.second.B.shape() != b.second.B.shape())
        return false;
      if (std::memcmp(a.second.A.data().data(), b.second.A.data().data(), a.second.A.numel() * sizeof(double)) ||
          std::memcmp(a.second.B.data().data(), b.second.B.data().data(), a.second.B.numel() * sizeof(double)))
        return false;
    }
    return true;
  }

  std::vector<std::uint8_t> serialize() const;
  static LoraStateDict deserialize(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to checkpoint '" + path.string() + "'");
  }

  static LoraStateDict load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }
};

namespace detail {

class ByteWriter {
 public:
  std::vector<std::uint8_t> bytes;

  void put(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint64_t get(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(get(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
  double f64(const char* what) { return std::bit_cast<double>(get(8, what)); }
  std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n)
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what + " at byte " +
                            std::to_string(pos_));
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> LoraStateDict::serialize() const {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u16(kCheckpointVersion);
  w.raw(fingerprint.data(), fingerprint.size());
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& [path, e] : entries) {
    if (path.size() > 0xffff) throw CheckpointError("adapter path too long: " + path);
    if (e.A.rank() != 2 || e.B.rank() != 2) throw CheckpointError("adapter '" + path + "' is not a matrix pair");
    w.u16(static_cast<std::uint16_t>(path.size()));
    w.raw(path.data(), path.size());
    w.u32(static_cast<std::uint32_t>(e.A.dim(0)));
    w.u32(static_cast<std::uint32_t>(e.A.dim(1)));
    w.u32(static_cast<std::uint32_t>(e.B.dim(0)));
    w.u32(static_cast<std::uint32_t>(e.B.dim(1)));
    for (double v : e.A.data()) w.f64(v);
    for (double v : e.B.data()) w.f64(v);
  }
  return std::move(w.bytes);
}

inline LoraStateDict LoraStateDict::deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.raw(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) throw CheckpointError("bad magic");
  const auto version = r.u16("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  LoraStateDict d;
  auto fp = r.raw(32, "fingerprint");
  std::copy(fp.begin(), fp.end(), d.fingerprint.begin());
  const auto count = r.u32("adapter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u16("path length");
    auto p = r.raw(len, "path");
    std::string path(p.begin(), p.end());
    const std::size_t ar = r.u32("shape"), ac = r.u32("shape"), br = r.u32("shape"), bc = r.u32("shape");
    if (ac != br) throw CheckpointError("adapter '" + path + "': A columns differ from B rows");
    auto read = [&](std::size_t rows, std::size_t cols) {
      if (rows && cols > r.remaining() / 8 / rows) throw CheckpointError("truncated checkpoint in adapter '" + path + "'");
      std::vector<double> v(rows * cols);
      for (auto& x : v) x = r.f64("adapter data");
      return Tensor({rows, cols}, std::move(v));
    };
    Tensor a = read(ar, ac);
    Tensor b = read(br, bc);
    d.entries.push_back({std::move(path), {std::move(a), std::move(b)}});
  }
  if (r.remaining() != 0) throw CheckpointError(std::to_string(r.remaining()) + " trailing bytes after checkpoint");
  return d;
}

}  // namespace fedlora
