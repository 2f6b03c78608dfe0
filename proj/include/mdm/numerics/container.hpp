#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mdm/numerics/tensor.hpp"

namespace mdm::num {

// MDMT layout, all integers little-endian:
//   "MDMT" | u32 version | u32 count
//   per entry: u32 name_len | name | u8 code | u32 rank | u64 dims[rank] | payload
// code 0 = f32, 1 = f64, 2 = raw bytes (rank 1, dims = byte count).
class Container {
 public:
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::uint8_t kF32 = 0, kF64 = 1, kBytes = 2;

  struct Entry {
    std::string name;
    std::uint8_t code = kF32;
    Shape dims;
    std::vector<std::uint8_t> payload;
  };

  template <Real T>
  void put(const std::string& name, const Tensor<T>& t) {
    Entry e;
    e.name = name;
    e.code = std::is_same_v<T, float> ? kF32 : kF64;
    e.dims = t.shape();
    e.payload.resize(t.size() * sizeof(T));
    for (std::size_t i = 0; i < t.size(); ++i) store_le(t[i], e.payload.data() + i * sizeof(T));
    insert(std::move(e));
  }

  void put_bytes(const std::string& name, const std::string& bytes) {
    Entry e;
    e.name = name;
    e.code = kBytes;
    e.dims = {bytes.size()};
    e.payload.assign(bytes.begin(), bytes.end());
    insert(std::move(e));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw FormatError("container: missing entry '" + name + "'");
    return entries_[it->second];
  }

  template <Real T>
  Tensor<T> get(const std::string& name) const {
    const Entry& e = entry(name);
    const std::uint8_t want = std::is_same_v<T, float> ? kF32 : kF64;
    if (e.code != want) {
      throw FormatError("container: entry '" + name + "' has precision code " +
                        std::to_string(e.code) + ", expected " + std::to_string(want));
    }
    Tensor<T> t(e.dims);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = load_le<T>(e.payload.data() + i * sizeof(T));
    return t;
  }

  std::string get_bytes(const std::string& name) const {
    const Entry& e = entry(name);
    if (e.code != kBytes) throw FormatError("container: entry '" + name + "' is not a byte blob");
    return std::string(e.payload.begin(), e.payload.end());
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  void write(std::ostream& os) const {
    os.write("MDMT", 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      put_u32(os, static_cast<std::uint32_t>(e.name.size()));
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      os.put(static_cast<char>(e.code));
      put_u32(os, static_cast<std::uint32_t>(e.dims.size()));
      for (auto d : e.dims) put_u64(os, d);
      os.write(reinterpret_cast<const char*>(e.payload.data()),
               static_cast<std::streamsize>(e.payload.size()));
    }
    if (!os) throw FormatError("container: write failed");
  }

  /// Parses a complete container. Nothing is returned unless the whole stream is valid.
  static Container read(std::istream& is) {
    char magic[4];
    read_exact(is, magic, 4, "magic");
    if (std::memcmp(magic, "MDMT", 4) != 0) throw FormatError("container: bad magic bytes");
    const std::uint32_t version = get_u32(is, "version");
    if (version != kVersion) {
      throw FormatError("container: unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = get_u32(is, "count");
    Container c;
    for (std::uint32_t k = 0; k < count; ++k) {
      Entry e;
      const std::uint32_t name_len = get_u32(is, "name length");
      if (name_len > (1u << 16)) throw FormatError("container: implausible name length");
      e.name.resize(name_len);
      read_exact(is, e.name.data(), name_len, "name");
      char code;
      read_exact(is, &code, 1, "precision code");
      e.code = static_cast<std::uint8_t>(code);
      if (e.code > kBytes) throw FormatError("container: unknown precision code in '" + e.name + "'");
      const std::uint32_t rank = get_u32(is, "rank");
      if (rank > 16) throw FormatError("container: implausible rank in '" + e.name + "'");
      std::uint64_t elems = 1;
      for (std::uint32_t r = 0; r < rank; ++r) {
        const std::uint64_t d = get_u64(is, "dims");
        e.dims.push_back(static_cast<std::size_t>(d));
        elems *= d;
      }
      const std::size_t width = e.code == kF32 ? 4 : e.code == kF64 ? 8 : 1;
      if (elems > (std::uint64_t{1} << 34) / width) {
        throw FormatError("container: implausible payload size in '" + e.name + "'");
      }
      e.payload.resize(static_cast<std::size_t>(elems * width));
      read_exact(is, reinterpret_cast<char*>(e.payload.data()), e.payload.size(), "payload");
      if (c.contains(e.name)) throw FormatError("container: duplicate entry '" + e.name + "'");
      c.insert(std::move(e));
    }
    return c;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("container: cannot open " + path.string() + " for writing");
    write(f);
  }

  static Container load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("container: cannot open " + path.string());
    return read(f);
  }

 private:
  void insert(Entry e) {
    auto it = index_.find(e.name);
    if (it != index_.end()) {
      entries_[it->second] = std::move(e);
      return;
    }
    index_[e.name] = entries_.size();
    entries_.push_back(std::move(e));
  }

  template <class U>
  static void store_le(U v, std::uint8_t* out) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    const Bits b = std::bit_cast<Bits>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) out[i] = static_cast<std::uint8_t>(b >> (8 * i));
  }

  template <class U>
  static U load_le(const std::uint8_t* in) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    Bits b = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) b |= static_cast<Bits>(in[i]) << (8 * i);
    return std::bit_cast<U>(b);
  }

  static void put_u32(std::ostream& os, std::uint32_t v) {
    std::uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
  }
  static void put_u64(std::ostream& os, std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
  }
  static void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
    is.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) {
      throw FormatError(std::string("container: truncated while reading ") + what);
    }
  }
  static std::uint32_t get_u32(std::istream& is, const char* what) {
    std::uint8_t b[4];
    read_exact(is, reinterpret_cast<char*>(b), 4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  static std::uint64_t get_u64(std::istream& is, const char* what) {
    std::uint8_t b[8];
    read_exact(is, reinterpret_cast<char*>(b), 8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace mdm::num
