#pragma once

// Binary checkpoint, little-endian:
//   magic "DGNCKPT1", u32 version, u32 reserved, u64 step, u64[4] rng state,
//   u64 config length + config text,
//   u64 array count, then per array: u32 name length + name, u8 dtype
//   (1 = f64, 2 = f32), u8 rank, u64 dims[rank], u64 offset, u64 byte size,
//   then the raw arrays; offsets are relative to the start of that block.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "dgn/image.hpp"
#include "dgn/tensor.hpp"

namespace dgn {

inline constexpr char kCheckpointMagic[8] = {'D', 'G', 'N', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ArrayRecord {
  std::string name;
  Shape shape;
  std::vector<Real> values;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t step = 0;
  std::array<std::uint64_t, 4> rng_state{};
  std::string config;  // resolved config echo
  std::vector<ArrayRecord> arrays;

  const ArrayRecord* find(const std::string& name) const {
    for (const auto& a : arrays) {
      if (a.name == name) return &a;
    }
    return nullptr;
  }
};

namespace detail {

inline constexpr std::uint8_t kDtypeF64 = 1;
inline constexpr std::uint8_t kDtypeF32 = 2;
inline constexpr std::uint8_t real_dtype() { return sizeof(Real) == 8 ? kDtypeF64 : kDtypeF32; }

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    bytes.insert(bytes.end(), b, b + sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  std::vector<unsigned char> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& b, std::string path) : bytes_(b), path_(std::move(path)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char b[sizeof(T)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("truncated checkpoint: " + path_);
  }
  const std::vector<unsigned char>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put<std::uint32_t>(ck.version);
  w.put<std::uint32_t>(0);
  w.put<std::uint64_t>(ck.step);
  for (auto s : ck.rng_state) w.put<std::uint64_t>(s);
  w.put<std::uint64_t>(ck.config.size());
  w.put_bytes(ck.config.data(), ck.config.size());
  w.put<std::uint64_t>(ck.arrays.size());
  std::uint64_t offset = 0;
  for (const auto& a : ck.arrays) {
    if (numel(a.shape) != a.values.size()) throw std::invalid_argument("checkpoint: array " + a.name + " size mismatch");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.name.size()));
    w.put_bytes(a.name.data(), a.name.size());
    w.put<std::uint8_t>(detail::real_dtype());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(a.shape.size()));
    for (auto d : a.shape) w.put<std::uint64_t>(d);
    const std::uint64_t nbytes = a.values.size() * sizeof(Real);
    w.put<std::uint64_t>(offset);
    w.put<std::uint64_t>(nbytes);
    offset += nbytes;
  }
  for (const auto& a : ck.arrays) {
    for (Real v : a.values) w.put<Real>(v);
  }
  return std::move(w.bytes);
}

inline Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes, const std::string& path = "<memory>") {
  detail::ByteReader r(bytes, path);
  if (r.get_string(8) != std::string(kCheckpointMagic, 8)) throw IoError("not a checkpoint: " + path);
  Checkpoint ck;
  ck.version = r.get<std::uint32_t>();
  if (ck.version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(ck.version) + ": " + path);
  }
  r.get<std::uint32_t>();
  ck.step = r.get<std::uint64_t>();
  for (auto& s : ck.rng_state) s = r.get<std::uint64_t>();
  ck.config = r.get_string(r.get<std::uint64_t>());
  const std::uint64_t count = r.get<std::uint64_t>();
  struct Entry {
    std::uint64_t offset, nbytes;
  };
  std::vector<Entry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    ArrayRecord a;
    a.name = r.get_string(r.get<std::uint32_t>());
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != detail::real_dtype()) {
      throw IoError("checkpoint dtype does not match this build (array " + a.name + "): " + path);
    }
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) a.shape.push_back(r.get<std::uint64_t>());
    const Entry e{r.get<std::uint64_t>(), r.get<std::uint64_t>()};
    if (e.nbytes != numel(a.shape) * sizeof(Real)) throw IoError("checkpoint array " + a.name + " has a bad size: " + path);
    entries.push_back(e);
    ck.arrays.push_back(std::move(a));
  }
  const std::size_t base = r.pos();
  for (std::size_t i = 0; i < ck.arrays.size(); ++i) {
    if (base + entries[i].offset + entries[i].nbytes > bytes.size()) throw IoError("truncated checkpoint: " + path);
    std::vector<unsigned char> slice(bytes.begin() + static_cast<long>(base + entries[i].offset),
                                     bytes.begin() + static_cast<long>(base + entries[i].offset + entries[i].nbytes));
    detail::ByteReader ar(slice, path);
    auto& vals = ck.arrays[i].values;
    vals.resize(entries[i].nbytes / sizeof(Real));
    for (auto& v : vals) v = ar.get<Real>();
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = serialize_checkpoint(ck);
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(parent, ec);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file_bytes(path), path); }

}  // namespace dgn
