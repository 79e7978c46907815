#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "ciqi/error.hpp"
#include "ciqi/image.hpp"
#include "ciqi/retrieval.hpp"

// Vector store file layout (all integers and floats little-endian):
//
//   offset  size  field
//   0       8     magic "CIQIVEC\0"
//   8       4     u32 format version (1)
//   12      4     u32 space tag (0 = clip, 1 = text)
//   16      4     u32 dim
//   20      8     u64 row count
//   28      ...   rows
//
// Each row: u32 id byte length, id bytes (UTF-8), u32 image ordinal,
// dim x f32 components. Rows appear in insertion order.

namespace ciqi {

inline constexpr std::array<char, 8> kVectorStoreMagic = {'C', 'I', 'Q', 'I', 'V', 'E', 'C', '\0'};
inline constexpr std::uint32_t kVectorStoreVersion = 1;

namespace detail {

template <typename T>
void put_le(Bytes& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<std::uint8_t, sizeof(T)> raw{};
  std::memcpy(raw.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  out.insert(out.end(), raw.begin(), raw.end());
}

class LeReader {
 public:
  explicit LeReader(const Bytes& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::array<std::uint8_t, sizeof(T)> raw{};
    std::memcpy(raw.data(), bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw.data(), sizeof(T));
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorCode::MalformedStore, "truncated vector store");
  }
  const Bytes& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Bytes encode_vector_store(const VectorIndex& index) {
  Bytes out;
  out.insert(out.end(), kVectorStoreMagic.begin(), kVectorStoreMagic.end());
  detail::put_le<std::uint32_t>(out, kVectorStoreVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(index.space()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(index.dim()));
  detail::put_le<std::uint64_t>(out, index.size());
  for (const auto& e : index.entries()) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.record_id.size()));
    out.insert(out.end(), e.record_id.begin(), e.record_id.end());
    detail::put_le<std::uint32_t>(out, e.ordinal);
    for (float v : e.vector) detail::put_le<float>(out, v);
  }
  return out;
}

inline VectorIndex decode_vector_store(const Bytes& bytes) {
  detail::LeReader in(bytes);
  const std::string magic = in.get_string(kVectorStoreMagic.size());
  if (std::memcmp(magic.data(), kVectorStoreMagic.data(), kVectorStoreMagic.size()) != 0)
    throw Error(ErrorCode::MalformedStore, "bad magic");
  if (const auto version = in.get<std::uint32_t>(); version != kVectorStoreVersion)
    throw Error(ErrorCode::MalformedStore, "unsupported version " + std::to_string(version));
  const auto space_tag = in.get<std::uint32_t>();
  if (space_tag > 1) throw Error(ErrorCode::MalformedStore, "unknown space tag " + std::to_string(space_tag));
  const auto dim = in.get<std::uint32_t>();
  const auto count = in.get<std::uint64_t>();

  VectorIndex index(static_cast<Space>(space_tag), dim);
  for (std::uint64_t row = 0; row < count; ++row) {
    const auto id_len = in.get<std::uint32_t>();
    std::string id = in.get_string(id_len);
    const auto ordinal = in.get<std::uint32_t>();
    std::vector<float> v(dim);
    for (auto& x : v) x = in.get<float>();
    index.add(std::move(id), ordinal, std::move(v));
  }
  if (!in.done()) throw Error(ErrorCode::MalformedStore, "trailing bytes after last row");
  return index;
}

inline void save_vector_store(const std::filesystem::path& path, const VectorIndex& index) {
  write_file_bytes(path, encode_vector_store(index));
}

inline VectorIndex load_vector_store(const std::filesystem::path& path) {
  return decode_vector_store(read_file_bytes(path));
}

}  // namespace ciqi
