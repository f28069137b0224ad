#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdl {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// FNV-1a, 64-bit.
class Fnv1a64 {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ull;
    }
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ull;
};

/// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const void* data, std::size_t n);
  /// Lower-case hex digest; the object is spent afterwards.
  std::string hex();

 private:
  void* ctx_;
};

/// Hex SHA-256 of the file bytes.
std::string file_sha256(const std::filesystem::path& path);

std::string base64_encode(const void* data, std::size_t n);
/// Throws FormatError on malformed input.
std::vector<unsigned char> base64_decode(const std::string& text);

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
  }

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (hashing_) hash_.update(data, n);
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void floats(const float* p, std::size_t n) { bytes(p, n * sizeof(float)); }

  /// Starts hashing everything written from here on.
  void begin_hash() {
    hashing_ = true;
    hash_ = Fnv1a64{};
  }
  std::uint64_t end_hash() {
    hashing_ = false;
    return hash_.value();
  }

  void close() {
    out_.flush();
    if (!out_) throw std::runtime_error("write failed: " + path_.string());
    out_.close();
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  bool hashing_ = false;
  Fnv1a64 hash_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open " + path.string());
  }

  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(path_.string() + ": unexpected end of file");
    if (hashing_) hash_.update(data, n);
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string string(std::size_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  void floats(float* p, std::size_t n) { bytes(p, n * sizeof(float)); }
  void skip(std::size_t n) {
    in_.seekg(static_cast<std::streamoff>(n), std::ios::cur);
    if (!in_) throw FormatError(path_.string() + ": unexpected end of file");
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

  void begin_hash() {
    hashing_ = true;
    hash_ = Fnv1a64{};
  }
  std::uint64_t end_hash() {
    hashing_ = false;
    return hash_.value();
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  bool hashing_ = false;
  Fnv1a64 hash_;
};

}  // namespace sdl
