#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

namespace pill {

// Streaming SHA-256. Self-contained so hashing parameter blocks and files
// needs no external crypto dependency.
class Sha256 {
 public:
  Sha256();

  void update(const void* data, std::size_t len);
  void update(std::span<const unsigned char> data) {
    update(data.data(), data.size());
  }

  // Finalizes and returns the 32-byte digest; the object must not be reused.
  std::array<unsigned char, 32> digest();

  // Finalizes and returns lowercase hex.
  std::string hex();

 private:
  void process_block(const unsigned char* block);

  std::array<std::uint32_t, 8> state_;
  std::array<unsigned char, 64> buffer_;
  std::size_t buffer_len_ = 0;
  std::uint64_t total_len_ = 0;
  bool finalized_ = false;
};

std::string sha256_hex(std::span<const unsigned char> data);
std::string sha256_hex(const std::string& data);

// Hashes a file's raw bytes; throws std::runtime_error when unreadable.
std::string sha256_file_hex(const std::string& path);

}  // namespace pill
