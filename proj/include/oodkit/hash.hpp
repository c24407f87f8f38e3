// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace oodkit {

// 64-bit FNV-1a. Used for fitted-statistic fingerprints and file digests.
class Fnv1a {
 public:
  Fnv1a& bytes(std::span<const unsigned char> data) noexcept {
    for (unsigned char byte : data) {
      state_ ^= byte;
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  Fnv1a& text(std::string_view s) noexcept {
    bytes({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
    return u64(s.size());
  }

  Fnv1a& u64(std::uint64_t v) noexcept {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    return bytes(buf);
  }

  Fnv1a& f64(double v) noexcept { return u64(std::bit_cast<std::uint64_t>(v)); }

  template <typename T>
  Fnv1a& values(std::span<const T> data) noexcept {
    return bytes({reinterpret_cast<const unsigned char*>(data.data()), data.size_bytes()});
  }

  std::uint64_t digest() const noexcept { return state_; }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a_hex(std::string_view data) {
  Fnv1a h;
  h.bytes({reinterpret_cast<const unsigned char*>(data.data()), data.size()});
  return h.hex();
}

}  // namespace oodkit
