#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace forge {

// 64-bit FNV-1a. Used for config and artifact fingerprints only.
constexpr std::uint64_t fnv1a(std::string_view bytes,
                              std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value);

}  // namespace forge
