#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace caresurv {

// SplitMix64 finaliser; derives independent stream seeds from a master seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

std::string sha256_hex(std::string_view data);

std::string base64_encode(std::span<const std::uint8_t> bytes);
// Throws FormatError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

// Little-endian packing of numeric arrays for embedding in text containers.
std::string pack_doubles(std::span<const double> values);
std::vector<double> unpack_doubles(std::string_view encoded);
std::string pack_ints(std::span<const std::int32_t> values);
std::vector<std::int32_t> unpack_ints(std::string_view encoded);

std::string trim(std::string_view text);
std::string to_lower(std::string_view text);

}  // namespace caresurv
