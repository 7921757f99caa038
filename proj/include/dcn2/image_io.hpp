#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dcn2/tensor.hpp"

namespace dcn2 {

/// Decodes a binary PGM (P5) or PPM (P6) image into a (1, C, H, W) tensor
/// with values scaled to [0, 1]; C is 1 for PGM and 3 for PPM. Both 8-bit and
/// 16-bit (big-endian) samples are accepted.
Tensor decode_pnm(std::span<const std::uint8_t> bytes);
Tensor load_image(const std::string& path);

/// Encodes a (1, 1, H, W) or (1, 3, H, W) tensor as P5 or P6 with 8-bit
/// samples. Values are clamped to [0, 1] and rounded.
std::vector<std::uint8_t> encode_pnm(const Tensor& image);
void save_image(const std::string& path, const Tensor& image);

/// Binary mask as P5 with values 0 and 255.
std::vector<std::uint8_t> encode_mask_pgm(std::span<const std::uint8_t> mask, std::int64_t height,
                                          std::int64_t width);
void save_mask_pgm(const std::string& path, std::span<const std::uint8_t> mask, std::int64_t height,
                   std::int64_t width);

void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::string& path);

}  // namespace dcn2
