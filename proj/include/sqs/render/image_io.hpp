#pragma once

#include "sqs/autodiff/array.hpp"

#include <filesystem>
#include <vector>

namespace sqs::render {

// Binary PPM: "P6\n<W> <H>\n255\n" then H*W*3 bytes, rows top to bottom.
// Channel values are clamped to [0,1] and rounded to the nearest of 0..255.
std::vector<char> encode_ppm(const ad::Array& rgb);
ad::Array decode_ppm(const std::vector<char>& bytes);
void write_ppm(const std::filesystem::path& path, const ad::Array& rgb);
ad::Array read_ppm(const std::filesystem::path& path);

// Greyscale PFM: "Pf\n<W> <H>\n-1.0\n" then H*W little-endian float32,
// rows bottom to top as the format prescribes.
std::vector<char> encode_pfm(const ad::Array& depth);
ad::Array decode_pfm(const std::vector<char>& bytes);
void write_pfm(const std::filesystem::path& path, const ad::Array& depth);
ad::Array read_pfm(const std::filesystem::path& path);

} // namespace sqs::render
