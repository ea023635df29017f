#pragma once

#include "sqs/autodiff/array.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace sqs::ad {

using NamedArrays = std::vector<std::pair<std::string, Array>>;

// SQSCKPT1 container. Layout (all integers little-endian):
//   8 bytes  magic "SQSCKPT1"
//   u64      record count
//   per record: u32 name length, name bytes, u32 rank, u64 dims[rank],
//               f64 values[product(dims)]
void save_checkpoint(const std::filesystem::path& path, const NamedArrays& records);
NamedArrays load_checkpoint(const std::filesystem::path& path);

std::vector<char> encode_checkpoint(const NamedArrays& records);
NamedArrays decode_checkpoint(const std::vector<char>& bytes);

const Array& find_record(const NamedArrays& records, const std::string& name);

} // namespace sqs::ad
