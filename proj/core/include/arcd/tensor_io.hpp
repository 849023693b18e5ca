#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "arcd/tensor.hpp"

namespace arcd {

// ARCT record layout, all little-endian:
//   "ARCT" | u8 version (1) | u8 rank | rank x u32 dims | float32 values (row-major)
inline constexpr char kArctMagic[4] = {'A', 'R', 'C', 'T'};
inline constexpr std::uint8_t kArctVersion = 1;

template <typename T>
void write_arct(std::ostream& os, const Tensor<T>& tensor);

/// Reads one record. `base_offset` is added to byte offsets reported in
/// ParseError (position of the record inside a larger file).
template <typename T>
Tensor<T> read_arct(std::istream& is, std::uint64_t base_offset = 0);

template <typename T>
void save_arct(const std::filesystem::path& path, const Tensor<T>& tensor);
template <typename T>
Tensor<T> load_arct(const std::filesystem::path& path);

/// Writes `bytes` to `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace arcd
