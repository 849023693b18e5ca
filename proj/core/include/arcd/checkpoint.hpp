#pragma once

#include <filesystem>
#include <string>

#include "arcd/arch.hpp"

namespace arcd {

// Layout (little-endian):
//   "ARCK" | u8 version | u16 len + config text (key=value;...)
//   per parameter, in model order: u16 len + name | ARCT record
//   u16 0
//   ARCT [2, total BN channels]: running means then running variances of
//   every BN layer, concatenated in model order.
// Values are stored as float32.

struct CheckpointInfo {
  ArchConfig arch;
  AblationConfig ablation;
  std::int64_t iteration = 0;
};

std::string encode_config(const CheckpointInfo& info);
CheckpointInfo decode_config(const std::string& text);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, ARCDNet<T>& model, std::int64_t iteration);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Loads into an existing model. Throws MismatchError naming the first
/// parameter whose name or shape differs.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, ARCDNet<T>& model);

/// Builds the architecture recorded in the file and loads it.
template <typename T>
ARCDNet<T> load_model(const std::filesystem::path& path);

}  // namespace arcd
