#pragma once

#include <filesystem>

#include <json.hpp>

#include "toan/parameters.hpp"

namespace toan {

// Binary container, all integers little-endian:
//   "TOAN" | u32 version | u32 record count
//   record: u32 name length | name (UTF-8) | u32 rank | u64 dims[rank] | f32 values
//   u64 trailer length | JSON trailer (UTF-8)
// Batch-norm statistics are records "<bn>.running_mean" / "<bn>.running_var";
// optimiser state lives under "optim/m/", "optim/v/" and "optim/step".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ParameterStore<float> store;
  nlohmann::json config;
};

void save_checkpoint(const std::filesystem::path& path, const ParameterStore<float>& store,
                     const nlohmann::json& config);

// Throws kCheckpointMismatch on a bad magic, version or truncated file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Byte image of a checkpoint, as written to disk.
std::string serialize_checkpoint(const ParameterStore<float>& store, const nlohmann::json& config);
Checkpoint deserialize_checkpoint(const std::string& bytes);

}  // namespace toan
