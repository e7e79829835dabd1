#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "agecycle/trainer.hpp"

namespace agecycle {

inline constexpr char kCheckpointMagic[8] = {'A', 'G', 'E', 'C', 'Y', 'C', 'L', 'E'};
inline constexpr std::uint32_t kCheckpointSchemaVersion = 1;

/// Raw view of a checkpoint file: the JSON header and every named blob, in
/// file order. See docs/checkpoint_format.md for the byte layout.
struct CheckpointArchive {
  nlohmann::json header;
  std::vector<NamedTensor> blobs;
};

void write_archive(const std::filesystem::path& path, const nlohmann::json& header,
                   const std::vector<NamedTensor>& blobs);
/// Verifies magic, schema version and the content hash.
CheckpointArchive read_archive(const std::filesystem::path& path);

/// Lowercase hex SHA-256.
std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_file_hex(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace agecycle
