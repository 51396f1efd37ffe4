#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pixemb/network.hpp"

namespace pixemb {

inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kModeTrain = 0;
inline constexpr std::uint8_t kModeInfer = 1;

// Bit-exact checkpoint codec; format documented in docs/checkpoint-format.md.
// Train mode stores float parameters and batch-norm state; infer mode stores
// the merged embedding table, packed sign weights and folded batch-norm
// affines. The parser is strict: unknown trailing bytes are an error.
std::vector<std::uint8_t> save_checkpoint(const ModelGraph& model);
std::vector<std::uint8_t> save_checkpoint(const PackedModel& model);

struct Checkpoint {
    std::uint8_t mode = kModeTrain;
    std::optional<ModelGraph> model;    // mode 0
    std::optional<PackedModel> packed;  // mode 1
};

Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes);

void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_binary_file(const std::string& path);

}  // namespace pixemb
