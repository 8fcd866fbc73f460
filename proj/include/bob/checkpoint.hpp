#pragma once

// Single-file checkpoint: magic, format version, config text, vocabulary,
// named parameters as little-endian f64, Adam slots, RNG state, step.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

#include "bob/config.hpp"
#include "bob/data.hpp"
#include "bob/model.hpp"
#include "bob/objectives.hpp"

namespace bob {

inline constexpr std::uint32_t checkpoint_version = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    RunConfig config;
    Vocab vocab;
    std::shared_ptr<BobModel> model;
    AdamState adam;
    Rng rng;
    std::uint64_t step = 0;
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
/// Throws CheckpointError on a bad magic, a version mismatch, truncation,
/// or parameters that do not match the stored configuration.
Checkpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bob
