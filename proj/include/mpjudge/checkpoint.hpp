#pragma once

// Named-tensor checkpoint files:
//   "MPJ1", u8 version, u32 count, then per tensor
//   u32 name length, name bytes, u32 rank, u32 extents..., f32 values...
// All integers and floats little-endian.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mpjudge/model.hpp"
#include "mpjudge/tensor.hpp"

namespace mpjudge::checkpoint {

inline constexpr std::uint8_t kVersion = 1;

struct Entry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

std::size_t encoded_size(const std::vector<Entry>& entries);
std::vector<std::uint8_t> encode(const std::vector<Entry>& entries);
// Throws CheckpointError on bad magic, unsupported version, truncation,
// trailing bytes or duplicate names.
std::vector<Entry> decode(std::span<const std::uint8_t> bytes, const std::string& what = "checkpoint");

void save(const std::filesystem::path& path, const std::vector<Entry>& entries);
std::vector<Entry> load(const std::filesystem::path& path);

const Entry* find(const std::vector<Entry>& entries, const std::string& name);

// Configuration stored as the "meta.config" entry.
Entry config_entry(const ModelConfig& config);
ModelConfig config_from(const std::vector<Entry>& entries);

// Parameters, buffers and configuration, names optionally prefixed.
std::vector<Entry> model_entries(const MPJudgeModel<float>& model, const std::string& prefix = "");

// Checks every tensor of `model` is present with a matching shape before
// copying anything; on error the model is untouched.
void apply_entries(const std::vector<Entry>& entries, MPJudgeModel<float>& model,
                   const std::string& prefix = "");

}  // namespace mpjudge::checkpoint
