#pragma once

#include <set>
#include <stdexcept>
#include <string>

#include "pill/model.hpp"

namespace pill {

struct checkpoint_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary container: magic "PILLCKPT", format version, the ModelConfig fields,
// then one named block per parameter (name, trainable flag, shape, raw 64-bit
// little-endian values) in enumeration order. Round-trips byte-exactly.
void save_checkpoint(const PillModel& model, const std::string& path);

// Throws checkpoint_error on bad magic, version mismatch, or malformed blocks.
PillModel load_checkpoint(const std::string& path);

// SHA-256 over name+shape+raw values of every parameter in the given groups,
// in enumeration order. Used for freeze-conservation checks.
std::string hash_param_groups(const PillModel& model,
                              const std::set<ParamGroup>& groups);

// Single-parameter content hash (name+shape+values).
std::string hash_param(const ParamRef& p);

}  // namespace pill
