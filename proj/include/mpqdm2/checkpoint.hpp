#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>

#include "mpqdm2/toydiff.hpp"

namespace mpqdm2 {

// Checkpoint container: magic "MPQ2", u32 version (major << 16 | minor), then
// tagged sections, each a u8-length tag name, u64 payload size, and payload.
// All integers and floats are little-endian. Readers reject a higher major
// version and skip tags they do not know.
//
// An FP checkpoint carries {FP_WEIGHTS, SCHEDULE}; a quantized one adds
// {QUANT_STATE, ADAPTERS, ACT_QUANT}.
inline constexpr std::uint32_t kCheckpointVersion = (1u << 16) | 0u;

std::uint64_t fnv1a64(const void* data, std::size_t size);

// Identity of the FP teacher: FNV-1a over every weight and bias value in
// layer order. Base weights stay frozen through quantization and fine-tuning,
// so every checkpoint derived from one pretrain run hashes the same.
std::uint64_t teacher_hash(const ToyDiffusionModel& m);

struct Checkpoint {
    bool quantized = false;
    ToyDiffusionModel fp;
    QuantizedModel model;  // populated when quantized; model.fp mirrors fp
};

void write_checkpoint(std::ostream& os, const ToyDiffusionModel& fp);
void write_checkpoint(std::ostream& os, const QuantizedModel& model);
Checkpoint read_checkpoint(std::istream& is);

void save_checkpoint(const std::string& path, const ToyDiffusionModel& fp);
void save_checkpoint(const std::string& path, const QuantizedModel& model);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mpqdm2
