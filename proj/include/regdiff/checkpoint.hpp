#pragma once

// Binary checkpoints:
//   "RGDF" | u32 version | u32 count |
//   count x (u16 name_len | name | u8 rank | u32 dims[rank] | f32 values[]) |
//   u32 CRC-32 of every preceding byte
// All integers and floats are little-endian. Values are stored as 32-bit
// floats, so a round trip is exact only at single precision.

#include <filesystem>
#include <stdexcept>

#include "regdiff/denoiser.hpp"
#include "regdiff/vae.hpp"

namespace regdiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kFormat, kVersion, kCrc, kTruncated };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::vector<unsigned char> encode_checkpoint(const ParameterSet& params);
ParameterSet decode_checkpoint(std::span<const unsigned char> bytes);

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_checkpoint(const std::filesystem::path& path);

// Model configs travel inside the checkpoint as "meta.*" tensors.
void save_vae(const VaeModel& model, const std::filesystem::path& path);
VaeModel load_vae(const std::filesystem::path& path);  // returned frozen
void save_denoiser(const DenoiserModel& model, const std::filesystem::path& path);
DenoiserModel load_denoiser(const std::filesystem::path& path);

// Parameters rounded to single precision, as a save/load round trip would.
ParameterSet round_to_f32(const ParameterSet& params);

}  // namespace regdiff
