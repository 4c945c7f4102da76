#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "varp/tensor.hpp"
#include "varp/tokenizer.hpp"
#include "varp/var_model.hpp"

namespace varp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorDict = std::map<std::string, Tensor>;

// "VARP" magic, u32 version, u32 count, name-sorted entries (u32 name length,
// name bytes, u32 rank, u64 extents, little-endian f64 payload), trailing
// CRC-32 over every preceding byte. Integers are little-endian.
std::string encode_checkpoint(const TensorDict& tensors);
TensorDict decode_checkpoint(const std::string& bytes);

void save_tensors(const std::string& path, const TensorDict& tensors);
// Throws CorruptFileError on truncation, bad magic or CRC mismatch and
// VersionError on an unknown format version; nothing is returned on failure.
TensorDict load_tensors(const std::string& path);

TensorDict model_to_dict(const VarModel& model);
VarModel model_from_dict(const TensorDict& dict);
void save_model(const std::string& path, const VarModel& model);
VarModel load_model(const std::string& path);

TensorDict autoencoder_to_dict(const AutoencoderWeights& weights);
AutoencoderWeights autoencoder_from_dict(const TensorDict& dict);
void save_autoencoder(const std::string& path, const AutoencoderWeights& weights);
AutoencoderWeights load_autoencoder(const std::string& path);

// Role implied by a parameter name ("blocks.3.ca.q.w" -> CA).
Role role_for_name(const std::string& name);

}  // namespace varp
