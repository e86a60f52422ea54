#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "evolve/model.hpp"

namespace evolve {

// Binary layout (all integers little-endian):
//   "EVLV" | u32 version | ModelConfig | u32 tensor count |
//   per tensor: u32 name length, name bytes, u32 rank, u32 dims[rank], f32 values
// ModelConfig is eight u32 sizes (d_model, n_heads, n_layers, max_seq_len, vocab_size,
// n_ages, n_t2f, n_classes), the dropout as f64 bits, then the mode as u8.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::vector<NamedTensor<float>> tensors;

  const NamedTensor<float>* find(std::string_view name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// True when the file starts with the checkpoint magic.
bool is_checkpoint_file(const std::filesystem::path& path);

Checkpoint checkpoint_from_model(const EvolveModel<float>& model);
// Builds a model from the tensors named in the canonical layout; extra tensors are ignored.
EvolveModel<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace evolve
