#pragma once

// Named-tensor container, little-endian:
//   "POCK" | u16 version | u32 count |
//   count x (u16 name length, name, u8 rank, u64 dims..., f32 data...) |
//   u32 config length, config text

#include "pomni/numerics/autodiff.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pomni {

inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stored tensor does not match the shape the model expects.
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::string config;

  const Tensor<float>* find(const std::string& name) const;
  void put(const std::string& name, Tensor<float> value);
};

/// Writes to a sibling temporary file, then renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies every parameter (trainable or buffer) into the container.
void store_params(Checkpoint& ckpt, const ParamStore<float>& params);

/// Overwrites parameters whose names start with `prefix` from the container.
/// Missing tensors and shape mismatches raise errors naming the tensor.
/// Returns the number of tensors loaded.
std::size_t load_params(const Checkpoint& ckpt, ParamStore<float>& params, const std::string& prefix = "");

}  // namespace pomni
