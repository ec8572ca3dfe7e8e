#pragma once

#include "pomni/nn/layers.hpp"
#include "pomni/sigproc/sigproc.hpp"

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pomni {

/// Model-side view of one modality of one sample: patch tokens in
/// channel-major order plus their reconstruction targets.
struct ModalityTokens {
  Modality modality = Modality::EEG;
  int channels = 0;
  int per_channel = 0;
  Tensor<Real> patches;  // [N, P]
  Tensor<Real> targets;  // [N, target width]
  std::vector<Index> channel;
  std::vector<Index> time;

  Index count() const { return patches.rows(); }
};

ModalityTokens make_tokens(const PatchGrid& grid);

struct ConvSpec {
  std::array<Index, 3> in{1, 16, 16};
  std::array<Index, 3> out{16, 16, 16};
  std::array<Index, 3> kernel{15, 3, 3};
  std::array<Index, 3> stride{8, 1, 1};
  std::array<Index, 3> pad{7, 1, 1};
  Index groups = 4;

  /// Length after the chain, floor((n + 2p - k) / s) + 1 per layer.
  Index output_length(Index patch) const;
};

struct EncoderConfig {
  Modality modality = Modality::EEG;
  Index patch = 200;
  Index hidden = 64;
  Index layers = 2;
  Index heads = 4;
  Index mlp_ratio = 4;
  Index max_channels = 16;
  Index max_time = 64;
  ConvSpec conv;

  void validate() const;
};

/// Temporal conv encoder, spatial/temporal embeddings, transformer stack.
/// The last axis of the output splits into a private (first) and a shared
/// (second) half.
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParamStore<Real>& ps, const std::string& prefix, const EncoderConfig& config, Rng& rng);

  /// Patch tokens [N, P] -> [N, d].
  Var<Real> temporal_encode(Tape<Real>& t, Var<Real> patches) const;

  /// Full encoder. When `mask` is non-empty, rows with mask != 0 are replaced
  /// by `mask_token` after the temporal encoder, before embeddings are added.
  Var<Real> forward(Tape<Real>& t, const ModalityTokens& x, std::span<const char> mask = {},
                    std::optional<Var<Real>> mask_token = std::nullopt) const;

  Var<Real> private_half(Var<Real> z) const { return slice_cols(z, 0, config_.hidden / 2); }
  Var<Real> shared_half(Var<Real> z) const { return slice_cols(z, config_.hidden / 2, config_.hidden / 2); }

  const EncoderConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }

 private:
  EncoderConfig config_;
  std::string prefix_;
  std::array<const Parameter<Real>*, 3> conv_{};
  std::array<const Parameter<Real>*, 3> gn_gamma_{};
  std::array<const Parameter<Real>*, 3> gn_beta_{};
  Linear<Real> proj_;
  const Parameter<Real>* spatial_ = nullptr;
  const Parameter<Real>* temporal_ = nullptr;
  TransformerStack<Real> stack_;
};

/// Encoder configs with hidden 64 for EEG and 32 otherwise, patch lengths
/// from the modality specs.
std::map<Modality, EncoderConfig> default_encoders(const std::vector<Modality>& modalities,
                                                   const std::map<Modality, ModalitySpec>& specs, Index layers = 2,
                                                   Index heads = 4, Index eeg_hidden = 64, Index other_hidden = 32);

}  // namespace pomni
