#pragma once

// Stage 2: masked-patch prediction of the frozen tokenizer's private and
// shared code indices.

#include "pomni/tokenizer/tokenizer.hpp"

#include <map>
#include <vector>

namespace pomni {

/// 0.5 for EEG and EMG, 0.7 for EOG and ECG.
double default_mask_ratio(Modality m);

/// round(r * n) clamped to [1, n - 1]; n = 1 masks its single patch.
int mask_count(double ratio, int n);

/// Uniformly chosen patches, exactly mask_count(ratio, n) of them set to 1.
std::vector<char> draw_mask(int n, double ratio, Rng rng);

struct PretrainConfig {
  std::vector<Modality> modalities{Modality::EEG, Modality::EOG, Modality::ECG};
  std::map<Modality, EncoderConfig> encoders;  // default_encoders when empty
  std::map<Modality, double> mask_ratio;       // default_mask_ratio when absent
  Index codebook_size = 128;
  bool shared_head = true;  // false when the tokenizer has no shared codebook

  void validate() const;
  double ratio(Modality m) const;
};

/// Code-index targets for one sample, one entry per modality.
using CodeTargets = std::vector<ModalityCodes>;

/// Targets for every sample of a split from a frozen tokenizer.
std::vector<CodeTargets> compute_targets(const Tokenizer& tok, const std::vector<Sample>& samples, int threads = 1);

/// Sum over masked rows of -log softmax(logits)[target]. Unmasked rows are
/// never read.
Var<Real> masked_cross_entropy(Var<Real> logits, std::span<const Index> targets, std::span<const char> mask);

struct MaskedPass {
  Var<Real> loss;  // summed CE over masked positions / masked count, both heads
  int masked = 0;
  int private_correct = 0;
  int shared_correct = 0;
};

class MaskedModel {
 public:
  /// Encoders live under "<prefix>.<mod>", the mask tokens and heads under
  /// "pre.<mod>".
  MaskedModel(ParamStore<Real>& ps, const PretrainConfig& config, Rng& rng, const std::string& prefix = "enc");
  MaskedModel(const MaskedModel&) = delete;
  MaskedModel& operator=(const MaskedModel&) = delete;

  /// masks[j] marks the corrupted patches of modality j.
  MaskedPass forward(Tape<Real>& t, const Sample& s, const CodeTargets& targets,
                     const std::vector<std::vector<char>>& masks) const;

  /// Fresh masks for every modality of a sample.
  std::vector<std::vector<char>> draw_masks(const Sample& s, const Rng& rng) const;

  const PretrainConfig& config() const { return config_; }
  const Encoder& encoder(std::size_t slot) const { return mods_[slot].encoder; }

 private:
  struct PerModality {
    Modality modality = Modality::EEG;
    Encoder encoder;
    const Parameter<Real>* mask_token = nullptr;
    Linear<Real> private_head, shared_head;
  };
  PretrainConfig config_;
  std::vector<PerModality> mods_;
};

/// Copies "<tok prefix>.<mod>.encoder.*" onto "<prefix>.<mod>.*". Encoder
/// configs must match. Returns the number of tensors copied.
std::size_t warm_start_encoders(ParamStore<Real>& model, const ParamStore<Real>& tokenizer,
                                const std::vector<Modality>& modalities, const std::string& prefix = "enc",
                                const std::string& tok_prefix = "tok");

struct PretrainOptions {
  OptimConfig optim{10, 2, 16, 1e-3, 1e-5, 1e-4, 0.9, 0.99, 3.0};
  int threads = 1;
  std::uint64_t seed = 0;
};

/// Held-out masked loss and top-1 accuracy of both heads on masked patches,
/// with masks drawn from a fixed substream.
std::map<std::string, double> evaluate_masked(const MaskedModel& model, const std::vector<Sample>& samples,
                                              const std::vector<CodeTargets>& targets, std::uint64_t seed,
                                              int threads = 1);

/// Runs epochs start_epoch+1 .. optim.epochs. Masks are redrawn for every
/// sample at every step from the seeded stream.
std::vector<EpochStats> train_masked(MaskedModel& model, ParamStore<Real>& ps, const Dataset& data,
                                     const std::vector<CodeTargets>& train_targets,
                                     const std::vector<CodeTargets>& valid_targets, const PretrainOptions& options,
                                     AdamW<Real>& opt, int start_epoch = 0, const EpochCallback& on_epoch = {});

}  // namespace pomni
