#pragma once

// Stage 1: per-modality encoders whose output halves are quantized against
// private codebooks and one shared codebook, decoded back to reconstruction
// targets, and tied together through the anchor (EEG) shared codes.

#include "pomni/datagen/dataset.hpp"
#include "pomni/encoder/encoder.hpp"
#include "pomni/tokenizer/codebook.hpp"
#include "pomni/train/trainer.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pomni {

struct TokenizerConfig {
  std::vector<Modality> modalities{Modality::EEG, Modality::EOG, Modality::ECG};
  std::map<Modality, ModalitySpec> specs = default_specs();
  std::map<Modality, EncoderConfig> encoders;  // filled by default_encoders when empty
  Index codebook_size = 128;
  Index code_dim = 16;
  Index decoder_hidden = 32;
  Index decoder_layers = 3;
  Index decoder_heads = 4;
  double alpha1 = 1.0;  // cross-modal reconstruction weight
  double alpha2 = 0.1;  // disentangling weight
  double ema_decay = 0.99;
  double ema_eps = 1e-5;
  int revive_after = 2;
  bool cross_modal = true;
  bool disentangle = true;
  bool shared_codebook = true;

  void validate() const;
};

/// Forward products for one modality of one sample.
struct ModalityPass {
  Modality modality = Modality::EEG;
  int factor = 1;
  Var<Real> z_private, z_shared;   // encoder halves [N, d/2]
  Quantized priv;                  // [N, D]
  std::optional<Quantized> shared;  // [N / f, D]
  std::vector<Index> group;        // shared row per token
  Var<Real> recon;                 // [N, target width]
  Var<Real> cross_recon;           // decoder output with anchor codes, when used
};

struct TokenizerLosses {
  Var<Real> total;
  Var<Real> reconstruction;  // sum over modalities
  Var<Real> commitment;      // sum over private and shared lookups
  Var<Real> vq;              // value only; EMA does the codebook update
  Var<Real> cross_modal;     // invalid when disabled
  Var<Real> disentangle;     // always computed; enters total only when enabled
};

struct TokenizerPass {
  std::vector<ModalityPass> modalities;
  TokenizerLosses loss;
};

/// Private and shared code indices per token; shared indices repeat across
/// the f tokens that one aligned token covers.
struct ModalityCodes {
  std::vector<Index> private_index;
  std::vector<Index> shared_index;  // empty without a shared codebook
};

/// mean over tokens of cos^2(z_private, z_shared); 0 when orthogonal.
Var<Real> disentangle_loss(Var<Real> z_private, Var<Real> z_shared);

class Tokenizer {
 public:
  Tokenizer(ParamStore<Real>& ps, const TokenizerConfig& config, Rng& rng, const std::string& prefix = "tok");
  Tokenizer(const Tokenizer&) = delete;
  Tokenizer& operator=(const Tokenizer&) = delete;

  TokenizerPass forward(Tape<Real>& t, const Sample& s) const;

  /// Aggregates consecutive groups of f same-channel shared embeddings with a
  /// single learned query; identity when f = 1. z: [N, d/2] -> [N / f, d/2].
  Var<Real> temporal_align(Tape<Real>& t, std::size_t slot, Var<Real> z, const ModalityTokens& x) const;

  /// Anchor shared codes averaged over channels per time window: [W, D].
  Var<Real> anchor_windows(Var<Real> anchor_codes, const ModalityTokens& anchor) const;

  /// Expands each anchor window code into f query-driven rows: [W, D] -> [W f, D], unit rows.
  Var<Real> cross_modal_expand(Tape<Real>& t, std::size_t slot, Var<Real> windows) const;

  /// Decoder on concat(private code, shared code) per token.
  Var<Real> decode(Tape<Real>& t, std::size_t slot, Var<Real> private_codes, Var<Real> shared_codes) const;

  /// Code indices of an uncorrupted sample, without gradients.
  std::vector<ModalityCodes> codes(const Sample& s) const;

  /// Anchor window codes for a sample, without gradients.
  Tensor<Real> anchor_window_codes(const Sample& s) const;

  /// Mean over non-anchor modalities of the cross-modal reconstruction
  /// error. `windows` replaces the sample's own anchor window codes.
  double cross_modal_error(const Sample& s, const Tensor<Real>* windows = nullptr) const;

  const TokenizerConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }
  const Encoder& encoder(std::size_t slot) const { return mods_[slot].encoder; }
  Codebook& private_codebook(std::size_t slot) { return mods_[slot].codebook; }
  const Codebook& private_codebook(std::size_t slot) const { return mods_[slot].codebook; }
  Codebook& shared_codebook() { return shared_; }
  const Codebook& shared_codebook() const { return shared_; }
  std::size_t slot_count() const { return mods_.size(); }
  int factor(std::size_t slot) const { return mods_[slot].factor; }
  std::optional<std::size_t> anchor_slot() const { return anchor_; }
  /// Slot of modality m in this tokenizer; throws when absent.
  std::size_t slot_of(Modality m) const;

 private:
  struct Decoder {
    Linear<Real> input;
    TransformerStack<Real> stack;
    Linear<Real> head;
  };
  struct PerModality {
    Modality modality = Modality::EEG;
    int factor = 1;
    Encoder encoder;
    Linear<Real> private_proj;
    Linear<Real> shared_proj;
    const Parameter<Real>* ta_query = nullptr;  // [d/2]
    Linear<Real> ta_key, ta_value;
    const Parameter<Real>* cma_query = nullptr;  // [f, D]
    Linear<Real> cma_key, cma_value;
    Decoder decoder;
    Codebook codebook;
  };

  const ModalityTokens& tokens_for(const Sample& s, std::size_t slot) const;
  bool uses_cross_modal(std::size_t slot) const;

  TokenizerConfig config_;
  std::string prefix_;
  std::vector<PerModality> mods_;
  Codebook shared_;
  std::optional<std::size_t> anchor_;
};

struct TokenizerTrainOptions {
  OptimConfig optim{5, 1, 8, 1e-3, 1e-5, 1e-4, 0.9, 0.99, 0.0};
  int threads = 1;
  std::uint64_t seed = 0;
};

/// Per-split summary: mean losses, and code perplexities.
std::map<std::string, double> evaluate_tokenizer(const Tokenizer& tok, const std::vector<Sample>& samples,
                                                 int threads = 1);

/// Runs epochs start_epoch+1 .. optim.epochs with EMA codebook updates and
/// dead-code revival. `opt` carries the optimizer state across resumes.
/// Throws NonFiniteLoss on a NaN/Inf loss before the step is applied.
std::vector<EpochStats> train_tokenizer(Tokenizer& tok, ParamStore<Real>& ps, const Dataset& data,
                                        const TokenizerTrainOptions& options, AdamW<Real>& opt, int start_epoch = 0,
                                        const EpochCallback& on_epoch = {});

}  // namespace pomni
