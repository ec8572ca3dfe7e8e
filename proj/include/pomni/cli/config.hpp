#pragma once

// Run configuration: flat "key = value" lines under [section] headers.
// Every key is known in advance; anything else is rejected.

#include "pomni/finetune/finetune.hpp"
#include "pomni/pretrain/pretrain.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace pomni {

/// Bad config text, unknown key or out-of-range value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelDims {
  Index eeg_hidden = 64;
  Index other_hidden = 32;
  Index encoder_layers = 2;
  Index encoder_heads = 4;
  Index codebook_size = 128;  // K
  Index code_dim = 16;        // D
  Index decoder_hidden = 32;
  Index decoder_layers = 3;
  Index decoder_heads = 4;
  Index tokens = 16;  // n
  Index width = 32;   // d
  Index fuser_heads = 4;
  Index prototypes = 16;
  Index experts = 4;  // used with moe_fuser
};

struct RunFlags {
  bool freeze_encoders = false;
  bool warm_start_encoders = false;
  bool moe_fuser = false;
  bool no_cross_modal = false;
  bool no_disentangle = false;
  bool no_shared_codebook = false;
  bool no_prototype_align = false;
  bool no_spec_loss = false;
};

struct RunConfig {
  std::string stage;  // informational; set by the command that wrote the snapshot
  std::filesystem::path data;  // manifest; empty means <out>/manifest.tsv
  std::vector<Modality> modalities{Modality::EEG, Modality::EOG, Modality::ECG};
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  int threads = 0;  // 0: POMNI_THREADS, else 1

  GenSpec gen;
  ModelDims model;

  OptimConfig tokenizer_optim = TokenizerTrainOptions{}.optim;
  double alpha1 = 1.0;
  double alpha2 = 0.1;
  double ema_decay = 0.99;

  OptimConfig pretrain_optim = PretrainOptions{}.optim;
  std::map<Modality, double> mask_ratio;  // default_mask_ratio when absent

  OptimConfig finetune_optim = FinetuneOptions{}.optim;
  double gamma_main = 1.0;
  double gamma_align = 0.1;
  double gamma_spec = 0.5;
  std::map<Modality, double> gamma_by_mod;
  double label_smoothing = 0.1;
  std::string task = "auto";  // auto, binary, multiclass, regression
  int classes = 0;            // 0: from the data
  int target_dim = 0;         // 0: from the data

  RunFlags flags;

  /// Cross-field checks on top of the per-key ranges.
  void validate() const;

  std::filesystem::path manifest() const;
  int resolved_threads() const;

  TokenizerConfig tokenizer_config() const;
  PretrainConfig pretrain_config() const;
  /// Task fields must be resolved (see resolve_task).
  FinetuneConfig finetune_config() const;
  /// Fills task, classes and target_dim from a dataset, or checks them.
  void resolve_task(const Dataset& data);
  TaskKind task_kind() const;

  TokenizerTrainOptions tokenizer_options() const;
  PretrainOptions pretrain_options() const;
  FinetuneOptions finetune_options() const;
};

/// Applies config text on top of `base`. Unknown sections or keys, keys
/// outside a section, and malformed or out-of-range values throw ConfigError.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

/// Every key, in a fixed order. parse_config(to_ini(c)) reproduces c.
std::string to_ini(const RunConfig& config);

/// "eeg,ecg" -> modalities; ConfigError on unknown or repeated tokens.
std::vector<Modality> parse_modality_list(const std::string& text);

}  // namespace pomni
