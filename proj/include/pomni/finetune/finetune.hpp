#pragma once

// Stage 3: per-modality encoders, resampling to a common token grid, a
// shared fuser block with per-modality aggregators, prototype alignment and
// prediction from any non-empty subset of modalities.

#include "pomni/datagen/dataset.hpp"
#include "pomni/metrics/metrics.hpp"
#include "pomni/train/trainer.hpp"

#include <limits>
#include <map>
#include <vector>

namespace pomni {

struct FinetuneConfig {
  std::vector<Modality> modalities{Modality::EEG, Modality::EOG, Modality::ECG};
  std::map<Modality, EncoderConfig> encoders;  // default_encoders when empty
  Index tokens = 16;  // common length n
  Index width = 32;   // common width d
  Index fuser_heads = 4;
  Index experts = 0;  // > 0 swaps the fuser feed-forward for a top-1 mixture
  TaskKind kind = TaskKind::MultiClass;
  int classes = 3;
  int target_dim = 1;
  Index prototypes = 16;  // regression only; class tasks use one per class
  double gamma_main = 1.0;
  double gamma_align = 0.1;
  double gamma_spec = 0.5;                  // default per-modality weight
  std::map<Modality, double> gamma_by_mod;  // overrides gamma_spec
  double label_smoothing = 0.1;
  bool prototype_align = true;
  bool spec_loss = true;
  bool freeze_encoders = false;

  void validate() const;
  Index outputs() const;  // logits or regression width
  Index prototype_count() const;
  double gamma(Modality m) const;
};

/// Task kind from a dataset: two classes are binary.
TaskKind task_kind(const Dataset& data);

struct FinetuneLosses {
  Var<Real> total, main, spec, align;  // spec/align invalid when disabled
};

struct FinetunePass {
  std::vector<Var<Real>> features;  // h per modality, [1, d]
  Var<Real> output;                 // main head on the mean feature, [1, outputs]
  FinetuneLosses loss;
};

class ResilientModel {
 public:
  /// Encoders live under "<prefix>.<mod>"; everything else under "ft.".
  ResilientModel(ParamStore<Real>& ps, const FinetuneConfig& config, Rng& rng, const std::string& prefix = "enc");
  ResilientModel(const ResilientModel&) = delete;
  ResilientModel& operator=(const ResilientModel&) = delete;

  /// z: [n_j, d_j] -> [n, d]. Each of the n slots is a softmax-weighted
  /// average of the input tokens (weights over n_j), then mapped to width d.
  Var<Real> resample(Tape<Real>& t, std::size_t slot, Var<Real> z) const;
  /// Softmax weights used by resample, [n, n_j].
  Var<Real> resample_weights(Tape<Real>& t, std::size_t slot, Var<Real> z) const;
  /// Shared block over the n tokens, then the modality's full-length
  /// aggregator: [n, d] -> [1, d].
  Var<Real> fuse(Tape<Real>& t, std::size_t slot, Var<Real> f) const;
  /// Encoder, resample and fuse for one modality.
  Var<Real> feature(Tape<Real>& t, std::size_t slot, const ModalityTokens& x) const;
  /// Main head on the mean of the given features.
  Var<Real> predict(Tape<Real>& t, const std::vector<Var<Real>>& features) const;

  /// Training pass with every modality present.
  FinetunePass forward(Tape<Real>& t, const Sample& s) const;
  /// Squared distance of each feature to its prototype, summed over modalities.
  Var<Real> align_loss(Tape<Real>& t, const std::vector<Var<Real>>& features, const Sample& s) const;
  /// Nearest prototype by cosine (l2-normalized rows); ties to the lower index.
  Index nearest_prototype(const Tensor<Real>& feature) const;

  /// Main output from the modalities in `subset` only. Throws
  /// std::invalid_argument for an empty subset or one the model or sample lacks.
  Tensor<Real> infer(const Sample& s, const std::vector<Modality>& subset) const;

  const FinetuneConfig& config() const { return config_; }
  std::size_t slot_of(Modality m) const;

 private:
  struct PerModality {
    Modality modality = Modality::EEG;
    Encoder encoder;
    Linear<Real> resample_head;  // d_j -> n
    Linear<Real> embed;          // d_j -> d
    const Parameter<Real>* agg_weight = nullptr;  // [n, d]
    const Parameter<Real>* agg_bias = nullptr;    // [d]
    Linear<Real> spec_head;
  };
  Var<Real> task_loss(Var<Real> output, const Sample& s, Real smoothing) const;

  FinetuneConfig config_;
  std::vector<PerModality> mods_;
  TransformerBlock<Real> fuser_;
  Linear<Real> main_head_;
  const Parameter<Real>* prototypes_ = nullptr;  // [P, d]
};

/// All 2^M - 1 non-empty subsets in a fixed order: by size, then by position.
std::vector<std::vector<Modality>> all_subsets(const std::vector<Modality>& modalities);
std::string subset_name(const std::vector<Modality>& subset);  // "eeg+ecg"

/// Main-task metrics on a split using only `subset`. Adds "loss" (full
/// training loss) when the subset covers every modality.
MetricsReport evaluate_finetune(const ResilientModel& model, const std::vector<Sample>& samples,
                                const std::vector<Modality>& subset, int threads = 1);

struct FinetuneOptions {
  OptimConfig optim{20, 2, 16, 1e-3, 1e-5, 1e-4, 0.9, 0.99, 3.0};
  int threads = 1;
  std::uint64_t seed = 0;
};

/// Best validation snapshot of every parameter. Ties on the monitor go to
/// the lower validation loss.
struct BestModel {
  int epoch = 0;
  double monitor = -std::numeric_limits<double>::infinity();
  double loss = std::numeric_limits<double>::infinity();
  std::vector<Tensor<Real>> values;

  bool improves(double value, double at_loss) const { return value > monitor || (value == monitor && at_loss < loss); }
  void capture(const ParamStore<Real>& ps, int at_epoch, double value, double at_loss);
  void restore(ParamStore<Real>& ps) const;
};

/// Runs epochs start_epoch+1 .. optim.epochs and tracks the best validation
/// monitor metric in `best` before each callback.
std::vector<EpochStats> train_finetune(ResilientModel& model, ParamStore<Real>& ps, const Dataset& data,
                                       const FinetuneOptions& options, AdamW<Real>& opt, BestModel& best,
                                       int start_epoch = 0, const EpochCallback& on_epoch = {});

}  // namespace pomni
