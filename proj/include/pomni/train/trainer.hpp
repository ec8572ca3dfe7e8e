#pragma once

// Pieces shared by the three training stages.

#include "pomni/io/checkpoint.hpp"
#include "pomni/nn/layers.hpp"
#include "pomni/numerics/optim.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace pomni {

struct OptimConfig {
  int epochs = 5;
  int warmup_epochs = 1;
  int batch = 32;
  double peak_lr = 1e-3;
  double min_lr = 1e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double clip = 0.0;  // global gradient norm; 0 disables

  void validate(const std::string& stage) const;
  AdamWConfig adamw() const;
  /// Warmup and cosine decay over optimizer steps for `train_size` samples.
  LrSchedule schedule(std::size_t train_size) const;
  long steps_per_epoch(std::size_t train_size) const;
};

/// Loss became NaN or infinite.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shuffled index batches for one epoch. The last batch may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch, Rng rng);

/// Per-epoch scalar summary.
struct EpochStats {
  int epoch = 0;  // 1-based
  std::map<std::string, double> train;
  std::map<std::string, double> valid;
};

/// Called after every completed epoch, typically to log and checkpoint.
using EpochCallback = std::function<void(const EpochStats&)>;

/// Appends "epoch=.. split=.. key=value ..." lines to <base>.log and
/// epoch/split/key/value rows to <base>.tsv.
class RunLog {
 public:
  explicit RunLog(const std::filesystem::path& base);
  void write(const EpochStats& stats);
  void note(const std::string& line);

 private:
  void write_split(int epoch, const std::string& split, const std::map<std::string, double>& values);
  std::ofstream log_;
  std::ofstream tsv_;
};

/// Adam moments, step counter and completed epochs under "optim." and "train.".
void store_optimizer(Checkpoint& ckpt, const AdamW<Real>& opt, int epochs_done);
/// Restores what store_optimizer wrote; returns the completed epoch count.
int load_optimizer(const Checkpoint& ckpt, AdamW<Real>& opt);

}  // namespace pomni
