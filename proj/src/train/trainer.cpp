#include "pomni/train/trainer.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace pomni {

void OptimConfig::validate(const std::string& stage) const {
  auto fail = [&](const std::string& what) { throw std::invalid_argument(stage + ": " + what); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs) fail("warmup_epochs must lie in [0, epochs]");
  if (batch < 1) fail("batch must be >= 1");
  if (!(peak_lr > 0.0) || !(min_lr >= 0.0) || min_lr > peak_lr) fail("need 0 <= min_lr <= peak_lr, peak_lr > 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(clip >= 0.0)) fail("clip must be >= 0");
}

AdamWConfig OptimConfig::adamw() const {
  AdamWConfig c;
  c.beta1 = beta1;
  c.beta2 = beta2;
  c.weight_decay = weight_decay;
  return c;
}

long OptimConfig::steps_per_epoch(std::size_t train_size) const {
  return static_cast<long>((train_size + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
}

LrSchedule OptimConfig::schedule(std::size_t train_size) const {
  LrSchedule s;
  s.peak_lr = peak_lr;
  s.min_lr = min_lr;
  const long per_epoch = std::max(1L, steps_per_epoch(train_size));
  s.warmup_steps = per_epoch * warmup_epochs;
  s.total_steps = per_epoch * epochs;
  return s;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch, Rng rng) {
  const auto order = rng.permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(n, i + static_cast<std::size_t>(batch));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

RunLog::RunLog(const std::filesystem::path& base) {
  if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
  auto with = [&](const char* ext) {
    auto p = base;
    p += ext;
    return p;
  };
  const bool fresh = !std::filesystem::exists(with(".tsv"));
  log_.open(with(".log"), std::ios::app);
  tsv_.open(with(".tsv"), std::ios::app);
  if (!log_ || !tsv_) throw std::runtime_error("cannot open log " + base.string());
  if (fresh) tsv_ << "epoch\tsplit\tkey\tvalue\n";
}

void RunLog::write_split(int epoch, const std::string& split, const std::map<std::string, double>& values) {
  if (values.empty()) return;
  std::ostringstream line;
  line << std::setprecision(9) << "epoch=" << epoch << " split=" << split;
  for (const auto& [k, v] : values) {
    line << ' ' << k << '=' << v;
    tsv_ << std::setprecision(17) << epoch << '\t' << split << '\t' << k << '\t' << v << '\n';
  }
  log_ << line.str() << '\n';
}

void RunLog::write(const EpochStats& stats) {
  write_split(stats.epoch, "train", stats.train);
  write_split(stats.epoch, "valid", stats.valid);
  log_.flush();
  tsv_.flush();
}

void RunLog::note(const std::string& line) {
  log_ << "# " << line << '\n';
  log_.flush();
}

void store_optimizer(Checkpoint& ckpt, const AdamW<Real>& opt, int epochs_done) {
  for (const auto& [name, m] : opt.moments()) {
    ckpt.put("optim.first/" + name, m.first);
    ckpt.put("optim.second/" + name, m.second);
  }
  // Counts stay far below 2^24, so float holds them exactly.
  ckpt.put("optim.steps", Tensor<float>::scalar(static_cast<float>(opt.steps())));
  ckpt.put("train.epochs_done", Tensor<float>::scalar(static_cast<float>(epochs_done)));
}

int load_optimizer(const Checkpoint& ckpt, AdamW<Real>& opt) {
  const auto* steps = ckpt.find("optim.steps");
  const auto* done = ckpt.find("train.epochs_done");
  if (!steps || !done) throw CheckpointError("checkpoint has no optimizer state to resume from");
  opt.moments().clear();
  const std::string first = "optim.first/";
  for (const auto& [name, value] : ckpt.tensors) {
    if (name.rfind(first, 0) != 0) continue;
    const std::string param = name.substr(first.size());
    const auto* second = ckpt.find("optim.second/" + param);
    if (!second) throw CheckpointError("checkpoint lacks optim.second/" + param);
    opt.moments()[param] = {value, *second};
  }
  opt.set_steps(static_cast<long>(steps->item()));
  return static_cast<int>(done->item());
}

}  // namespace pomni
