#include "pomni/pretrain/pretrain.hpp"
#include "pomni/train/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pomni {

double default_mask_ratio(Modality m) {
  return m == Modality::EOG || m == Modality::ECG ? 0.7 : 0.5;
}

int mask_count(double ratio, int n) {
  if (n < 1) throw std::invalid_argument("mask_count: need at least one patch");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("mask_count: ratio must lie in [0, 1]");
  if (n == 1) return 1;
  const int k = static_cast<int>(std::lround(ratio * n));
  return std::clamp(k, 1, n - 1);
}

std::vector<char> draw_mask(int n, double ratio, Rng rng) {
  const int k = mask_count(ratio, n);
  std::vector<char> mask(static_cast<std::size_t>(n), 0);
  const auto order = rng.permutation(static_cast<std::size_t>(n));
  for (int i = 0; i < k; ++i) mask[order[static_cast<std::size_t>(i)]] = 1;
  return mask;
}

void PretrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("pretrain: " + what); };
  if (modalities.empty()) fail("no modalities");
  if (codebook_size < 1) fail("codebook size must be >= 1");
  for (Modality m : modalities) {
    if (!encoders.empty() && !encoders.count(m)) fail("no encoder config for " + std::string(modality_name(m)));
  }
  for (const auto& [m, r] : mask_ratio) {
    if (!(r > 0.0 && r < 1.0)) fail("mask ratio for " + std::string(modality_name(m)) + " must lie in (0, 1)");
  }
}

double PretrainConfig::ratio(Modality m) const {
  auto it = mask_ratio.find(m);
  return it == mask_ratio.end() ? default_mask_ratio(m) : it->second;
}

std::vector<CodeTargets> compute_targets(const Tokenizer& tok, const std::vector<Sample>& samples, int threads) {
  std::vector<CodeTargets> out(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) { out[i] = tok.codes(samples[i]); });
  return out;
}

Var<Real> masked_cross_entropy(Var<Real> logits, std::span<const Index> targets, std::span<const char> mask) {
  if (static_cast<Index>(targets.size()) != logits.dim(0) || targets.size() != mask.size()) {
    throw ShapeError("masked_cross_entropy: " + std::to_string(logits.dim(0)) + " rows, " +
                     std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) + " mask entries");
  }
  std::vector<Index> rows;
  std::vector<int> picked;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    rows.push_back(static_cast<Index>(i));
    picked.push_back(static_cast<int>(targets[i]));
  }
  if (rows.empty()) throw std::invalid_argument("masked_cross_entropy: no masked rows");
  return cross_entropy(gather_rows(logits, std::span<const Index>(rows)), std::span<const int>(picked));
}

MaskedModel::MaskedModel(ParamStore<Real>& ps, const PretrainConfig& config, Rng& rng, const std::string& prefix)
    : config_(config) {
  if (config_.encoders.empty()) config_.encoders = default_encoders(config_.modalities, default_specs());
  config_.validate();
  for (Modality m : config_.modalities) {
    const std::string name(modality_name(m));
    Rng r = rng.split(name);
    PerModality pm;
    pm.modality = m;
    EncoderConfig ec = config_.encoders.at(m);
    ec.modality = m;
    pm.encoder = Encoder(ps, prefix + "." + name, ec, r);
    pm.mask_token = &ps.add("pre." + name + ".mask_token", trunc_normal<Real>(r, {ec.hidden}));
    pm.private_head = Linear<Real>::make(ps, "pre." + name + ".private_head", ec.hidden, config_.codebook_size, true, r);
    if (config_.shared_head) {
      pm.shared_head = Linear<Real>::make(ps, "pre." + name + ".shared_head", ec.hidden, config_.codebook_size, true, r);
    }
    mods_.push_back(std::move(pm));
  }
}

namespace {

const ModalityTokens& find_tokens(const Sample& s, Modality m) {
  for (const auto& x : s.tokens) {
    if (x.modality == m) return x;
  }
  throw std::invalid_argument("sample lacks modality " + std::string(modality_name(m)));
}

int count_correct(const Tensor<Real>& logits, std::span<const Index> targets, std::span<const char> mask) {
  int correct = 0;
  const auto m = logits.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    Index best = 0;
    m.row(r).maxCoeff(&best);
    correct += best == targets[static_cast<std::size_t>(r)];
  }
  return correct;
}

}  // namespace

std::vector<std::vector<char>> MaskedModel::draw_masks(const Sample& s, const Rng& rng) const {
  std::vector<std::vector<char>> masks;
  for (const auto& pm : mods_) {
    const ModalityTokens& x = find_tokens(s, pm.modality);
    masks.push_back(draw_mask(static_cast<int>(x.count()), config_.ratio(pm.modality), rng.split(modality_name(pm.modality))));
  }
  return masks;
}

MaskedPass MaskedModel::forward(Tape<Real>& t, const Sample& s, const CodeTargets& targets,
                                const std::vector<std::vector<char>>& masks) const {
  if (targets.size() != mods_.size() || masks.size() != mods_.size()) {
    throw std::invalid_argument("pretrain: targets and masks must cover every modality");
  }
  MaskedPass pass;
  Var<Real> total;
  for (std::size_t j = 0; j < mods_.size(); ++j) {
    const PerModality& pm = mods_[j];
    const ModalityTokens& x = find_tokens(s, pm.modality);
    const auto& mask = masks[j];
    Var<Real> z = pm.encoder.forward(t, x, mask, t.param(*pm.mask_token));
    const std::span<const Index> priv(targets[j].private_index);
    Var<Real> logits = pm.private_head(t, z);
    Var<Real> term = masked_cross_entropy(logits, priv, mask);
    pass.private_correct += count_correct(logits.value(), priv, mask);
    if (config_.shared_head) {
      const std::span<const Index> shared(targets[j].shared_index);
      Var<Real> shared_logits = pm.shared_head(t, z);
      term = add(term, masked_cross_entropy(shared_logits, shared, mask));
      pass.shared_correct += count_correct(shared_logits.value(), shared, mask);
    }
    total = total.valid() ? add(total, term) : term;
    pass.masked += static_cast<int>(std::count(mask.begin(), mask.end(), 1));
  }
  pass.loss = scale(total, Real(1) / static_cast<Real>(pass.masked));
  return pass;
}

std::size_t warm_start_encoders(ParamStore<Real>& model, const ParamStore<Real>& tokenizer,
                                const std::vector<Modality>& modalities, const std::string& prefix,
                                const std::string& tok_prefix) {
  std::size_t copied = 0;
  for (Modality m : modalities) {
    const std::string from = tok_prefix + "." + std::string(modality_name(m)) + ".encoder.";
    const std::string to = prefix + "." + std::string(modality_name(m)) + ".";
    for (std::size_t i = 0; i < tokenizer.size(); ++i) {
      const Parameter<Real>& src = tokenizer[i];
      if (src.name.rfind(from, 0) != 0) continue;
      const std::string name = to + src.name.substr(from.size());
      Parameter<Real>* dst = model.find(name);
      if (!dst) throw std::invalid_argument("warm start: model has no tensor " + name);
      if (dst->value.shape() != src.value.shape()) {
        throw ShapeError("warm start: " + name + " is " + to_string(dst->value.shape()) + " but the tokenizer has " +
                         to_string(src.value.shape()));
      }
      dst->value = src.value;
      ++copied;
    }
  }
  return copied;
}

namespace {

struct Tally {
  double loss = 0.0;
  long masked = 0, private_correct = 0, shared_correct = 0;

  void add(double l, const MaskedPass& p) {
    loss += l;
    masked += p.masked;
    private_correct += p.private_correct;
    shared_correct += p.shared_correct;
  }
  void put(std::map<std::string, double>& out, double samples, bool shared) const {
    out["loss"] = loss / samples;
    out["acc_private"] = static_cast<double>(private_correct) / static_cast<double>(masked);
    if (shared) out["acc_shared"] = static_cast<double>(shared_correct) / static_cast<double>(masked);
  }
};

}  // namespace

std::map<std::string, double> evaluate_masked(const MaskedModel& model, const std::vector<Sample>& samples,
                                              const std::vector<CodeTargets>& targets, std::uint64_t seed,
                                              int threads) {
  std::map<std::string, double> out;
  if (samples.empty()) return out;
  const Rng root = Rng(seed).split("pretrain-valid");
  std::vector<MaskedPass> passes(samples.size());
  std::vector<double> losses(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    Tape<Real> t;
    t.set_grad_enabled(false);
    passes[i] = model.forward(t, samples[i], targets[i], model.draw_masks(samples[i], root.split(i)));
    losses[i] = passes[i].loss.value().item();
    passes[i].loss = {};
  });
  Tally tally;
  for (std::size_t i = 0; i < samples.size(); ++i) tally.add(losses[i], passes[i]);
  tally.put(out, static_cast<double>(samples.size()), model.config().shared_head);
  return out;
}

std::vector<EpochStats> train_masked(MaskedModel& model, ParamStore<Real>& ps, const Dataset& data,
                                     const std::vector<CodeTargets>& train_targets,
                                     const std::vector<CodeTargets>& valid_targets, const PretrainOptions& options,
                                     AdamW<Real>& opt, int start_epoch, const EpochCallback& on_epoch) {
  const OptimConfig& oc = options.optim;
  oc.validate("pretrain");
  if (data.train.empty()) throw std::invalid_argument("pretrain: empty training split");
  if (train_targets.size() != data.train.size() || valid_targets.size() != data.valid.size()) {
    throw std::invalid_argument("pretrain: targets do not match the dataset splits");
  }
  const LrSchedule schedule = oc.schedule(data.train.size());
  const Rng root = Rng(options.seed).split("pretrain");
  std::vector<EpochStats> history;

  for (int epoch = start_epoch + 1; epoch <= oc.epochs; ++epoch) {
    const Rng er = root.split(static_cast<std::uint64_t>(epoch));
    const auto batches = epoch_batches(data.train.size(), oc.batch, er.split("order"));
    const Rng mask_rng = er.split("mask");
    Tally tally;
    double grad_norm_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      const Real inv = Real(1) / static_cast<Real>(batch.size());
      std::vector<GradStore<Real>> grads(batch.size());
      std::vector<MaskedPass> passes(batch.size());
      std::vector<double> losses(batch.size());
      parallel_for(batch.size(), options.threads, [&](std::size_t k) {
        const std::size_t i = batch[k];
        Tape<Real> t;
        MaskedPass p = model.forward(t, data.train[i], train_targets[i],
                                     model.draw_masks(data.train[i], mask_rng.split(b).split(k)));
        losses[k] = p.loss.value().item();
        if (std::isfinite(losses[k])) {
          t.backward(p.loss, inv);
          grads[k] = t.param_grads();
        }
        p.loss = {};
        passes[k] = p;
      });
      GradStore<Real> total;
      for (std::size_t k = 0; k < batch.size(); ++k) {
        if (!std::isfinite(losses[k])) {
          throw NonFiniteLoss("pretrain loss is not finite at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b + 1));
        }
        tally.add(losses[k], passes[k]);
        total.accumulate(grads[k]);
      }
      grad_norm_sum += clip_grad_norm(total, oc.clip);
      opt.step(ps, total, schedule.at(opt.steps()));
    }
    EpochStats stats;
    stats.epoch = epoch;
    tally.put(stats.train, static_cast<double>(data.train.size()), model.config().shared_head);
    stats.train["grad_norm"] = grad_norm_sum / static_cast<double>(batches.size());
    stats.train["lr"] = schedule.at(std::max(0L, opt.steps() - 1));
    stats.valid = evaluate_masked(model, data.valid, valid_targets, options.seed, options.threads);
    history.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return history;
}

}  // namespace pomni
