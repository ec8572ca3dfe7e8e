#include "pomni/tokenizer/tokenizer.hpp"
#include "pomni/train/parallel.hpp"

#include <cmath>

namespace pomni {

namespace {

struct LossValues {
  double total = 0, reconstruction = 0, commitment = 0, vq = 0, cross_modal = 0, disentangle = 0;

  static LossValues of(const TokenizerLosses& l) {
    LossValues v;
    v.total = l.total.value().item();
    v.reconstruction = l.reconstruction.value().item();
    v.commitment = l.commitment.value().item();
    v.vq = l.vq.value().item();
    v.cross_modal = l.cross_modal.valid() ? l.cross_modal.value().item() : 0.0;
    v.disentangle = l.disentangle.value().item();
    return v;
  }
  void add(const LossValues& o) {
    total += o.total;
    reconstruction += o.reconstruction;
    commitment += o.commitment;
    vq += o.vq;
    cross_modal += o.cross_modal;
    disentangle += o.disentangle;
  }
  void put(std::map<std::string, double>& out, double n) const {
    out["loss"] = total / n;
    out["reconstruction"] = reconstruction / n;
    out["commitment"] = commitment / n;
    out["vq"] = vq / n;
    out["cross_modal"] = cross_modal / n;
    out["disentangle"] = disentangle / n;
  }
};

/// Usage slots: one per private codebook, then the shared codebook.
std::vector<CodeUsage> empty_usage(const Tokenizer& tok) {
  std::vector<CodeUsage> u;
  const Index k = tok.config().codebook_size;
  const Index d = tok.config().code_dim;
  for (std::size_t i = 0; i <= tok.slot_count(); ++i) u.emplace_back(k, d);
  return u;
}

void record_usage(std::vector<CodeUsage>& usage, const TokenizerPass& pass) {
  for (std::size_t i = 0; i < pass.modalities.size(); ++i) {
    const auto& mp = pass.modalities[i];
    usage[i].add(mp.priv.unit.value(), mp.priv.index);
    if (mp.shared) usage.back().add(mp.shared->unit.value(), mp.shared->index);
  }
}

void put_perplexities(const Tokenizer& tok, const std::vector<CodeUsage>& usage, std::map<std::string, double>& out) {
  for (std::size_t i = 0; i < tok.slot_count(); ++i) {
    out["perplexity_" + std::string(modality_name(tok.config().modalities[i]))] = perplexity(usage[i].counts);
  }
  if (tok.config().shared_codebook) out["perplexity_shared"] = perplexity(usage.back().counts);
}

}  // namespace

std::map<std::string, double> evaluate_tokenizer(const Tokenizer& tok, const std::vector<Sample>& samples,
                                                 int threads) {
  std::map<std::string, double> out;
  if (samples.empty()) return out;
  std::vector<LossValues> values(samples.size());
  std::vector<std::vector<CodeUsage>> usage(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    Tape<Real> t;
    t.set_grad_enabled(false);
    TokenizerPass pass = tok.forward(t, samples[i]);
    values[i] = LossValues::of(pass.loss);
    usage[i] = empty_usage(tok);
    record_usage(usage[i], pass);
  });
  LossValues sum;
  std::vector<CodeUsage> merged = empty_usage(tok);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    sum.add(values[i]);
    for (std::size_t c = 0; c < merged.size(); ++c) merged[c].merge(usage[i][c]);
  }
  sum.put(out, static_cast<double>(samples.size()));
  put_perplexities(tok, merged, out);
  return out;
}

std::vector<EpochStats> train_tokenizer(Tokenizer& tok, ParamStore<Real>& ps, const Dataset& data,
                                        const TokenizerTrainOptions& options, AdamW<Real>& opt, int start_epoch,
                                        const EpochCallback& on_epoch) {
  const OptimConfig& oc = options.optim;
  oc.validate("tokenizer");
  if (data.train.empty()) throw std::invalid_argument("tokenizer: empty training split");
  const LrSchedule schedule = oc.schedule(data.train.size());
  const Rng root = Rng(options.seed).split("tokenizer");
  std::vector<EpochStats> history;

  for (int epoch = start_epoch + 1; epoch <= oc.epochs; ++epoch) {
    const Rng er = root.split(static_cast<std::uint64_t>(epoch));
    const auto batches = epoch_batches(data.train.size(), oc.batch, er.split("order"));
    LossValues epoch_sum;
    std::vector<CodeUsage> epoch_usage = empty_usage(tok);
    std::vector<Eigen::MatrixXf> candidates(epoch_usage.size());
    double grad_norm_sum = 0.0;

    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      const Real inv = Real(1) / static_cast<Real>(batch.size());
      std::vector<GradStore<Real>> grads(batch.size());
      std::vector<LossValues> values(batch.size());
      std::vector<std::vector<CodeUsage>> usage(batch.size());
      parallel_for(batch.size(), options.threads, [&](std::size_t k) {
        Tape<Real> t;
        TokenizerPass pass = tok.forward(t, data.train[batch[k]]);
        values[k] = LossValues::of(pass.loss);
        if (!std::isfinite(values[k].total)) return;
        t.backward(pass.loss.total, inv);
        grads[k] = t.param_grads();
        usage[k] = empty_usage(tok);
        record_usage(usage[k], pass);
      });
      GradStore<Real> total;
      std::vector<CodeUsage> step_usage = empty_usage(tok);
      for (std::size_t k = 0; k < batch.size(); ++k) {
        if (!std::isfinite(values[k].total)) {
          throw NonFiniteLoss("tokenizer loss is not finite at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b + 1));
        }
        epoch_sum.add(values[k]);
        total.accumulate(grads[k]);
        for (std::size_t c = 0; c < step_usage.size(); ++c) step_usage[c].merge(usage[k][c]);
      }
      grad_norm_sum += clip_grad_norm(total, oc.clip);
      opt.step(ps, total, schedule.at(opt.steps()));
      for (std::size_t i = 0; i < tok.slot_count(); ++i) {
        ema_update(tok.private_codebook(i), step_usage[i], tok.config().ema_decay, tok.config().ema_eps);
      }
      if (tok.config().shared_codebook) {
        ema_update(tok.shared_codebook(), step_usage.back(), tok.config().ema_decay, tok.config().ema_eps);
      }
      for (std::size_t c = 0; c < step_usage.size(); ++c) {
        epoch_usage[c].counts += step_usage[c].counts;
        candidates[c] = step_usage[c].recent;
      }
    }

    EpochStats stats;
    stats.epoch = epoch;
    epoch_sum.put(stats.train, static_cast<double>(data.train.size()));
    put_perplexities(tok, epoch_usage, stats.train);
    stats.train["grad_norm"] = grad_norm_sum / static_cast<double>(batches.size());
    stats.train["lr"] = schedule.at(std::max(0L, opt.steps() - 1));

    Rng revive = er.split("revive");
    int revived = 0;
    for (std::size_t i = 0; i < tok.slot_count(); ++i) {
      revived += revive_dead_codes(tok.private_codebook(i), epoch_usage[i].counts, candidates[i],
                                   tok.config().revive_after, revive);
    }
    if (tok.config().shared_codebook) {
      revived += revive_dead_codes(tok.shared_codebook(), epoch_usage.back().counts, candidates.back(),
                                   tok.config().revive_after, revive);
    }
    stats.train["revived"] = revived;
    stats.valid = evaluate_tokenizer(tok, data.valid, options.threads);
    history.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return history;
}

}  // namespace pomni
