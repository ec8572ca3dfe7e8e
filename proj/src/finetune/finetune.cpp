#include "pomni/finetune/finetune.hpp"
#include "pomni/train/parallel.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <stdexcept>

namespace pomni {

void FinetuneConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("finetune: " + what); };
  if (modalities.empty()) fail("no modalities");
  for (std::size_t i = 0; i < modalities.size(); ++i) {
    for (std::size_t j = i + 1; j < modalities.size(); ++j) {
      if (modalities[i] == modalities[j]) fail("duplicate modality " + std::string(modality_name(modalities[i])));
    }
    if (!encoders.empty() && !encoders.count(modalities[i])) {
      fail("no encoder config for " + std::string(modality_name(modalities[i])));
    }
  }
  if (tokens < 1 || width < 1) fail("token count and width must be >= 1");
  if (fuser_heads < 1 || width % fuser_heads != 0) fail("fuser heads must divide the width");
  if (experts < 0) fail("experts must be >= 0");
  if (kind != TaskKind::Regression && classes < 2) fail("class tasks need at least 2 classes");
  if (kind == TaskKind::Binary && classes != 2) fail("binary tasks have exactly 2 classes");
  if (kind == TaskKind::Regression && target_dim < 1) fail("regression needs target_dim >= 1");
  if (kind == TaskKind::Regression && prototypes < 1) fail("prototype count must be >= 1");
  auto non_negative = [&](double v, const std::string& name) {
    if (!(v >= 0.0)) fail(name + " must be >= 0");
  };
  non_negative(gamma_main, "gamma_main");
  non_negative(gamma_align, "gamma_align");
  non_negative(gamma_spec, "gamma_spec");
  for (const auto& [m, g] : gamma_by_mod) non_negative(g, "gamma for " + std::string(modality_name(m)));
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("label_smoothing must lie in [0, 1)");
}

Index FinetuneConfig::outputs() const {
  switch (kind) {
    case TaskKind::Binary:
      return 1;
    case TaskKind::MultiClass:
      return classes;
    case TaskKind::Regression:
      return target_dim;
  }
  return 0;
}

Index FinetuneConfig::prototype_count() const { return kind == TaskKind::Regression ? prototypes : classes; }

double FinetuneConfig::gamma(Modality m) const {
  auto it = gamma_by_mod.find(m);
  return it == gamma_by_mod.end() ? gamma_spec : it->second;
}

TaskKind task_kind(const Dataset& data) {
  if (data.kind == LabelKind::Regression) return TaskKind::Regression;
  if (data.kind != LabelKind::Class) throw std::invalid_argument("dataset has no labels to fine-tune on");
  return data.classes == 2 ? TaskKind::Binary : TaskKind::MultiClass;
}

ResilientModel::ResilientModel(ParamStore<Real>& ps, const FinetuneConfig& config, Rng& rng,
                               const std::string& prefix)
    : config_(config) {
  if (config_.encoders.empty()) config_.encoders = default_encoders(config_.modalities, default_specs());
  config_.validate();
  const Index n = config_.tokens;
  const Index d = config_.width;
  for (Modality m : config_.modalities) {
    const std::string name(modality_name(m));
    Rng r = rng.split(name);
    PerModality pm;
    pm.modality = m;
    EncoderConfig ec = config_.encoders.at(m);
    ec.modality = m;
    pm.encoder = Encoder(ps, prefix + "." + name, ec, r);
    pm.resample_head = Linear<Real>::make(ps, "ft." + name + ".resample", ec.hidden, n, true, r);
    pm.embed = Linear<Real>::make(ps, "ft." + name + ".embed", ec.hidden, d, true, r);
    // Starts close to mean pooling over the n tokens.
    Tensor<Real> w = trunc_normal<Real>(r, {n, d});
    w.array() += Real(1) / static_cast<Real>(n);
    pm.agg_weight = &ps.add("ft." + name + ".aggregate.weight", std::move(w));
    pm.agg_bias = &ps.add("ft." + name + ".aggregate.bias", Tensor<Real>::zeros({d}));
    if (config_.spec_loss) pm.spec_head = Linear<Real>::make(ps, "ft." + name + ".head", d, config_.outputs(), true, r);
    mods_.push_back(std::move(pm));
  }
  Rng r = rng.split("fuser");
  fuser_ = TransformerBlock<Real>::make(ps, "ft.fuser", d, config_.fuser_heads, 4 * d, r, config_.experts);
  main_head_ = Linear<Real>::make(ps, "ft.head", d, config_.outputs(), true, r);
  if (config_.prototype_align) {
    Tensor<Real> u({config_.prototype_count(), d});
    for (Index i = 0; i < u.size(); ++i) u[i] = static_cast<Real>(0.5 * r.normal());
    prototypes_ = &ps.add("ft.prototypes", std::move(u));
  }
  if (config_.freeze_encoders) ps.set_trainable(prefix + ".", false);
}

std::size_t ResilientModel::slot_of(Modality m) const {
  for (std::size_t i = 0; i < mods_.size(); ++i) {
    if (mods_[i].modality == m) return i;
  }
  throw std::invalid_argument("model was not trained on " + std::string(modality_name(m)));
}

Var<Real> ResilientModel::resample_weights(Tape<Real>& t, std::size_t slot, Var<Real> z) const {
  return softmax(transpose(mods_[slot].resample_head(t, z)));
}

Var<Real> ResilientModel::resample(Tape<Real>& t, std::size_t slot, Var<Real> z) const {
  return mods_[slot].embed(t, matmul(resample_weights(t, slot, z), z));
}

Var<Real> ResilientModel::fuse(Tape<Real>& t, std::size_t slot, Var<Real> f) const {
  const PerModality& pm = mods_[slot];
  Var<Real> x = fuser_(t, f);
  return reshape(add(sum_rows(mul(x, t.param(*pm.agg_weight))), t.param(*pm.agg_bias)), {1, config_.width});
}

Var<Real> ResilientModel::feature(Tape<Real>& t, std::size_t slot, const ModalityTokens& x) const {
  if (x.modality != mods_[slot].modality) throw std::invalid_argument("feature: modality does not match the slot");
  return fuse(t, slot, resample(t, slot, mods_[slot].encoder.forward(t, x)));
}

Var<Real> ResilientModel::predict(Tape<Real>& t, const std::vector<Var<Real>>& features) const {
  if (features.empty()) throw std::invalid_argument("predict: no modalities available");
  Var<Real> avg = features.size() == 1 ? features[0] : mean_rows(concat_rows(features));
  return main_head_(t, reshape(avg, {1, config_.width}));
}

Var<Real> ResilientModel::task_loss(Var<Real> output, const Sample& s, Real smoothing) const {
  switch (config_.kind) {
    case TaskKind::MultiClass: {
      const int label = s.label;
      if (label < 0 || label >= config_.classes) throw std::invalid_argument("label out of range");
      return cross_entropy(output, std::span<const int>(&label, 1), smoothing);
    }
    case TaskKind::Binary: {
      const Real y = s.label == 1 ? Real(1) : Real(0);
      return bce_with_logits(output, std::span<const Real>(&y, 1));
    }
    case TaskKind::Regression: {
      if (static_cast<Index>(s.target.size()) != config_.target_dim) {
        throw ShapeError("regression target has " + std::to_string(s.target.size()) + " values, model expects " +
                         std::to_string(config_.target_dim));
      }
      Tensor<Real> y({1, config_.target_dim});
      for (Index i = 0; i < config_.target_dim; ++i) y[i] = s.target[static_cast<std::size_t>(i)];
      return mse(output, output.tape().constant(std::move(y)));
    }
  }
  throw std::logic_error("unknown task kind");
}

Index ResilientModel::nearest_prototype(const Tensor<Real>& feature) const {
  if (!prototypes_) throw std::logic_error("prototype alignment is disabled");
  const Eigen::RowVectorXd h = feature.matrix().row(0).cast<double>();
  const Eigen::MatrixXd u = prototypes_->value.matrix().cast<double>();
  const Eigen::RowVectorXd hn = h / std::max(h.norm(), 1e-12);
  Index best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index k = 0; k < u.rows(); ++k) {
    const double d = (hn - u.row(k) / std::max(u.row(k).norm(), 1e-12)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

Var<Real> ResilientModel::align_loss(Tape<Real>& t, const std::vector<Var<Real>>& features, const Sample& s) const {
  if (!prototypes_) throw std::logic_error("prototype alignment is disabled");
  Var<Real> u = t.param(*prototypes_);
  Var<Real> total;
  for (const auto& h : features) {
    Index k = 0;
    if (config_.kind == TaskKind::Regression) {
      k = nearest_prototype(h.value());
    } else {
      if (s.label < 0 || s.label >= config_.classes) throw std::invalid_argument("label out of range");
      k = s.label;
    }
    Var<Real> target = slice_rows(u, k, 1);
    Var<Real> term = sum(square(sub(h, target)));
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

FinetunePass ResilientModel::forward(Tape<Real>& t, const Sample& s) const {
  FinetunePass pass;
  for (std::size_t j = 0; j < mods_.size(); ++j) {
    const ModalityTokens* x = nullptr;
    for (const auto& tok : s.tokens) {
      if (tok.modality == mods_[j].modality) x = &tok;
    }
    if (!x) throw std::invalid_argument("sample lacks modality " + std::string(modality_name(mods_[j].modality)));
    pass.features.push_back(feature(t, j, *x));
  }
  pass.output = predict(t, pass.features);
  FinetuneLosses& l = pass.loss;
  l.main = task_loss(pass.output, s, static_cast<Real>(config_.label_smoothing));
  l.total = scale(l.main, static_cast<Real>(config_.gamma_main));
  if (config_.spec_loss) {
    for (std::size_t j = 0; j < mods_.size(); ++j) {
      Var<Real> term = scale(task_loss(mods_[j].spec_head(t, pass.features[j]), s,
                                       static_cast<Real>(config_.label_smoothing)),
                             static_cast<Real>(config_.gamma(mods_[j].modality)));
      l.spec = l.spec.valid() ? add(l.spec, term) : term;
    }
    l.total = add(l.total, l.spec);
  }
  if (config_.prototype_align) {
    l.align = align_loss(t, pass.features, s);
    l.total = add(l.total, scale(l.align, static_cast<Real>(config_.gamma_align)));
  }
  return pass;
}

Tensor<Real> ResilientModel::infer(const Sample& s, const std::vector<Modality>& subset) const {
  if (subset.empty()) throw std::invalid_argument("infer: the modality subset is empty");
  Tape<Real> t;
  t.set_grad_enabled(false);
  std::vector<Var<Real>> features;
  for (Modality m : subset) {
    const std::size_t slot = slot_of(m);
    const ModalityTokens* x = nullptr;
    for (const auto& tok : s.tokens) {
      if (tok.modality == m) x = &tok;
    }
    if (!x) throw std::invalid_argument("infer: sample lacks modality " + std::string(modality_name(m)));
    features.push_back(feature(t, slot, *x));
  }
  return predict(t, features).value();
}

std::vector<std::vector<Modality>> all_subsets(const std::vector<Modality>& modalities) {
  const std::size_t m = modalities.size();
  if (m == 0 || m > 16) throw std::invalid_argument("all_subsets: need 1..16 modalities");
  std::vector<std::vector<Modality>> out;
  for (std::size_t size = 1; size <= m; ++size) {
    for (unsigned bits = 1; bits < (1u << m); ++bits) {
      if (static_cast<std::size_t>(std::popcount(bits)) != size) continue;
      std::vector<Modality> s;
      for (std::size_t i = 0; i < m; ++i) {
        if (bits & (1u << i)) s.push_back(modalities[i]);
      }
      out.push_back(std::move(s));
    }
  }
  // Within one size, order lexicographically by position.
  std::stable_sort(out.begin(), out.end(), [&](const auto& a, const auto& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    auto pos = [&](Modality x) { return std::find(modalities.begin(), modalities.end(), x) - modalities.begin(); };
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] != b[i]) return pos(a[i]) < pos(b[i]);
    }
    return false;
  });
  return out;
}

std::string subset_name(const std::vector<Modality>& subset) {
  std::string out;
  for (Modality m : subset) {
    if (!out.empty()) out += "+";
    out += modality_name(m);
  }
  return out;
}

MetricsReport evaluate_finetune(const ResilientModel& model, const std::vector<Sample>& samples,
                                const std::vector<Modality>& subset, int threads) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty split");
  const FinetuneConfig& c = model.config();
  const bool full = subset.size() == c.modalities.size();
  std::vector<Tensor<Real>> outputs(samples.size());
  std::vector<double> losses(samples.size(), 0.0);
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    outputs[i] = model.infer(samples[i], subset);
    if (full) {
      Tape<Real> t;
      t.set_grad_enabled(false);
      losses[i] = model.forward(t, samples[i]).loss.total.value().item();
    }
  });
  MetricsReport r;
  if (c.kind == TaskKind::Regression) {
    Eigen::MatrixXd p(samples.size(), c.target_dim), y(samples.size(), c.target_dim);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      for (Index k = 0; k < c.target_dim; ++k) {
        p(static_cast<Index>(i), k) = outputs[i][k];
        y(static_cast<Index>(i), k) = samples[i].target.at(static_cast<std::size_t>(k));
      }
    }
    r = regression_report(p, y);
  } else {
    std::vector<int> labels;
    for (const auto& s : samples) labels.push_back(s.label);
    if (c.kind == TaskKind::Binary) {
      std::vector<double> scores;
      for (const auto& o : outputs) scores.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(o[0]))));
      r = binary_report(scores, labels);
    } else {
      std::vector<int> preds;
      for (const auto& o : outputs) {
        Index best = 0;
        o.matrix().row(0).maxCoeff(&best);
        preds.push_back(static_cast<int>(best));
      }
      r = multiclass_report(preds, labels);
    }
  }
  if (full) {
    double total = 0.0;
    for (double l : losses) total += l;
    r.values["loss"] = total / static_cast<double>(samples.size());
  }
  return r;
}

void BestModel::capture(const ParamStore<Real>& ps, int at_epoch, double value, double at_loss) {
  epoch = at_epoch;
  monitor = value;
  loss = at_loss;
  values.clear();
  for (std::size_t i = 0; i < ps.size(); ++i) values.push_back(ps[i].value);
}

void BestModel::restore(ParamStore<Real>& ps) const {
  if (values.empty()) return;
  if (values.size() != ps.size()) throw std::logic_error("best snapshot does not match the parameter store");
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i].value = values[i];
}

std::vector<EpochStats> train_finetune(ResilientModel& model, ParamStore<Real>& ps, const Dataset& data,
                                       const FinetuneOptions& options, AdamW<Real>& opt, BestModel& best,
                                       int start_epoch, const EpochCallback& on_epoch) {
  const OptimConfig& oc = options.optim;
  oc.validate("finetune");
  if (data.train.empty()) throw std::invalid_argument("finetune: empty training split");
  const LrSchedule schedule = oc.schedule(data.train.size());
  const Rng root = Rng(options.seed).split("finetune");
  const auto& mods = model.config().modalities;
  std::vector<EpochStats> history;

  for (int epoch = start_epoch + 1; epoch <= oc.epochs; ++epoch) {
    const Rng er = root.split(static_cast<std::uint64_t>(epoch));
    const auto batches = epoch_batches(data.train.size(), oc.batch, er.split("order"));
    double loss_sum = 0.0, main_sum = 0.0, spec_sum = 0.0, align_sum = 0.0, grad_norm_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      const Real inv = Real(1) / static_cast<Real>(batch.size());
      std::vector<GradStore<Real>> grads(batch.size());
      std::vector<std::array<double, 4>> values(batch.size());
      parallel_for(batch.size(), options.threads, [&](std::size_t k) {
        Tape<Real> t;
        FinetunePass pass = model.forward(t, data.train[batch[k]]);
        const FinetuneLosses& l = pass.loss;
        values[k] = {l.total.value().item(), l.main.value().item(), l.spec.valid() ? l.spec.value().item() : 0.0,
                     l.align.valid() ? l.align.value().item() : 0.0};
        if (!std::isfinite(values[k][0])) return;
        t.backward(l.total, inv);
        grads[k] = t.param_grads();
      });
      GradStore<Real> total;
      for (std::size_t k = 0; k < batch.size(); ++k) {
        if (!std::isfinite(values[k][0])) {
          throw NonFiniteLoss("finetune loss is not finite at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b + 1));
        }
        loss_sum += values[k][0];
        main_sum += values[k][1];
        spec_sum += values[k][2];
        align_sum += values[k][3];
        total.accumulate(grads[k]);
      }
      grad_norm_sum += clip_grad_norm(total, oc.clip);
      opt.step(ps, total, schedule.at(opt.steps()));
    }
    EpochStats stats;
    stats.epoch = epoch;
    const double n = static_cast<double>(data.train.size());
    stats.train["loss"] = loss_sum / n;
    stats.train["main"] = main_sum / n;
    if (model.config().spec_loss) stats.train["spec"] = spec_sum / n;
    if (model.config().prototype_align) stats.train["align"] = align_sum / n;
    stats.train["grad_norm"] = grad_norm_sum / static_cast<double>(batches.size());
    stats.train["lr"] = schedule.at(std::max(0L, opt.steps() - 1));
    if (!data.valid.empty()) {
      const MetricsReport report = evaluate_finetune(model, data.valid, mods, options.threads);
      stats.valid = report.values;
      const double loss = report.values.at("loss");
      if (best.improves(report.monitor(), loss)) best.capture(ps, epoch, report.monitor(), loss);
    } else {
      best.capture(ps, epoch, 0.0, 0.0);
    }
    stats.valid["best_epoch"] = best.epoch;
    history.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return history;
}

}  // namespace pomni
