#include "pomni/finetune/finetune.hpp"

#include <doctest.h>

#include <cmath>
#include <memory>

using namespace pomni;

namespace {

Tensor<Real> random_matrix(Rng& rng, Index rows, Index cols) {
  Tensor<Real> t({rows, cols});
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(rng.normal());
  return t;
}

FinetuneConfig small_config(std::vector<Modality> mods, TaskKind kind = TaskKind::MultiClass) {
  FinetuneConfig c;
  c.modalities = mods;
  c.encoders = default_encoders(mods, default_specs(), 1, 2, 16, 16);
  c.tokens = 4;
  c.width = 8;
  c.fuser_heads = 2;
  c.kind = kind;
  c.classes = kind == TaskKind::Binary ? 2 : 3;
  c.prototypes = 5;
  return c;
}

Dataset small_dataset(std::uint64_t seed, int train = 24, LabelKind kind = LabelKind::Class, int classes = 3) {
  GenSpec g;
  g.seed = seed;
  g.train = train;
  g.valid = 10;
  g.test = 10;
  g.kind = kind;
  g.classes = classes;
  return make_dataset(generate(g), g.modalities, default_specs());
}

const ModalityTokens& tokens_of(const Sample& s, Modality m) {
  for (const auto& x : s.tokens) {
    if (x.modality == m) return x;
  }
  throw std::logic_error("missing modality");
}

// Linear head by hand: weight is [out, in].
Eigen::RowVectorXd head_by_hand(ParamStore<Real>& ps, const std::string& name, const Tensor<Real>& h) {
  const Eigen::MatrixXd w = ps.get(name + ".weight").value.matrix().cast<double>();
  const Tensor<Real>& b = ps.get(name + ".bias").value;
  Eigen::RowVectorXd out = h.matrix().row(0).cast<double>() * w.transpose();
  for (Index k = 0; k < out.size(); ++k) out[k] += b[k];
  return out;
}

double smoothed_ce(const Eigen::RowVectorXd& logits, int label, double eps) {
  const double lse = std::log(logits.array().exp().sum());
  const double k = static_cast<double>(logits.size());
  double out = 0.0;
  for (Index i = 0; i < logits.size(); ++i) out -= ((i == label ? 1.0 - eps : 0.0) + eps / k) * (logits[i] - lse);
  return out;
}

}  // namespace

TEST_CASE("resampling weights are convex over input tokens") {
  const std::vector<Modality> mods{Modality::EEG, Modality::ECG};
  ParamStore<Real> ps;
  Rng rng(1);
  const ResilientModel model(ps, small_config(mods), rng);
  Rng zr(2);
  for (Index nj : {1, 3, 17}) {
    Tape<Real> t;
    Var<Real> z = t.constant(random_matrix(zr, nj, 16));
    const Tensor<Real> w = model.resample_weights(t, 1, z).value();
    REQUIRE(w.rows() == 4);
    REQUIRE(w.cols() == nj);
    CHECK(w.matrix().minCoeff() >= 0.0f);
    for (Index i = 0; i < 4; ++i) CHECK(std::abs(w.matrix().row(i).sum() - 1.0f) < 1e-5f);
    if (nj == 1) CHECK(w.matrix().isOnes(0.0f));
    const Tensor<Real> out = model.resample(t, 1, z).value();
    CHECK(out.rows() == 4);
    CHECK(out.cols() == 8);
  }
}

TEST_CASE("each modality has its own aggregator") {
  const std::vector<Modality> mods{Modality::EEG, Modality::EOG};
  ParamStore<Real> ps;
  Rng rng(3);
  const ResilientModel model(ps, small_config(mods), rng);
  Rng fr(4);
  const Tensor<Real> f = random_matrix(fr, 4, 8);
  Tape<Real> t;
  const Tensor<Real> h0 = model.fuse(t, 0, t.constant(f)).value();
  const Tensor<Real> h1 = model.fuse(t, 1, t.constant(f)).value();
  REQUIRE(h0.rows() == 1);
  REQUIRE(h0.cols() == 8);
  CHECK((h0.matrix() - h1.matrix()).cwiseAbs().maxCoeff() > 1e-4f);

  // Shifting one aggregator's bias moves only that modality's feature.
  ps.get("ft.eeg.aggregate.bias").value.array() += 1.0f;
  Tape<Real> t2;
  const Tensor<Real> g0 = model.fuse(t2, 0, t2.constant(f)).value();
  const Tensor<Real> g1 = model.fuse(t2, 1, t2.constant(f)).value();
  CHECK((g0.matrix().array() - h0.matrix().array() - 1.0f).abs().maxCoeff() < 1e-5f);
  CHECK(g1 == h1);
}

TEST_CASE("prototype alignment on fixed features") {
  const std::vector<Modality> mods{Modality::EEG, Modality::EOG};
  ParamStore<Real> ps;
  Rng rng(5);
  const ResilientModel model(ps, small_config(mods), rng);
  Tensor<Real>& u = ps.get("ft.prototypes").value;
  REQUIRE(u.rows() == 3);
  Sample s;
  s.kind = LabelKind::Class;
  s.label = 2;

  Tensor<Real> h({1, 8});
  for (Index i = 0; i < 8; ++i) h[i] = u(2, i);
  Tape<Real> t;
  CHECK(model.align_loss(t, {t.constant(h), t.constant(h)}, s).value().item() == 0.0f);

  // Unit offsets in two different directions: 1 per modality.
  Tensor<Real> a = h, b = h;
  a(0, 0) += 1.0f;
  b(0, 5) -= 1.0f;
  CHECK(model.align_loss(t, {t.constant(a), t.constant(b)}, s).value().item() == doctest::Approx(2.0));

  // Only the labelled prototype row receives gradient.
  Tape<Real> t3;
  Var<Real> loss = model.align_loss(t3, {t3.constant(a), t3.constant(b)}, s);
  t3.backward(loss);
  const auto grads = t3.param_grads();
  const auto* g = grads.find(ps.get("ft.prototypes").id);
  REQUIRE(g);
  CHECK(g->matrix().row(0).isZero(0.0f));
  CHECK(g->matrix().row(1).isZero(0.0f));
  // d/du of ||a - u||^2 + ||b - u||^2 = 2(u - a) + 2(u - b).
  CHECK((*g)(2, 0) == doctest::Approx(-2.0));
  CHECK((*g)(2, 5) == doctest::Approx(2.0));
  CHECK((*g)(2, 3) == doctest::Approx(0.0));
}

TEST_CASE("regression alignment uses the nearest prototype by cosine") {
  const std::vector<Modality> mods{Modality::EEG};
  ParamStore<Real> ps;
  Rng rng(6);
  const ResilientModel model(ps, small_config(mods, TaskKind::Regression), rng);
  const Tensor<Real>& u = ps.get("ft.prototypes").value;
  REQUIRE(u.rows() == 5);
  Rng hr(7);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor<Real> h = random_matrix(hr, 1, 8);
    // Brute force: largest cosine similarity.
    Index want = 0;
    double best = -2.0;
    for (Index k = 0; k < u.rows(); ++k) {
      double dot = 0.0, nh = 0.0, nu = 0.0;
      for (Index i = 0; i < 8; ++i) {
        dot += double(h[i]) * u(k, i);
        nh += double(h[i]) * h[i];
        nu += double(u(k, i)) * u(k, i);
      }
      const double c = dot / std::sqrt(nh * nu);
      if (c > best) {
        best = c;
        want = k;
      }
    }
    CHECK(model.nearest_prototype(h) == want);
    Sample s;
    s.kind = LabelKind::Regression;
    Tape<Real> t;
    double d2 = 0.0;
    for (Index i = 0; i < 8; ++i) d2 += std::pow(double(h[i]) - u(want, i), 2);
    CHECK(model.align_loss(t, {t.constant(h)}, s).value().item() == doctest::Approx(d2).epsilon(1e-5));
  }
}

TEST_CASE("loss weights combine the terms") {
  const Dataset data = small_dataset(8, 6);
  FinetuneConfig c = small_config(data.modalities);
  c.gamma_by_mod[Modality::ECG] = 0.25;
  ParamStore<Real> ps;
  Rng rng(9);
  const ResilientModel model(ps, c, rng);
  const Sample& s = data.train[0];
  Tape<Real> t;
  const FinetunePass pass = model.forward(t, s);
  REQUIRE(pass.features.size() == 3);
  REQUIRE(pass.loss.spec.valid());
  REQUIRE(pass.loss.align.valid());

  // Rebuild each term from the features.
  double spec = 0.0, align = 0.0;
  const Tensor<Real>& u = ps.get("ft.prototypes").value;
  for (std::size_t j = 0; j < 3; ++j) {
    const Modality m = data.modalities[j];
    const Tensor<Real>& h = pass.features[j].value();
    const double gamma = m == Modality::ECG ? 0.25 : 0.5;
    spec += gamma * smoothed_ce(head_by_hand(ps, "ft." + std::string(modality_name(m)) + ".head", h), s.label, 0.1);
    for (Index i = 0; i < 8; ++i) align += std::pow(double(h[i]) - u(s.label, i), 2);
  }
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(8);
  for (const auto& f : pass.features) mean += f.value().matrix().row(0).cast<double>() / 3.0;
  Tensor<Real> mean_t({1, 8});
  for (Index i = 0; i < 8; ++i) mean_t[i] = static_cast<Real>(mean[i]);
  const double main = smoothed_ce(head_by_hand(ps, "ft.head", mean_t), s.label, 0.1);
  CHECK(pass.loss.main.value().item() == doctest::Approx(main).epsilon(1e-4));
  CHECK(pass.loss.spec.value().item() == doctest::Approx(spec).epsilon(1e-4));
  CHECK(pass.loss.align.value().item() == doctest::Approx(align).epsilon(1e-4));
  CHECK(pass.loss.total.value().item() == doctest::Approx(main + spec + 0.1 * align).epsilon(1e-4));

  FinetuneConfig zero = c;
  zero.gamma_main = 0.0;
  zero.gamma_align = 0.0;
  zero.gamma_spec = 0.0;
  zero.gamma_by_mod.clear();
  ParamStore<Real> ps0;
  Rng r0(9);
  const ResilientModel m0(ps0, zero, r0);
  Tape<Real> t0;
  CHECK(m0.forward(t0, s).loss.total.value().item() == 0.0f);
}

TEST_CASE("disabled terms leave no parameters") {
  FinetuneConfig c = small_config({Modality::EEG, Modality::EOG});
  c.prototype_align = false;
  c.spec_loss = false;
  ParamStore<Real> ps;
  Rng rng(10);
  const ResilientModel model(ps, c, rng);
  CHECK(ps.find("ft.prototypes") == nullptr);
  CHECK(ps.find("ft.eeg.head.weight") == nullptr);
  CHECK(ps.find("ft.head.weight") != nullptr);

  const Dataset data = small_dataset(11, 4);
  FinetuneConfig c2 = c;
  c2.modalities = data.modalities;
  c2.encoders = default_encoders(data.modalities, default_specs(), 1, 2, 16, 16);
  ParamStore<Real> ps2;
  Rng r2(12);
  const ResilientModel m2(ps2, c2, r2);
  Tape<Real> t;
  const FinetunePass pass = m2.forward(t, data.train[0]);
  CHECK_FALSE(pass.loss.spec.valid());
  CHECK_FALSE(pass.loss.align.valid());
  CHECK(pass.loss.total.value().item() == pass.loss.main.value().item());
}

TEST_CASE("subset inference ignores absent modalities") {
  const Dataset data = small_dataset(13, 4);
  ParamStore<Real> ps;
  Rng rng(14);
  const ResilientModel model(ps, small_config(data.modalities), rng);
  const Sample& s = data.train[1];

  // Oracle: main head applied by hand to the mean of per-modality features.
  const std::vector<Modality> pair{Modality::EEG, Modality::ECG};
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(8);
  for (Modality m : pair) {
    Tape<Real> t;
    mean += model.feature(t, model.slot_of(m), tokens_of(s, m)).value().matrix().row(0).cast<double>();
  }
  mean /= 2.0;
  Tensor<Real> mean_t({1, 8});
  for (Index i = 0; i < 8; ++i) mean_t[i] = static_cast<Real>(mean[i]);
  const Eigen::RowVectorXd want = head_by_hand(ps, "ft.head", mean_t);
  const Tensor<Real> got = model.infer(s, pair);
  for (Index k = 0; k < 3; ++k) CHECK(got[k] == doctest::Approx(want[k]).epsilon(1e-4));

  // Corrupting EOG leaves EEG+ECG untouched; order does not matter.
  Sample noisy = s;
  for (auto& x : noisy.tokens) {
    if (x.modality == Modality::EOG) x.patches.array() = 1e3f;
  }
  CHECK(model.infer(noisy, pair) == got);
  const Tensor<Real> swapped = model.infer(s, {Modality::ECG, Modality::EEG});
  for (Index k = 0; k < 3; ++k) CHECK(swapped[k] == doctest::Approx(got[k]).epsilon(1e-5));
  CHECK_FALSE(model.infer(noisy, data.modalities) == model.infer(s, data.modalities));

  CHECK_THROWS_AS(model.infer(s, {}), std::invalid_argument);
  CHECK_THROWS_AS(model.infer(s, {Modality::EMG}), std::invalid_argument);
  Sample missing = s;
  missing.tokens.pop_back();
  CHECK_THROWS_AS(model.infer(missing, {Modality::ECG}), std::invalid_argument);
}

TEST_CASE("all subsets in a fixed order") {
  const std::vector<Modality> mods{Modality::EEG, Modality::EOG, Modality::ECG};
  const auto subsets = all_subsets(mods);
  REQUIRE(subsets.size() == 7);
  std::vector<std::string> names;
  for (const auto& s : subsets) names.push_back(subset_name(s));
  CHECK(names == std::vector<std::string>{"eeg", "eog", "ecg", "eeg+eog", "eeg+ecg", "eog+ecg", "eeg+eog+ecg"});
  CHECK(all_subsets({Modality::EEG, Modality::EOG, Modality::ECG, Modality::EMG}).size() == 15);
  CHECK_THROWS_AS(all_subsets({}), std::invalid_argument);
}

TEST_CASE("config validation") {
  FinetuneConfig c = small_config({Modality::EEG});
  CHECK_NOTHROW(c.validate());
  FinetuneConfig bad = c;
  bad.fuser_heads = 3;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.gamma_align = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.label_smoothing = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.modalities = {Modality::EEG, Modality::EEG};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(small_config({Modality::EEG}, TaskKind::Binary).outputs() == 1);
  CHECK(c.outputs() == 3);
}

TEST_CASE("frozen encoders do not move") {
  const Dataset data = small_dataset(15, 16);
  FinetuneConfig c = small_config(data.modalities);
  c.freeze_encoders = true;
  ParamStore<Real> ps;
  Rng rng(16);
  ResilientModel model(ps, c, rng);
  const Tensor<Real> enc_before = ps.get("enc.eeg.proj.weight").value;
  const Tensor<Real> head_before = ps.get("ft.head.weight").value;
  FinetuneOptions o;
  o.optim.epochs = 1;
  o.optim.warmup_epochs = 0;
  o.optim.batch = 8;
  AdamW<Real> opt(o.optim.adamw());
  BestModel best;
  train_finetune(model, ps, data, o, opt, best);
  CHECK(ps.get("enc.eeg.proj.weight").value == enc_before);
  CHECK_FALSE(ps.get("ft.head.weight").value == head_before);
}

TEST_CASE("binary and regression heads") {
  {
    const Dataset data = small_dataset(17, 16, LabelKind::Class, 2);
    CHECK(task_kind(data) == TaskKind::Binary);
    ParamStore<Real> ps;
    Rng rng(18);
    const ResilientModel model(ps, small_config(data.modalities, TaskKind::Binary), rng);
    const Sample& s = data.train[0];
    Tape<Real> t;
    const FinetunePass pass = model.forward(t, s);
    const double z = pass.output.value().item();
    const double y = s.label == 1 ? 1.0 : 0.0;
    const double want = std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    CHECK(pass.loss.main.value().item() == doctest::Approx(want).epsilon(1e-5));
    const auto r = evaluate_finetune(model, data.test, data.modalities);
    CHECK(r.values.count("auroc") == 1);
    CHECK(r.values.count("loss") == 1);
    CHECK(evaluate_finetune(model, data.test, {Modality::EOG}).values.count("loss") == 0);
  }
  {
    const Dataset data = small_dataset(19, 16, LabelKind::Regression);
    CHECK(task_kind(data) == TaskKind::Regression);
    ParamStore<Real> ps;
    Rng rng(20);
    FinetuneConfig c = small_config(data.modalities, TaskKind::Regression);
    c.target_dim = data.target_dim;
    const ResilientModel model(ps, c, rng);
    const Sample& s = data.train[0];
    Tape<Real> t;
    const FinetunePass pass = model.forward(t, s);
    double se = 0.0;
    for (Index k = 0; k < c.target_dim; ++k) se += std::pow(pass.output.value()[k] - s.target[k], 2);
    CHECK(pass.loss.main.value().item() == doctest::Approx(se / c.target_dim).epsilon(1e-5));
    CHECK(evaluate_finetune(model, data.test, data.modalities).values.count("r2") == 1);
  }
}

TEST_CASE("training keeps the best epoch and resumes exactly") {
  const Dataset data = small_dataset(21, 32);
  const FinetuneConfig c = small_config(data.modalities);
  FinetuneOptions o;
  o.optim.epochs = 4;
  o.optim.warmup_epochs = 1;
  o.optim.batch = 8;
  o.optim.peak_lr = 3e-3;
  o.seed = 22;
  auto fresh = [&](ParamStore<Real>& ps) {
    Rng rng(23);
    return std::make_unique<ResilientModel>(ps, c, rng);
  };

  ParamStore<Real> ps;
  auto model = fresh(ps);
  AdamW<Real> opt(o.optim.adamw());
  BestModel best;
  const auto full = train_finetune(*model, ps, data, o, opt, best);
  REQUIRE(full.size() == 4);
  CHECK(full.back().train.at("loss") < full.front().train.at("loss"));

  // Best epoch: highest validation kappa, then lowest validation loss.
  int want = 0;
  double top = -1e9, top_loss = 1e9;
  for (const auto& e : full) {
    const double k = e.valid.at("kappa"), l = e.valid.at("loss");
    if (k > top || (k == top && l < top_loss)) {
      top = k;
      top_loss = l;
      want = e.epoch;
    }
  }
  CHECK(best.epoch == want);
  CHECK(full.back().valid.at("best_epoch") == want);
  best.restore(ps);
  CHECK(evaluate_finetune(*model, data.valid, data.modalities).values.at("kappa") == doctest::Approx(top));

  struct Stop {};
  Checkpoint ckpt;
  {
    ParamStore<Real> ps_a;
    auto a = fresh(ps_a);
    AdamW<Real> opt_a(o.optim.adamw());
    BestModel best_a;
    CHECK_THROWS_AS(train_finetune(*a, ps_a, data, o, opt_a, best_a, 0,
                                   [&](const EpochStats& s) {
                                     if (s.epoch != 2) return;
                                     store_params(ckpt, ps_a);
                                     store_optimizer(ckpt, opt_a, s.epoch);
                                     throw Stop{};
                                   }),
                    Stop);
  }
  ParamStore<Real> ps_b;
  auto b = fresh(ps_b);
  AdamW<Real> opt_b(o.optim.adamw());
  load_params(ckpt, ps_b);
  const int done = load_optimizer(ckpt, opt_b);
  REQUIRE(done == 2);
  BestModel best_b;
  const auto rest = train_finetune(*b, ps_b, data, o, opt_b, best_b, done);
  REQUIRE(rest.size() == 2);
  CHECK(rest[0].train.at("loss") == full[2].train.at("loss"));
  CHECK(rest[1].valid.at("loss") == full[3].valid.at("loss"));
}
