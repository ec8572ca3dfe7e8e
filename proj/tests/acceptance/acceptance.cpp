// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Criteria 7-10 share one full-size pipeline run; 13 and 14 use a tiny one.

#include "pomni/cli/cli.hpp"
#include "pomni/cli/config.hpp"
#include "pomni/datagen/generator.hpp"
#include "pomni/datagen/recording.hpp"
#include "pomni/io/checkpoint.hpp"
#include "pomni/metrics/metrics.hpp"
#include "pomni/sigproc/sigproc.hpp"
#include "support/op_cases.hpp"
#include "support/spectral.hpp"

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>

using namespace pomni;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

double cpu_seconds(std::clock_t since) { return static_cast<double>(std::clock() - since) / CLOCKS_PER_SEC; }

// ---------------------------------------------------------------------------
// CLI plumbing

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* const kTinyConfig = R"(
[gen]
train = 24
valid = 8
test = 8
per_subject = 4

[model]
eeg_hidden = 16
other_hidden = 16
encoder_layers = 1
encoder_heads = 2
codebook_size = 8
code_dim = 4
decoder_hidden = 8
decoder_layers = 1
decoder_heads = 2
tokens = 4
width = 8
fuser_heads = 2
prototypes = 4

[tokenizer]
epochs = 2
warmup_epochs = 0
batch = 8

[pretrain]
epochs = 2
warmup_epochs = 0
batch = 8

[finetune]
epochs = 3
warmup_epochs = 0
batch = 8
)";

// Five stages in `out`; returns the first failing stage or an empty string.
std::string run_stages(const std::vector<std::string>& base, bool evaluate = true) {
  const std::vector<std::vector<std::string>> stages{
      {"gen-data"}, {"train-tokenizer"}, {"pretrain"}, {"finetune"}, {"evaluate", "--all-subsets"}};
  for (std::size_t i = 0; i < stages.size() - (evaluate ? 0 : 1); ++i) {
    auto args = base;
    args.insert(args.end(), stages[i].begin(), stages[i].end());
    const CliResult r = cli(args);
    if (r.code != kExitOk) return stages[i][0] + " exited " + std::to_string(r.code) + ": " + r.err;
  }
  return {};
}

// ---------------------------------------------------------------------------
// Small model helpers

Tensor<Real> random_matrix(Rng& rng, Index rows, Index cols) {
  Tensor<Real> t({rows, cols});
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(rng.normal());
  return t;
}

ModalityTokens random_tokens(Rng& rng, Modality m, int channels, int per_channel) {
  const ModalitySpec spec = default_spec(m);
  ModalityTokens x;
  x.modality = m;
  x.channels = channels;
  x.per_channel = per_channel;
  const Index n = static_cast<Index>(channels) * per_channel;
  x.patches = random_matrix(rng, n, spec.patch);
  x.targets = random_matrix(rng, n, target_width(m, spec.patch));
  for (int c = 0; c < channels; ++c) {
    for (int t = 0; t < per_channel; ++t) {
      x.channel.push_back(c);
      x.time.push_back(t);
    }
  }
  return x;
}

const std::vector<Modality> kThree{Modality::EEG, Modality::EOG, Modality::ECG};
const std::vector<Modality> kFour{Modality::EEG, Modality::EOG, Modality::ECG, Modality::EMG};

TokenizerConfig small_tokenizer(const std::vector<Modality>& mods) {
  TokenizerConfig c;
  c.modalities = mods;
  c.encoders = default_encoders(mods, c.specs, 1, 2, 16, 16);
  c.codebook_size = 16;
  c.code_dim = 8;
  c.decoder_hidden = 16;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  return c;
}

FinetuneConfig small_finetune(const std::vector<Modality>& mods) {
  FinetuneConfig c;
  c.modalities = mods;
  c.encoders = default_encoders(mods, default_specs(), 1, 2, 16, 16);
  c.tokens = 4;
  c.width = 8;
  c.fuser_heads = 2;
  c.classes = 3;
  return c;
}

const Dataset& probe_data() {
  static const Dataset data = [] {
    GenSpec g;
    g.seed = 31;
    g.train = 10;
    g.valid = 10;
    g.test = 10;
    return make_dataset(generate(g), g.modalities, default_specs());
  }();
  return data;
}

bool any_nonzero(const GradStore<Real>& g, const Parameter<Real>& p) {
  const auto* t = g.find(p.id);
  return t && t->array().abs().maxCoeff() > 0.0f;
}

double grad_at(const GradStore<Real>& g, const Parameter<Real>& p, Index i) {
  const auto* t = g.find(p.id);
  return t ? static_cast<double>((*t)[i]) : 0.0;
}

// Largest |g_a - g_b| over every parameter of store a, matched by name in b.
double grad_gap(const ParamStore<Real>& a, const GradStore<Real>& ga, ParamStore<Real>& b,
                const GradStore<Real>& gb) {
  double gap = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Parameter<Real>& p = a[i];
    const Parameter<Real>& q = b.get(p.name);
    for (Index k = 0; k < p.value.size(); ++k) gap = std::max(gap, std::abs(grad_at(ga, p, k) - grad_at(gb, q, k)));
  }
  return gap;
}

void copy_params(const ParamStore<Real>& from, ParamStore<Real>& to) {
  for (std::size_t i = 0; i < from.size(); ++i) {
    Parameter<Real>& q = to.get(from[i].name);
    if (q.value.shape() != from[i].value.shape()) throw ShapeError("probe copy: " + from[i].name);
    q.value = from[i].value;
  }
}

std::set<std::string> names(const ParamStore<Real>& ps) {
  std::set<std::string> out;
  for (std::size_t i = 0; i < ps.size(); ++i) out.insert(ps[i].name);
  return out;
}

// Flagged model vs a full model whose weight on the term is zero (same
// values on shared parameters): gradients on every shared parameter must be
// exactly equal. With the usual weight they must differ, so the probe can see
// the term. `dedicated` recognises parameters that belong to the term only.
template <typename Model, typename Config, typename Grads>
Outcome ablation_probe(const Config& flagged, const Config& zeroed, const Config& weighted, Grads grads,
                       const std::function<bool(const std::string&)>& dedicated, bool expect_dedicated) {
  ParamStore<Real> pf, pz, pw;
  Rng r1(41), r2(42), r3(43);
  const Model mf(pf, flagged, r1);
  const Model mz(pz, zeroed, r2);
  const Model mw(pw, weighted, r3);
  copy_params(pf, pz);
  copy_params(pz, pw);

  const auto fnames = names(pf);
  int extra = 0;
  for (const auto& n : names(pz)) {
    if (fnames.count(n)) continue;
    if (!dedicated(n)) return {false, "full model has unexpected extra parameter " + n};
    ++extra;
  }
  for (const auto& n : fnames) {
    if (dedicated(n)) return {false, "flagged model still has " + n};
  }
  if (expect_dedicated && extra == 0) return {false, "no dedicated parameters found"};

  const double off = grad_gap(pf, grads(mf), pz, grads(mz));
  const double on = grad_gap(pf, grads(mf), pw, grads(mw));
  const bool ok = off == 0.0 && on > 0.0;
  return {ok, "gap vs zero weight " + fmt(off) + ", vs usual weight " + fmt(on) + ", " + std::to_string(extra) +
                  " dedicated tensors dropped"};
}

GradStore<Real> tokenizer_grads(const Tokenizer& tok) {
  Tape<Real> t;
  TokenizerPass pass = tok.forward(t, probe_data().train[0]);
  t.backward(pass.loss.total);
  return t.param_grads();
}

GradStore<Real> finetune_grads(const ResilientModel& model) {
  Tape<Real> t;
  FinetunePass pass = model.forward(t, probe_data().train[0]);
  t.backward(pass.loss.total);
  return t.param_grads();
}

bool contains(const std::string& s, const char* part) { return s.find(part) != std::string::npos; }

// ---------------------------------------------------------------------------
// Criteria

Outcome gradient_suite() {
  const std::clock_t t0 = std::clock();
  double worst = 0.0;
  std::string worst_name;
  const auto cases = testing::op_cases();
  for (const auto& c : cases) {
    const double e = testing::run_case(c, 2024, 20).max_rel_error;
    if (e > worst || !std::isfinite(e)) {
      worst = e;
      worst_name = c.name;
    }
  }
  const double cpu = cpu_seconds(t0);
  return {worst <= 1e-4 && cpu < 60.0, std::to_string(cases.size()) + " ops x 20 points, worst rel " + fmt(worst) +
                                           " (" + worst_name + "), " + fmt(cpu, 3) + " s CPU"};
}

Outcome vq_oracle() {
  Rng rng(11);
  const Tensor<Real> codes = random_matrix(rng, 64, 16);
  const Tensor<Real> emb = random_matrix(rng, 1000, 16);
  const auto got = nearest_codes(emb, codes);
  int mismatches = 0;
  for (Index r = 0; r < 1000; ++r) {
    Eigen::VectorXd a = emb.matrix().row(r).cast<double>().transpose();
    a.normalize();
    double best = std::numeric_limits<double>::infinity();
    Index arg = -1;
    for (Index k = 0; k < 64; ++k) {
      const double d = (a - codes.matrix().row(k).cast<double>().transpose().normalized()).squaredNorm();
      if (d < best) {
        best = d;
        arg = k;
      }
    }
    mismatches += got[static_cast<std::size_t>(r)] != arg;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over 1000 vectors, K=64"};
}

Outcome ema_fixed_point() {
  ParamStore<Real> ps;
  Rng rng(3);
  Codebook cb = Codebook::make(ps, "cb", 4, 8, rng);
  Eigen::VectorXd centre = Eigen::VectorXd::Zero(8);
  centre[0] = 1.0;
  centre[3] = 0.5;
  Tensor<Real> batch({32, 8});
  for (Index r = 0; r < 32; ++r) {
    Eigen::VectorXd v = centre;
    for (Index c = 0; c < 8; ++c) v[c] += 0.2 * rng.normal();
    batch.matrix().row(r) = (v / v.norm()).cast<Real>().transpose();
  }
  const Index target = nearest_codes(batch, cb.codes->value)[0];
  const std::vector<Index> same(32, target);
  Eigen::VectorXd mean = batch.matrix().cast<double>().colwise().sum().transpose();
  mean.normalize();
  for (int step = 0; step < 500; ++step) {
    CodeUsage u(4, 8);
    u.add(batch, same);
    ema_update(cb, u, 0.99, 1e-5);
  }
  const double dist = (cb.codes->value.matrix().row(target).cast<double>().transpose() - mean).norm();
  return {dist < 1e-3, "distance to normalized cluster mean " + fmt(dist) + " after 500 updates"};
}

Outcome gradient_paths() {
  ParamStore<Real> ps;
  Rng rng(12);
  const Tokenizer tok(ps, small_tokenizer(kThree), rng);
  const Sample& s = probe_data().train[0];
  auto grads_of = [&](auto pick) {
    Tape<Real> t;
    TokenizerPass pass = tok.forward(t, s);
    t.backward(pick(pass.loss));
    return t.param_grads();
  };
  const auto rec = grads_of([](const TokenizerLosses& l) { return l.reconstruction; });
  const auto vq = grads_of([](const TokenizerLosses& l) { return l.vq; });
  int encoder = 0, reached = 0, leaked = 0, codebook_touched = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Parameter<Real>& p = ps[i];
    if (contains(p.name, ".encoder.")) {
      ++encoder;
      reached += any_nonzero(rec, p);
      leaked += any_nonzero(vq, p);
    }
    if (contains(p.name, "codebook")) codebook_touched += any_nonzero(rec, p) + any_nonzero(vq, p);
  }
  const bool ok = encoder > 0 && reached > 0 && leaked == 0 && codebook_touched == 0;
  return {ok, "reconstruction reaches " + std::to_string(reached) + "/" + std::to_string(encoder) +
                  " encoder tensors; VQ path reaches " + std::to_string(leaked) + "; codebook grads " +
                  std::to_string(codebook_touched)};
}

Outcome alignment_laws() {
  ParamStore<Real> ps;
  Rng rng(5);
  const TokenizerConfig c = small_tokenizer(kFour);
  const Tokenizer tok(ps, c, rng);
  const std::vector<int> want{1, 2, 5, 5};
  int bad = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& s = c.specs.at(c.modalities[i]);
    const auto& e = c.specs.at(Modality::EEG);
    // patches per anchor patch = (rate_j * patch_eeg) / (rate_eeg * patch_j)
    bad += tok.factor(i) != want[i] || tok.factor(i) * s.patch * e.rate != s.rate * e.patch;
  }
  Rng data(7);
  int count_errors = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto slot = static_cast<std::size_t>(data.below(4));
    const int f = tok.factor(slot);
    const int windows = 1 + static_cast<int>(data.below(8));
    const ModalityTokens x = random_tokens(data, c.modalities[slot], 1 + static_cast<int>(data.below(3)), windows * f);
    Tape<Real> t;
    const auto aligned = tok.temporal_align(t, slot, t.constant(random_matrix(data, x.count(), 8)), x);
    count_errors += aligned.dim(0) != x.count() / f;
    if (slot == 0) {
      count_errors += tok.anchor_windows(t.constant(random_matrix(data, x.count(), c.code_dim)), x).dim(0) != windows;
      continue;
    }
    const auto expanded = tok.cross_modal_expand(t, slot, t.constant(random_matrix(data, windows, c.code_dim)));
    count_errors += expanded.dim(0) != static_cast<Index>(f) * windows;
  }
  return {bad == 0 && count_errors == 0, "factors eeg/eog/ecg/emg = " + std::to_string(tok.factor(0)) + "/" +
                                             std::to_string(tok.factor(1)) + "/" + std::to_string(tok.factor(2)) +
                                             "/" + std::to_string(tok.factor(3)) + "; " +
                                             std::to_string(count_errors) + " count errors over 100 cases"};
}

Outcome masked_locality() {
  Rng rng(1);
  int changed = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.below(30));
    const Index k = 2 + static_cast<Index>(rng.below(20));
    const Tensor<Real> logits = random_matrix(rng, n, k);
    std::vector<Index> targets;
    for (Index i = 0; i < n; ++i) targets.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(k))));
    const auto mask = draw_mask(static_cast<int>(n), rng.uniform(), rng.split(static_cast<std::uint64_t>(trial)));
    Tensor<Real> poked = logits;
    auto poked_targets = targets;
    for (Index i = 0; i < n; ++i) {
      if (mask[static_cast<std::size_t>(i)]) continue;
      for (Index j = 0; j < k; ++j) poked(i, j) = static_cast<Real>(50.0 * rng.normal());
      poked_targets[static_cast<std::size_t>(i)] = (targets[static_cast<std::size_t>(i)] + 1) % k;
    }
    Tape<Real> t;
    changed += masked_cross_entropy(t.constant(logits), targets, mask).value().item() !=
               masked_cross_entropy(t.constant(poked), poked_targets, mask).value().item();
  }

  // Same through the full model: corrupt targets at unmasked patches only.
  const Dataset& data = probe_data();
  PretrainConfig pc;
  pc.modalities = data.modalities;
  pc.encoders = default_encoders(data.modalities, default_specs(), 1, 2, 16, 16);
  pc.codebook_size = 8;
  ParamStore<Real> ps;
  Rng init(3);
  const MaskedModel model(ps, pc, init);
  for (int trial = 0; trial < 5; ++trial) {
    const Sample& s = data.train[static_cast<std::size_t>(trial)];
    CodeTargets targets;
    for (const auto& x : s.tokens) {
      ModalityCodes c;
      for (Index i = 0; i < x.count(); ++i) {
        c.private_index.push_back(static_cast<Index>(rng.below(8)));
        c.shared_index.push_back(static_cast<Index>(rng.below(8)));
      }
      targets.push_back(std::move(c));
    }
    const auto masks = model.draw_masks(s, Rng(static_cast<std::uint64_t>(100 + trial)));
    CodeTargets poked = targets;
    for (std::size_t j = 0; j < poked.size(); ++j) {
      for (std::size_t i = 0; i < masks[j].size(); ++i) {
        if (masks[j][i]) continue;
        poked[j].private_index[i] = (poked[j].private_index[i] + 1) % 8;
        poked[j].shared_index[i] = (poked[j].shared_index[i] + 5) % 8;
      }
    }
    Tape<Real> t1, t2;
    changed += model.forward(t1, s, targets, masks).loss.value().item() !=
               model.forward(t2, s, poked, masks).loss.value().item();
  }

  int law = 0, cases = 0;
  for (int n = 1; n <= 80; ++n) {
    for (int step = 0; step <= 40; ++step) {
      const double r = step / 40.0;
      const int want = n == 1 ? 1 : std::clamp(static_cast<int>(std::lround(r * n)), 1, n - 1);
      const auto m = draw_mask(n, r, Rng(static_cast<std::uint64_t>(n * 1000 + step)));
      law += mask_count(r, n) != want || std::count(m.begin(), m.end(), 1) != want;
      ++cases;
    }
  }
  return {changed == 0 && law == 0, std::to_string(changed) + " of 205 perturbations moved the loss; mask size law broken in " +
                                        std::to_string(law) + "/" + std::to_string(cases) + " (r, N) pairs"};
}

struct FullRun {
  fs::path dir;
  bool done = false;
  std::string why;
};

Outcome end_to_end(FullRun& run) {
  fs::create_directories(run.dir);
  std::ofstream(run.dir / "accept.ini") << "[pretrain]\nepochs = 5\nwarmup_epochs = 1\n";
  const std::vector<std::string> base{"--config", (run.dir / "accept.ini").string(), "--out", run.dir.string(),
                                      "--threads", "1"};
  const std::clock_t t0 = std::clock();
  const auto wall0 = std::chrono::steady_clock::now();
  run.why = run_stages(base, false);
  const double cpu = cpu_seconds(t0);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  if (!run.why.empty()) return {false, run.why};
  run.done = true;

  auto args = base;
  args.insert(args.end(), {"evaluate", "--all-subsets"});
  const CliResult r = cli(args);
  if (r.code != kExitOk) return {false, "evaluate exited " + std::to_string(r.code)};
  std::istringstream in(r.out);
  std::string header, line;
  std::getline(in, header);
  std::vector<std::string> cols;
  {
    std::istringstream h(header);
    for (std::string c; std::getline(h, c, '\t');) cols.push_back(c);
  }
  const auto col = std::find(cols.begin(), cols.end(), "balanced_accuracy") - cols.begin();
  double full = -1.0, worst_single = 2.0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::vector<std::string> f;
    for (std::string c; std::getline(row, c, '\t');) f.push_back(c);
    if (static_cast<std::size_t>(col) >= f.size()) continue;
    const double ba = std::stod(f[static_cast<std::size_t>(col)]);
    if (f[0] == "eeg+eog+ecg") full = ba;
    if (f[0].find('+') == std::string::npos) worst_single = std::min(worst_single, ba);
  }
  const bool ok = cpu < 600.0 && full >= 0.90 && worst_single >= 0.60;
  return {ok, "test balanced accuracy full " + fmt(full) + ", worst singleton " + fmt(worst_single) + "; " +
                  fmt(cpu, 4) + " s CPU (" + fmt(wall, 4) + " s wall)"};
}

Outcome subset_sweep(const FullRun& run) {
  if (!run.done) return {false, "pipeline did not complete: " + run.why};
  const CliResult r = cli({"--out", run.dir.string(), "--threads", "1", "evaluate", "--all-subsets"});
  if (r.code != kExitOk) return {false, "evaluate exited " + std::to_string(r.code) + ": " + r.err};
  std::istringstream in(r.out);
  std::string header, line;
  std::getline(in, header);
  std::vector<std::string> cols;
  {
    std::istringstream h(header);
    for (std::string c; std::getline(h, c, '\t');) cols.push_back(c);
  }
  const auto col = static_cast<std::size_t>(std::find(cols.begin(), cols.end(), "balanced_accuracy") - cols.begin());
  int rows = 0;
  double full = -1.0, best_single = -1.0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::vector<std::string> f;
    for (std::string c; std::getline(row, c, '\t');) f.push_back(c);
    if (col >= f.size()) return {false, "malformed row: " + line};
    ++rows;
    const double ba = std::stod(f[col]);
    if (std::count(f[0].begin(), f[0].end(), '+') == 2) full = ba;
    if (f[0].find('+') == std::string::npos) best_single = std::max(best_single, ba);
  }
  const bool ok = rows == 7 && full >= best_single - 0.02;
  return {ok, std::to_string(rows) + " subsets; full " + fmt(full) + " vs best singleton " + fmt(best_single)};
}

struct LoadedTokenizer {
  RunConfig config;
  ParamStore<Real> ps;
  std::unique_ptr<Tokenizer> tok;
  Dataset data;
};

std::unique_ptr<LoadedTokenizer> load_tokenizer(const FullRun& run) {
  const Checkpoint ck = load_checkpoint(run.dir / "tokenizer.pock");
  auto l = std::make_unique<LoadedTokenizer>();
  l->config = parse_config(ck.config);
  Rng unused(0);
  l->tok = std::make_unique<Tokenizer>(l->ps, l->config.tokenizer_config(), unused);
  load_params(ck, l->ps, "tok.");
  l->data = load_dataset(run.dir / "manifest.tsv", l->config.modalities, default_specs());
  return l;
}

Outcome cross_modal_signal(const FullRun& run) {
  if (!run.done) return {false, "pipeline did not complete: " + run.why};
  const auto l = load_tokenizer(run);
  const auto& test = l->data.test;
  std::vector<Tensor<Real>> windows;
  for (const auto& s : test) windows.push_back(l->tok->anchor_window_codes(s));
  // A derangement: every sample gets another sample's anchor windows.
  std::vector<std::size_t> order(test.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(17);
  rng.shuffle(order.begin(), order.end());
  double own = 0.0, shuffled = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Sample& s = test[order[i]];
    own += l->tok->cross_modal_error(s);
    shuffled += l->tok->cross_modal_error(s, &windows[order[(i + 1) % order.size()]]);
  }
  own /= static_cast<double>(test.size());
  shuffled /= static_cast<double>(test.size());
  const double margin = (shuffled - own) / shuffled;
  return {margin > 0.05, "held-out error true " + fmt(own) + ", shuffled " + fmt(shuffled) + ", margin " +
                             fmt(100.0 * margin, 3) + "%"};
}

Outcome codebook_health(const FullRun& run) {
  if (!run.done) return {false, "pipeline did not complete: " + run.why};
  const auto l = load_tokenizer(run);
  const auto values = evaluate_tokenizer(*l->tok, l->data.test);
  std::string detail;
  int count = 0;
  bool ok = true;
  for (const auto& [k, v] : values) {
    if (k.rfind("perplexity_", 0) != 0) continue;
    ++count;
    ok = ok && v > 1.5;
    detail += (detail.empty() ? "" : ", ") + k.substr(11) + " " + fmt(v, 3);
  }
  return {ok && count >= 2, detail};
}

Outcome metric_values() {
  int bad = 0;
  auto expect = [&](double got, double want) { bad += !(std::abs(got - want) <= 1e-9); };
  auto expand = [](const std::vector<std::vector<int>>& m, std::vector<int>& p, std::vector<int>& l) {
    p.clear();
    l.clear();
    for (int a = 0; a < static_cast<int>(m.size()); ++a) {
      for (int b = 0; b < static_cast<int>(m[a].size()); ++b) {
        for (int k = 0; k < m[a][b]; ++k) {
          l.push_back(a);
          p.push_back(b);
        }
      }
    }
  };
  std::vector<int> p, l;
  expand({{5, 5}, {1, 9}}, p, l);
  expect(balanced_accuracy(p, l), 0.7);
  expand({{5, 1, 0}, {2, 3, 1}, {0, 1, 7}}, p, l);
  expect(balanced_accuracy(p, l), (5.0 / 6 + 3.0 / 6 + 7.0 / 8) / 3);
  expect(cohens_kappa(p, l), (0.75 - 0.34) / 0.66);
  expect(weighted_f1(p, l), (6 * (10.0 / 13) + 6 * (6.0 / 11) + 8 * (7.0 / 8)) / 20);
  expect(auroc({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0}), 0.75);
  expect(auroc({0.3, 0.5, 0.5, 0.7}, {0, 1, 0, 1}), 0.875);
  expect(auc_pr({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0}), 0.5 + 0.5 * 2.0 / 3);
  expect(auc_pr({0.4, 0.4, 0.4, 0.4}, {1, 0, 0, 0}), 0.25);
  Eigen::MatrixXd t(4, 1), q(4, 1);
  t << 1, 2, 3, 4;
  q << 1, 2, 3, 5;
  expect(rmse(q, t), 0.5);
  expect(r_squared(q, t), 0.8);
  expect(pearson(q, t), 6.5 / std::sqrt(8.75 * 5.0));

  Rng rng(2);
  int moved = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 5 + static_cast<int>(rng.below(40));
    std::vector<double> s(static_cast<std::size_t>(n)), u(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = std::round(rng.normal() * 4.0) / 4.0;
      u[i] = std::exp(0.7 * s[i]) + 3.0;
      y[i] = i < 2 ? static_cast<int>(i) : static_cast<int>(rng.below(2));
    }
    moved += std::abs(auroc(s, y) - auroc(u, y)) > 1e-12;
  }
  return {bad == 0 && moved == 0, std::to_string(bad) + " hand values off by > 1e-9; monotone transform moved AUROC in " +
                                      std::to_string(moved) + "/100 sets"};
}

Outcome dsp_bounds() {
  using testing::sine;
  using testing::tone_amplitude;
  auto row = [](const Eigen::VectorXd& v) -> Signal { return v.transpose(); };
  auto flat = [](const Signal& s) -> Eigen::VectorXd { return s.row(0).transpose(); };
  auto db = [](double a) { return 20.0 * std::log10(a); };
  std::vector<std::string> failures;

  const double rate = 1000.0;
  double worst_pass = 0.0, worst_stop = -1e9;
  for (auto [low, high] : {std::pair{5.0, 50.0}, std::pair{0.5, 60.0}, std::pair{5.0, 200.0}}) {
    const Eigen::Index n = low < 1.0 ? 40000 : 8000;
    const double centre = std::sqrt(low * high);
    auto gain = [&](double f) { return db(tone_amplitude(flat(bandpass(row(sine(f, rate, n)), low, high, rate)), f, rate, n / 4)); };
    worst_pass = std::min(worst_pass, gain(centre));
    worst_stop = std::max({worst_stop, gain(2 * high), gain(low / 2)});
  }
  if (worst_pass < -3.0 || worst_stop > -20.0) failures.push_back("bandpass");

  const double nr = 500.0;
  const double at_notch = db(tone_amplitude(flat(notch(row(sine(50.0, nr, 5000)), {50.0}, nr)), 50.0, nr, 1000));
  double beside = 0.0;
  for (double f : {40.0, 60.0}) {
    beside = std::max(beside, std::abs(db(tone_amplitude(flat(notch(row(sine(f, nr, 5000)), {50.0}, nr)), f, nr, 1000))));
  }
  if (at_notch > -30.0 || beside > 1.0) failures.push_back("notch");

  double worst_rms = 0.0;
  for (auto [from, to, freq] : {std::tuple{1000.0, 500.0, 5.0}, std::tuple{1000.0, 200.0, 75.0},
                                std::tuple{200.0, 500.0, 75.0}, std::tuple{500.0, 200.0, 79.0},
                                std::tuple{1000.0, 500.0, 190.0}, std::tuple{256.0, 200.0, 60.0}}) {
    const Signal y = resample(row(sine(freq, from, static_cast<Eigen::Index>(from * 4), 1.0, 0.3)), from, to);
    const Eigen::VectorXd ref = sine(freq, to, y.cols(), 1.0, 0.3);
    const Eigen::Index m = y.cols() - 200;
    worst_rms = std::max(worst_rms, std::sqrt((flat(y).segment(100, m) - ref.segment(100, m)).squaredNorm() /
                                              static_cast<double>(m)));
  }
  if (worst_rms >= 0.02) failures.push_back("resample");

  const Eigen::VectorXd raw = sine(10.0, 200.0, 1200);
  const Eigen::VectorXd out = flat(notch(bandpass(row(raw), 0.1, 75.0, 200.0), {50.0}, 200.0));
  int best_lag = 99;
  double best = -1e300;
  for (int lag = -10; lag <= 10; ++lag) {
    double acc = 0.0;
    for (Eigen::Index i = 200; i < 1000; ++i) acc += raw[i] * out[i + lag];
    if (acc > best) {
      best = acc;
      best_lag = lag;
    }
  }
  if (best_lag != 0) failures.push_back("phase");

  std::string detail = "passband >= " + fmt(worst_pass, 3) + " dB, octave out <= " + fmt(worst_stop, 3) +
                       " dB, notch " + fmt(at_notch, 3) + " dB (+-10 Hz within " + fmt(beside, 2) +
                       " dB), resample rms " + fmt(worst_rms, 3) + ", lag " + std::to_string(best_lag);
  for (const auto& f : failures) detail += "; " + f + " out of bounds";
  return {failures.empty(), detail};
}

std::vector<std::string> epoch_one_rows(const fs::path& tsv) {
  std::ifstream in(tsv);
  std::vector<std::string> rows;
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("1\t", 0) == 0) rows.push_back(line);
  }
  return rows;
}

bool same_tensors(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    const auto& x = a.tensors[i];
    const auto& y = b.tensors[i];
    if (x.first != y.first || x.second.shape() != y.second.shape()) return false;
    if (std::memcmp(x.second.data(), y.second.data(), static_cast<std::size_t>(x.second.size()) * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

Outcome determinism(const fs::path& root) {
  fs::create_directories(root);
  std::ofstream(root / "tiny.ini") << kTinyConfig;
  for (const char* d : {"a", "b"}) {
    const std::string why =
        run_stages({"--config", (root / "tiny.ini").string(), "--out", (root / d).string(), "--seed", "5"}, false);
    if (!why.empty()) return {false, why};
  }
  int rows = 0;
  std::vector<std::string> differ;
  for (const char* stage : {"tokenizer", "pretrain", "finetune"}) {
    const auto a = epoch_one_rows(root / "a" / (std::string(stage) + ".tsv"));
    const auto b = epoch_one_rows(root / "b" / (std::string(stage) + ".tsv"));
    rows += static_cast<int>(a.size());
    if (a.empty() || a != b) differ.push_back(stage);
  }

  int ckpt_bad = 0;
  for (const char* file : {"tokenizer.pock", "pretrain.pock", "finetune.pock", "finetune_best.pock"}) {
    const Checkpoint c = load_checkpoint(root / "a" / file);
    save_checkpoint(root / "copy.pock", c);
    const Checkpoint back = load_checkpoint(root / "copy.pock");
    ckpt_bad += !same_tensors(c, back) || back.config != c.config;
    ckpt_bad += slurp(root / "a" / file) != slurp(root / "copy.pock");
    // The snapshots name different output directories; tensors must agree.
    ckpt_bad += !same_tensors(c, load_checkpoint(root / "b" / file));
  }

  int psrd_bad = 0, psrd = 0;
  for (const auto& e : read_manifest(root / "a" / "manifest.tsv")) {
    const fs::path pa = root / "a" / e.path;
    const Recording r = read_psrd(pa);
    write_psrd(r, root / "copy.psrd");
    const std::string bytes = slurp(pa);
    const auto encoded = encode_psrd(r);
    psrd_bad += !identical(r, read_psrd(root / "copy.psrd")) || slurp(root / "copy.psrd") != bytes ||
                std::string(encoded.begin(), encoded.end()) != bytes || slurp(root / "b" / e.path) != bytes;
    ++psrd;
  }
  std::string detail = std::to_string(rows) + " epoch-1 values per run compared";
  for (const auto& d : differ) detail += "; " + d + " differs";
  detail += "; checkpoint mismatches " + std::to_string(ckpt_bad) + ", recording mismatches " +
            std::to_string(psrd_bad) + "/" + std::to_string(psrd);
  return {differ.empty() && ckpt_bad == 0 && psrd_bad == 0 && psrd > 0, detail};
}

Outcome ablation_flags(const fs::path& root) {
  fs::create_directories(root);
  std::ofstream(root / "tiny.ini") << kTinyConfig;
  const std::vector<std::string> flags{"--no-cross-modal", "--no-disentangle", "--no-shared-codebook",
                                       "--no-prototype-align", "--no-spec-loss"};
  std::vector<std::string> problems;
  for (const auto& f : flags) {
    const std::string why = run_stages({"--config", (root / "tiny.ini").string(), "--out",
                                        (root / f.substr(2)).string(), f});
    if (!why.empty()) problems.push_back(f + ": " + why);
  }

  // Each flag reaches the stage config it governs.
  {
    RunConfig c;
    c.flags = {false, false, false, true, true, true, true, true};
    const auto tc = c.tokenizer_config();
    c.resolve_task(probe_data());
    const auto fc = c.finetune_config();
    if (tc.cross_modal || tc.disentangle || tc.shared_codebook || c.pretrain_config().shared_head ||
        fc.prototype_align || fc.spec_loss) {
      problems.push_back("flags do not reach the stage configs");
    }
  }

  const auto mods = probe_data().modalities;
  const TokenizerConfig tok = small_tokenizer(mods);
  std::vector<std::string> notes;
  auto record = [&](const std::string& flag, const Outcome& o) {
    notes.push_back(flag + " " + o.detail);
    if (!o.pass) problems.push_back(flag + ": " + o.detail);
  };
  {
    TokenizerConfig off = tok, zero = tok;
    off.cross_modal = false;
    zero.alpha1 = 0.0;
    record("cross-modal", ablation_probe<Tokenizer>(off, zero, tok, tokenizer_grads,
                                                    [](const std::string& n) { return contains(n, ".cma."); }, true));
  }
  {
    TokenizerConfig off = tok, zero = tok;
    off.disentangle = false;
    zero.alpha2 = 0.0;
    record("disentangle", ablation_probe<Tokenizer>(off, zero, tok, tokenizer_grads,
                                                    [](const std::string&) { return false; }, false));
  }
  {
    FinetuneConfig base = small_finetune(mods), off = base, zero = base;
    off.prototype_align = false;
    zero.gamma_align = 0.0;
    record("prototype-align",
           ablation_probe<ResilientModel>(off, zero, base, finetune_grads,
                                          [](const std::string& n) { return n == "ft.prototypes"; }, true));
  }
  {
    FinetuneConfig base = small_finetune(mods), off = base, zero = base;
    off.spec_loss = false;
    zero.gamma_spec = 0.0;
    record("spec-loss", ablation_probe<ResilientModel>(
                            off, zero, base, finetune_grads,
                            [](const std::string& n) { return n.rfind("ft.", 0) == 0 && contains(n, ".head.") &&
                                                              n.rfind("ft.head.", 0) != 0; },
                            true));
  }
  {
    // No weight switches the shared path off, so probe it directly: nothing
    // downstream of the shared half may reach it, and its parameters are gone.
    TokenizerConfig off = tok;
    off.shared_codebook = false;
    auto shared_grad = [](const TokenizerConfig& c, int& dropped_names) {
      ParamStore<Real> ps;
      Rng rng(44);
      const Tokenizer t(ps, c, rng);
      for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& n = ps[i].name;
        dropped_names += contains(n, "shared") || contains(n, ".ta.") || contains(n, ".cma.");
      }
      Tape<Real> tape;
      TokenizerPass pass = t.forward(tape, probe_data().train[0]);
      tape.backward(add(add(pass.loss.reconstruction, pass.loss.commitment),
                        pass.loss.cross_modal.valid() ? pass.loss.cross_modal : scale(pass.loss.commitment, Real(0))));
      double g = 0.0;
      for (const auto& m : pass.modalities) g = std::max(g, static_cast<double>(tape.grad(m.z_shared).array().abs().maxCoeff()));
      return g;
    };
    int off_names = 0, on_names = 0;
    const double g_off = shared_grad(off, off_names);
    const double g_on = shared_grad(tok, on_names);
    PretrainConfig pc;
    pc.modalities = mods;
    pc.encoders = default_encoders(mods, default_specs(), 1, 2, 16, 16);
    pc.shared_head = false;
    ParamStore<Real> pps;
    Rng r(45);
    const MaskedModel pm(pps, pc, r);
    int heads = 0;
    for (std::size_t i = 0; i < pps.size(); ++i) heads += contains(pps[i].name, "shared_head");
    record("shared-codebook",
           {g_off == 0.0 && g_on > 0.0 && off_names == 0 && on_names > 0 && heads == 0,
            "shared-half grad " + fmt(g_off) + " (full model " + fmt(g_on) + "), " + std::to_string(off_names) +
                " shared tensors left, " + std::to_string(heads) + " shared heads in pretraining"});
  }
  std::string detail = "5 flagged pipelines run";
  for (const auto& n : notes) detail += "; " + n;
  for (const auto& p : problems) detail += " | FAIL " + p;
  return {problems.empty(), detail};
}

}  // namespace

int main() {
  const fs::path root = fs::temp_directory_path() / ("pomni_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  FullRun full{root / "full"};

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"VQ oracle", vq_oracle},
      {"EMA fixed point", ema_fixed_point},
      {"straight-through and stop-gradient", gradient_paths},
      {"alignment-factor laws", alignment_laws},
      {"masked-loss locality", masked_locality},
      {"end-to-end pipeline", [&] { return end_to_end(full); }},
      {"missing-modality sweep", [&] { return subset_sweep(full); }},
      {"cross-modal signal", [&] { return cross_modal_signal(full); }},
      {"codebook health", [&] { return codebook_health(full); }},
      {"metrics correctness", metric_values},
      {"DSP bounds", dsp_bounds},
      {"determinism and persistence", [&] { return determinism(root / "determinism"); }},
      {"ablation flags", [&] { return ablation_flags(root / "ablation"); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << (i + 1) << ' ' << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  fs::remove_all(root);
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << '/' << criteria.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}
