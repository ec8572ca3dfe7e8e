#include "pomni/cli/cli.hpp"
#include "pomni/cli/config.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

namespace pomni {

namespace {

class MissingCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> threads;
  std::string data;
  bool resume = false;
  int stop_after = 0;  // 0: run every epoch
  RunFlags flags;
};

/// Thrown from an epoch callback once --stop-after is reached.
struct StopRequested {};

struct Io {
  std::ostream& out;
  std::ostream& err;
};

const char* const kTokenizerFile = "tokenizer.pock";
const char* const kPretrainFile = "pretrain.pock";
const char* const kFinetuneFile = "finetune.pock";
const char* const kBestFile = "finetune_best.pock";

void apply_overrides(RunConfig& c, const Globals& g) {
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.out = g.out;
  if (g.threads) c.threads = *g.threads;
  if (!g.data.empty()) c.data = g.data;
  RunFlags& f = c.flags;
  f.freeze_encoders |= g.flags.freeze_encoders;
  f.warm_start_encoders |= g.flags.warm_start_encoders;
  f.moe_fuser |= g.flags.moe_fuser;
  f.no_cross_modal |= g.flags.no_cross_modal;
  f.no_disentangle |= g.flags.no_disentangle;
  f.no_shared_codebook |= g.flags.no_shared_codebook;
  f.no_prototype_align |= g.flags.no_prototype_align;
  f.no_spec_loss |= g.flags.no_spec_loss;
}

RunConfig build_config(const Globals& g, const std::string& extra = {}) {
  RunConfig c;
  if (!g.config.empty()) c = load_config(g.config, c);
  if (!extra.empty()) c = load_config(extra, c);
  apply_overrides(c, g);
  c.validate();
  return c;
}

std::filesystem::path out_dir(const Globals& g) {
  if (!g.out.empty()) return g.out;
  if (!g.config.empty()) return load_config(g.config).out;
  return RunConfig{}.out;
}

Checkpoint require_checkpoint(const std::filesystem::path& path, const std::string& hint) {
  if (!std::filesystem::exists(path)) throw MissingCheckpoint("checkpoint " + path.string() + " not found; " + hint);
  return load_checkpoint(path);
}

/// Snapshot config of a checkpoint, with this invocation's thread count.
RunConfig snapshot_config(const Checkpoint& ckpt, const std::filesystem::path& path, const Globals& g) {
  if (ckpt.config.empty()) throw CheckpointError(path.string() + " has no config snapshot");
  RunConfig c = parse_config(ckpt.config);
  if (g.threads) c.threads = *g.threads;
  return c;
}

Dataset load_data(const RunConfig& c) {
  const auto manifest = c.manifest();
  if (!std::filesystem::exists(manifest)) {
    throw ConfigError("data manifest " + manifest.string() + " not found; run gen-data or pass --data");
  }
  return load_dataset(manifest, c.modalities, default_specs(), c.resolved_threads());
}

std::string format_values(const std::map<std::string, double>& values) {
  std::ostringstream s;
  s << std::setprecision(6);
  for (const auto& [k, v] : values) s << ' ' << k << '=' << v;
  return s.str();
}

void print_epoch(Io& io, const std::string& stage, const EpochStats& stats) {
  io.out << stage << " epoch " << stats.epoch << " |" << format_values(stats.train);
  if (!stats.valid.empty()) io.out << " | valid" << format_values(stats.valid);
  io.out << '\n' << std::flush;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Checkpoint epoch_checkpoint(const std::string& snapshot, const ParamStore<Real>& ps, const AdamW<Real>& opt,
                            int epoch) {
  Checkpoint ck;
  ck.config = snapshot;
  store_params(ck, ps);
  store_optimizer(ck, opt, epoch);
  return ck;
}

int cmd_gen_data(Io& io, const Globals& g, const std::string& spec) {
  RunConfig c = build_config(g, spec);
  c.stage = "gen-data";
  c.gen.seed = c.seed;
  const auto t0 = std::chrono::steady_clock::now();
  const auto samples = generate(c.gen);
  std::filesystem::create_directories(c.out);
  const auto entries = write_dataset(samples, c.out);
  std::map<std::string, int> counts;
  for (const auto& e : entries) ++counts[e.split];
  {
    std::ofstream snap(c.out / "gen.ini");
    snap << to_ini(c);
  }
  io.out << "wrote " << entries.size() << " recordings to " << (c.out / "manifest.tsv").string() << ": train "
         << counts["train"] << ", valid " << counts["valid"] << ", test " << counts["test"] << " ("
         << std::setprecision(3) << seconds_since(t0) << " s)\n";
  return kExitOk;
}

int cmd_train_tokenizer(Io& io, const Globals& g) {
  const auto path = out_dir(g) / kTokenizerFile;
  std::optional<Checkpoint> resume;
  RunConfig c;
  if (g.resume) {
    resume = require_checkpoint(path, "nothing to resume");
    c = snapshot_config(*resume, path, g);
    c.out = path.parent_path();
  } else {
    c = build_config(g);
  }
  c.stage = "train-tokenizer";
  const Dataset data = load_data(c);
  ParamStore<Real> ps;
  Rng init = Rng(c.seed).split("init");
  Tokenizer tok(ps, c.tokenizer_config(), init);
  AdamW<Real> opt(c.tokenizer_optim.adamw());
  int start = 0;
  if (resume) {
    load_params(*resume, ps);
    start = load_optimizer(*resume, opt);
  }
  std::filesystem::create_directories(c.out);
  RunLog log(c.out / "tokenizer");
  log.note((resume ? "resume after epoch " + std::to_string(start) : std::string("start")) +
           " seed=" + std::to_string(c.seed) + " threads=" + std::to_string(c.resolved_threads()));
  const std::string snapshot = to_ini(c);
  const auto t0 = std::chrono::steady_clock::now();
  train_tokenizer(tok, ps, data, c.tokenizer_options(), opt, start, [&](const EpochStats& stats) {
    log.write(stats);
    print_epoch(io, "tokenizer", stats);
    save_checkpoint(path, epoch_checkpoint(snapshot, ps, opt, stats.epoch));
    if (stats.epoch == g.stop_after) throw StopRequested{};
  });
  io.out << "tokenizer done in " << std::setprecision(4) << seconds_since(t0) << " s -> " << path.string() << '\n';
  return kExitOk;
}

int cmd_pretrain(Io& io, const Globals& g, const std::string& tokenizer_path) {
  const auto path = out_dir(g) / kPretrainFile;
  std::optional<Checkpoint> resume;
  RunConfig c;
  if (g.resume) {
    resume = require_checkpoint(path, "nothing to resume");
    c = snapshot_config(*resume, path, g);
    c.out = path.parent_path();
  } else {
    c = build_config(g);
  }
  const auto tpath = tokenizer_path.empty() ? c.out / kTokenizerFile : std::filesystem::path(tokenizer_path);
  const Checkpoint tck = require_checkpoint(tpath, "run train-tokenizer first");
  const RunConfig tc = snapshot_config(tck, tpath, g);
  if (!resume) {
    // Targets come from this tokenizer, so its vocabulary and modalities win.
    c.modalities = tc.modalities;
    c.model.codebook_size = tc.model.codebook_size;
    c.model.code_dim = tc.model.code_dim;
    c.flags.no_shared_codebook = tc.flags.no_shared_codebook;
    c.flags.no_cross_modal = tc.flags.no_cross_modal;
    c.flags.no_disentangle = tc.flags.no_disentangle;
    c.validate();
  }
  c.stage = "pretrain";

  ParamStore<Real> tps;
  Rng unused(0);
  const Tokenizer tok(tps, tc.tokenizer_config(), unused);
  load_params(tck, tps, "tok.");
  const Dataset data = load_data(c);
  const int threads = c.resolved_threads();
  const auto train_t = compute_targets(tok, data.train, threads);
  const auto valid_t = compute_targets(tok, data.valid, threads);

  ParamStore<Real> ps;
  Rng init = Rng(c.seed).split("init");
  MaskedModel model(ps, c.pretrain_config(), init);
  AdamW<Real> opt(c.pretrain_optim.adamw());
  int start = 0;
  std::filesystem::create_directories(c.out);
  RunLog log(c.out / "pretrain");
  if (resume) {
    load_params(*resume, ps);
    start = load_optimizer(*resume, opt);
    log.note("resume after epoch " + std::to_string(start));
  } else {
    std::string how = "fresh encoders";
    if (c.flags.warm_start_encoders) how = std::to_string(warm_start_encoders(ps, tps, c.modalities)) + " encoder tensors from the tokenizer";
    log.note("start seed=" + std::to_string(c.seed) + " " + how);
  }
  const std::string snapshot = to_ini(c);
  const auto t0 = std::chrono::steady_clock::now();
  train_masked(model, ps, data, train_t, valid_t, c.pretrain_options(), opt, start, [&](const EpochStats& stats) {
    log.write(stats);
    print_epoch(io, "pretrain", stats);
    save_checkpoint(path, epoch_checkpoint(snapshot, ps, opt, stats.epoch));
    if (stats.epoch == g.stop_after) throw StopRequested{};
  });
  io.out << "pretrain done in " << std::setprecision(4) << seconds_since(t0) << " s -> " << path.string() << '\n';
  return kExitOk;
}

int cmd_finetune(Io& io, const Globals& g, const std::string& pretrained_path) {
  const auto path = out_dir(g) / kFinetuneFile;
  const auto best_path = out_dir(g) / kBestFile;
  std::optional<Checkpoint> resume;
  RunConfig c;
  if (g.resume) {
    resume = require_checkpoint(path, "nothing to resume");
    c = snapshot_config(*resume, path, g);
    c.out = path.parent_path();
  }
  std::optional<Checkpoint> pck;
  if (!resume) {
    c = build_config(g);
    const auto ppath = pretrained_path.empty() ? c.out / kPretrainFile : std::filesystem::path(pretrained_path);
    pck = require_checkpoint(ppath, "run pretrain first");
    c.modalities = snapshot_config(*pck, ppath, g).modalities;
  }
  c.stage = "finetune";
  const Dataset data = load_data(c);
  c.resolve_task(data);
  c.validate();

  ParamStore<Real> ps;
  Rng init = Rng(c.seed).split("init");
  ResilientModel model(ps, c.finetune_config(), init);
  AdamW<Real> opt(c.finetune_optim.adamw());
  BestModel best;
  int start = 0;
  std::filesystem::create_directories(c.out);
  RunLog log(c.out / "finetune");
  const int threads = c.resolved_threads();
  if (resume) {
    if (std::filesystem::exists(best_path)) {
      // The monitor is recomputed rather than stored so it stays in double.
      const Checkpoint bck = load_checkpoint(best_path);
      load_params(bck, ps);
      const Tensor<float>* e = bck.find("best.epoch");
      if (!e) throw CheckpointError(best_path.string() + " lacks best.epoch");
      double monitor = 0.0, loss = 0.0;
      if (!data.valid.empty()) {
        const MetricsReport r = evaluate_finetune(model, data.valid, c.modalities, threads);
        monitor = r.monitor();
        loss = r.values.at("loss");
      }
      best.capture(ps, static_cast<int>(e->item()), monitor, loss);
    }
    load_params(*resume, ps);
    start = load_optimizer(*resume, opt);
    log.note("resume after epoch " + std::to_string(start));
  } else {
    const std::size_t n = load_params(*pck, ps, "enc.");
    log.note("start seed=" + std::to_string(c.seed) + " encoders from pretraining (" + std::to_string(n) + " tensors)");
  }
  const std::string snapshot = to_ini(c);
  const auto t0 = std::chrono::steady_clock::now();
  train_finetune(model, ps, data, c.finetune_options(), opt, best, start, [&](const EpochStats& stats) {
    log.write(stats);
    print_epoch(io, "finetune", stats);
    if (best.epoch == stats.epoch) {
      Checkpoint b;
      b.config = snapshot;
      store_params(b, ps);
      b.put("best.epoch", Tensor<float>::scalar(static_cast<float>(stats.epoch)));
      save_checkpoint(best_path, b);
    }
    save_checkpoint(path, epoch_checkpoint(snapshot, ps, opt, stats.epoch));
    if (stats.epoch == g.stop_after) throw StopRequested{};
  });
  io.out << "finetune done in " << std::setprecision(4) << seconds_since(t0) << " s, best epoch " << best.epoch
         << " -> " << best_path.string() << '\n';
  if (!data.test.empty()) {
    best.restore(ps);
    const MetricsReport r = evaluate_finetune(model, data.test, c.modalities, threads);
    io.out << "test (best epoch, all modalities):" << format_values(r.values) << '\n';
    log.note("test best_epoch=" + std::to_string(best.epoch) + format_values(r.values));
  }
  return kExitOk;
}

int cmd_evaluate(Io& io, const Globals& g, const std::string& checkpoint, const std::string& modalities,
                 bool all, const std::string& split, const std::string& report) {
  const auto path = checkpoint.empty() ? out_dir(g) / kBestFile : std::filesystem::path(checkpoint);
  const Checkpoint ck = require_checkpoint(path, "run finetune first or pass --checkpoint");
  RunConfig c = snapshot_config(ck, path, g);
  if (!g.data.empty()) c.data = g.data;
  if (c.data.empty()) c.data = path.parent_path() / "manifest.tsv";

  std::vector<std::vector<Modality>> subsets;
  if (all) {
    subsets = all_subsets(c.modalities);
  } else if (!modalities.empty()) {
    const auto s = parse_modality_list(modalities);
    for (Modality m : s) {
      if (std::find(c.modalities.begin(), c.modalities.end(), m) == c.modalities.end()) {
        throw ConfigError("modality " + std::string(modality_name(m)) + " is not part of the trained model");
      }
    }
    subsets.push_back(s);
  } else {
    subsets.push_back(c.modalities);
  }

  ParamStore<Real> ps;
  Rng unused(0);
  const ResilientModel model(ps, c.finetune_config(), unused);
  load_params(ck, ps);
  const Dataset data = load_data(c);
  const auto& samples = data.split(split);
  if (samples.empty()) throw ConfigError("split '" + split + "' is empty");

  std::ostringstream table;
  table << std::setprecision(6);
  const std::vector<std::string> keys = [&] {
    std::vector<std::string> k;
    for (const auto& [name, v] : evaluate_finetune(model, samples, subsets.front(), c.resolved_threads()).values) {
      if (name != "loss") k.push_back(name);
    }
    return k;
  }();
  table << "subset";
  for (const auto& k : keys) table << '\t' << k;
  table << '\n';
  for (const auto& s : subsets) {
    const MetricsReport r = evaluate_finetune(model, samples, s, c.resolved_threads());
    table << subset_name(s);
    for (const auto& k : keys) table << '\t' << r.values.at(k);
    table << '\n';
  }
  io.out << table.str();
  if (!report.empty()) {
    std::ofstream f(report);
    if (!f) throw std::runtime_error("cannot write report " + report);
    f << table.str();
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Io io{out, err};
  Globals g;
  CLI::App app{"Multimodal physiological signal pipeline: tokenizer, masked pretraining, fine-tuning."};
  app.name("pomni");
  app.require_subcommand(1);
  app.add_option("--config", g.config, "INI config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for every random stream");
  app.add_option("--out", g.out, "Output directory (default: run)");
  app.add_option("--threads", g.threads, "Worker threads (default: POMNI_THREADS, else 1)")
      ->check(CLI::Range(1, 4096));
  app.add_option("--data", g.data, "Dataset manifest (default: <out>/manifest.tsv)");
  app.add_flag("--resume", g.resume, "Continue from the stage's last checkpoint in --out");
  app.add_option("--stop-after", g.stop_after, "Stop once this epoch has completed; continue later with --resume")
      ->check(CLI::PositiveNumber);
  app.add_flag("--freeze-encoders", g.flags.freeze_encoders, "Fine-tune with frozen encoders");
  app.add_flag("--warm-start-encoders", g.flags.warm_start_encoders, "Pretrain from the tokenizer's encoders");
  app.add_flag("--moe-fuser", g.flags.moe_fuser, "Mixture-of-experts feed-forward in the fuser");
  app.add_flag("--no-cross-modal", g.flags.no_cross_modal, "Drop cross-modal reconstruction");
  app.add_flag("--no-disentangle", g.flags.no_disentangle, "Drop the disentangling loss");
  app.add_flag("--no-shared-codebook", g.flags.no_shared_codebook, "Private codebooks only");
  app.add_flag("--no-prototype-align", g.flags.no_prototype_align, "Drop prototype alignment");
  app.add_flag("--no-spec-loss", g.flags.no_spec_loss, "Drop per-modality task losses");

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset and manifest to --out");
  std::string spec;
  gen->add_option("--spec", spec, "INI file with a [gen] section")->check(CLI::ExistingFile);
  auto* tok = app.add_subcommand("train-tokenizer", "Stage 1: train the tokenizer");
  auto* pre = app.add_subcommand("pretrain", "Stage 2: masked code prediction");
  std::string tokenizer_path;
  pre->add_option("--tokenizer", tokenizer_path, "Tokenizer checkpoint (default: <out>/tokenizer.pock)");
  auto* ft = app.add_subcommand("finetune", "Stage 3: supervised fine-tuning");
  std::string pretrained_path;
  ft->add_option("--pretrained", pretrained_path, "Pretraining checkpoint (default: <out>/pretrain.pock)");
  auto* ev = app.add_subcommand("evaluate", "Metrics on a split from any subset of modalities");
  std::string checkpoint, modalities, split = "test", report;
  bool all = false;
  ev->add_option("--checkpoint", checkpoint, "Fine-tuned checkpoint (default: <out>/finetune_best.pock)");
  auto* mods_opt = ev->add_option("--modalities", modalities, "Comma-separated subset, e.g. eeg,ecg");
  ev->add_flag("--all-subsets", all, "One row per non-empty subset")->excludes(mods_opt);
  ev->add_option("--split", split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
  ev->add_option("--report", report, "Also write the table to this file");
  for (auto* sub : {gen, tok, pre, ft, ev}) sub->fallthrough();

  std::vector<const char*> argv{"pomni"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(io, g, spec);
    if (*tok) return cmd_train_tokenizer(io, g);
    if (*pre) return cmd_pretrain(io, g, tokenizer_path);
    if (*ft) return cmd_finetune(io, g, pretrained_path);
    if (*ev) return cmd_evaluate(io, g, checkpoint, modalities, all, split, report);
    return kExitUsage;
  } catch (const StopRequested&) {
    out << "stopped after epoch " << g.stop_after << "; continue with --resume\n";
    return kExitOk;
  } catch (const MissingCheckpoint& e) {
    err << "error: " << e.what() << '\n';
    return kExitMissingCheckpoint;
  } catch (const NonFiniteLoss& e) {
    err << "error: " << e.what() << " (last completed epoch's checkpoint kept)\n";
    return kExitNonFinite;
  } catch (const NonFiniteGradient& e) {
    err << "error: " << e.what() << " (last completed epoch's checkpoint kept)\n";
    return kExitNonFinite;
  } catch (const CheckpointShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitShape;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitShape;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace pomni
