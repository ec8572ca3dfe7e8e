#include "pomni/cli/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

namespace pomni {

namespace {

struct Field {
  std::string section, key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& name, const std::string& value, const std::string& why) {
  throw ConfigError(name + " = '" + value + "': " + why);
}

template <typename T>
T parse_number(const std::string& name, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end) bad(name, text, "not a number");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(v)) bad(name, text, "not finite");
  }
  return v;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, p);
}

bool parse_bool(const std::string& name, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  bad(name, text, "expected true or false");
}

class Table {
 public:
  std::vector<Field> fields;
  std::string section;

  template <typename T>
  void integer(const std::string& key, T& ref, long long lo, long long hi) {
    const std::string name = section + "." + key;
    fields.push_back({section, key,
                      [&ref, name, lo, hi](const std::string& s) {
                        const long long v = parse_number<long long>(name, s);
                        if (v < lo || v > hi) {
                          bad(name, s, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
                        }
                        ref = static_cast<T>(v);
                      },
                      [&ref] { return std::to_string(ref); }});
  }

  void unsigned64(const std::string& key, std::uint64_t& ref) {
    const std::string name = section + "." + key;
    fields.push_back({section, key, [&ref, name](const std::string& s) { ref = parse_number<std::uint64_t>(name, s); },
                      [&ref] { return std::to_string(ref); }});
  }

  /// lo < v (open) or lo <= v (closed), v <= hi.
  void real(const std::string& key, double& ref, double lo, double hi, bool open_low = false) {
    const std::string name = section + "." + key;
    fields.push_back({section, key,
                      [&ref, name, lo, hi, open_low](const std::string& s) {
                        const double v = parse_number<double>(name, s);
                        if ((open_low ? v <= lo : v < lo) || v > hi) {
                          bad(name, s,
                              std::string("must lie in ") + (open_low ? "(" : "[") + format_number(lo) + ", " +
                                  format_number(hi) + "]");
                        }
                        ref = v;
                      },
                      [&ref] { return format_number(ref); }});
  }

  void boolean(const std::string& key, bool& ref) {
    const std::string name = section + "." + key;
    fields.push_back({section, key, [&ref, name](const std::string& s) { ref = parse_bool(name, s); },
                      [&ref] { return std::string(ref ? "true" : "false"); }});
  }

  void text(const std::string& key, std::string& ref, std::vector<std::string> allowed = {}) {
    const std::string name = section + "." + key;
    fields.push_back({section, key,
                      [&ref, name, allowed](const std::string& s) {
                        if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
                          std::string list;
                          for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
                          bad(name, s, "expected one of " + list);
                        }
                        ref = s;
                      },
                      [&ref] { return ref; }});
  }

  void path(const std::string& key, std::filesystem::path& ref) {
    fields.push_back({section, key, [&ref](const std::string& s) { ref = s; }, [&ref] { return ref.string(); }});
  }

  void modalities(const std::string& key, std::vector<Modality>& ref) {
    fields.push_back({section, key, [&ref](const std::string& s) { ref = parse_modality_list(s); },
                      [&ref] {
                        std::string out;
                        for (Modality m : ref) out += (out.empty() ? "" : ",") + std::string(modality_name(m));
                        return out;
                      }});
  }

  /// Empty value removes the entry.
  void per_modality(const std::string& stem, std::map<Modality, double>& ref, double lo, double hi) {
    for (Modality m : kAllModalities) {
      const std::string key = stem + "_" + std::string(modality_name(m));
      const std::string name = section + "." + key;
      fields.push_back({section, key,
                        [&ref, m, name, lo, hi](const std::string& s) {
                          if (s.empty()) {
                            ref.erase(m);
                            return;
                          }
                          const double v = parse_number<double>(name, s);
                          if (v < lo || v > hi) {
                            bad(name, s, "must lie in [" + format_number(lo) + ", " + format_number(hi) + "]");
                          }
                          ref[m] = v;
                        },
                        [&ref, m] {
                          auto it = ref.find(m);
                          return it == ref.end() ? std::string() : format_number(it->second);
                        }});
    }
  }

  void optim(OptimConfig& o) {
    integer("epochs", o.epochs, 1, 1000000);
    integer("warmup_epochs", o.warmup_epochs, 0, 1000000);
    integer("batch", o.batch, 1, 1000000);
    real("peak_lr", o.peak_lr, 0.0, 1.0, true);
    real("min_lr", o.min_lr, 0.0, 1.0);
    real("weight_decay", o.weight_decay, 0.0, 1.0);
    real("beta1", o.beta1, 0.0, 0.999999);
    real("beta2", o.beta2, 0.0, 0.999999);
    real("clip", o.clip, 0.0, 1e6);
  }
};

std::vector<Field> fields(RunConfig& c) {
  Table t;
  t.section = "run";
  t.text("stage", c.stage);
  t.path("data", c.data);
  t.modalities("modalities", c.modalities);
  t.unsigned64("seed", c.seed);
  t.path("out", c.out);
  t.integer("threads", c.threads, 0, 4096);

  t.section = "gen";
  GenSpec& g = c.gen;
  t.modalities("modalities", g.modalities);
  for (Modality m : kAllModalities) t.integer("channels_" + std::string(modality_name(m)), g.channels[m], 1, 256);
  t.real("source_rate", g.source_rate, 1.0, 100000.0);
  t.real("duration", g.duration, 0.0, 3600.0, true);
  t.fields.push_back({"gen", "kind",
                      [&g](const std::string& s) {
                        if (s == "class") {
                          g.kind = LabelKind::Class;
                        } else if (s == "regression") {
                          g.kind = LabelKind::Regression;
                        } else {
                          bad("gen.kind", s, "expected class or regression");
                        }
                      },
                      [&g] { return std::string(g.kind == LabelKind::Regression ? "regression" : "class"); }});
  t.integer("classes", g.classes, 2, 1000);
  t.integer("regression_dim", g.regression_dim, 1, 1000);
  t.real("first_band_centre", g.first_band_centre, 0.0, 10000.0, true);
  t.real("band_spacing", g.band_spacing, 0.0, 10000.0, true);
  t.real("band_halfwidth", g.band_halfwidth, 0.0, 10000.0);
  t.real("noise", g.noise, 0.0, 100.0);
  t.integer("train", g.train, 0, 10000000);
  t.integer("valid", g.valid, 0, 10000000);
  t.integer("test", g.test, 0, 10000000);
  t.integer("per_subject", g.per_subject, 1, 1000000);

  t.section = "model";
  ModelDims& d = c.model;
  t.integer("eeg_hidden", d.eeg_hidden, 2, 4096);
  t.integer("other_hidden", d.other_hidden, 2, 4096);
  t.integer("encoder_layers", d.encoder_layers, 1, 64);
  t.integer("encoder_heads", d.encoder_heads, 1, 64);
  t.integer("codebook_size", d.codebook_size, 2, 65536);
  t.integer("code_dim", d.code_dim, 1, 4096);
  t.integer("decoder_hidden", d.decoder_hidden, 1, 4096);
  t.integer("decoder_layers", d.decoder_layers, 1, 64);
  t.integer("decoder_heads", d.decoder_heads, 1, 64);
  t.integer("tokens", d.tokens, 1, 4096);
  t.integer("width", d.width, 1, 4096);
  t.integer("fuser_heads", d.fuser_heads, 1, 64);
  t.integer("prototypes", d.prototypes, 1, 65536);
  t.integer("experts", d.experts, 1, 64);

  t.section = "tokenizer";
  t.optim(c.tokenizer_optim);
  t.real("alpha1", c.alpha1, 0.0, 1e6);
  t.real("alpha2", c.alpha2, 0.0, 1e6);
  t.real("ema_decay", c.ema_decay, 0.0, 0.999999);

  t.section = "pretrain";
  t.optim(c.pretrain_optim);
  t.per_modality("mask", c.mask_ratio, 0.0, 1.0);

  t.section = "finetune";
  t.optim(c.finetune_optim);
  t.real("gamma_main", c.gamma_main, 0.0, 1e6);
  t.real("gamma_align", c.gamma_align, 0.0, 1e6);
  t.real("gamma_spec", c.gamma_spec, 0.0, 1e6);
  t.per_modality("gamma", c.gamma_by_mod, 0.0, 1e6);
  t.real("label_smoothing", c.label_smoothing, 0.0, 0.999);
  t.text("task", c.task, {"auto", "binary", "multiclass", "regression"});
  t.integer("classes", c.classes, 0, 100000);
  t.integer("target_dim", c.target_dim, 0, 100000);

  t.section = "flags";
  RunFlags& f = c.flags;
  t.boolean("freeze_encoders", f.freeze_encoders);
  t.boolean("warm_start_encoders", f.warm_start_encoders);
  t.boolean("moe_fuser", f.moe_fuser);
  t.boolean("no_cross_modal", f.no_cross_modal);
  t.boolean("no_disentangle", f.no_disentangle);
  t.boolean("no_shared_codebook", f.no_shared_codebook);
  t.boolean("no_prototype_align", f.no_prototype_align);
  t.boolean("no_spec_loss", f.no_spec_loss);
  return t.fields;
}

}  // namespace

std::vector<Modality> parse_modality_list(const std::string& text) {
  std::vector<Modality> out;
  std::stringstream ss(text);
  std::string token;
  while (std::getline(ss, token, ',')) {
    token = trim(token);
    auto m = parse_modality(token);
    if (!m) throw ConfigError("unknown modality '" + token + "' (expected eeg, eog, ecg or emg)");
    if (std::find(out.begin(), out.end(), *m) != out.end()) throw ConfigError("modality '" + token + "' repeated");
    out.push_back(*m);
  }
  if (out.empty()) throw ConfigError("empty modality list");
  return out;
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  std::vector<Field> table = fields(base);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' is outside a [section]");
    bool known_section = false;
    for (const auto& f : table) known_section = known_section || f.section == section;
    if (!known_section) throw ConfigError("unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      auto it = std::find_if(table.begin(), table.end(),
                             [&](const Field& f) { return f.section == section && f.key == key; });
      if (it == table.end()) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
      it->set(trim(value.data()));
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_ini(const RunConfig& config) {
  RunConfig copy = config;
  std::string out, section;
  for (const auto& f : fields(copy)) {
    if (f.section != section) {
      section = f.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

std::filesystem::path RunConfig::manifest() const { return data.empty() ? out / "manifest.tsv" : data; }

int RunConfig::resolved_threads() const {
  if (threads > 0) return threads;
  if (const char* env = std::getenv("POMNI_THREADS"); env && *env) {
    const long long v = parse_number<long long>("POMNI_THREADS", trim(env));
    if (v < 1 || v > 4096) bad("POMNI_THREADS", env, "must lie in [1, 4096]");
    return static_cast<int>(v);
  }
  return 1;
}

TaskKind RunConfig::task_kind() const {
  if (task == "binary") return TaskKind::Binary;
  if (task == "multiclass") return TaskKind::MultiClass;
  if (task == "regression") return TaskKind::Regression;
  throw ConfigError("finetune.task is unresolved; fine-tune on data first");
}

void RunConfig::resolve_task(const Dataset& data) {
  const TaskKind kind = pomni::task_kind(data);
  const std::string name = kind == TaskKind::Binary ? "binary" : kind == TaskKind::MultiClass ? "multiclass" : "regression";
  if (task != "auto" && task != name) throw ConfigError("finetune.task = " + task + " but the data is " + name);
  task = name;
  if (kind == TaskKind::Regression) {
    if (target_dim != 0 && target_dim != data.target_dim) {
      throw ConfigError("finetune.target_dim = " + std::to_string(target_dim) + " but the data has " +
                        std::to_string(data.target_dim));
    }
    target_dim = data.target_dim;
  } else {
    if (classes != 0 && classes != data.classes) {
      throw ConfigError("finetune.classes = " + std::to_string(classes) + " but the data has " +
                        std::to_string(data.classes));
    }
    classes = data.classes;
  }
}

TokenizerConfig RunConfig::tokenizer_config() const {
  TokenizerConfig t;
  t.modalities = modalities;
  t.specs = default_specs();
  t.encoders = default_encoders(modalities, t.specs, model.encoder_layers, model.encoder_heads, model.eeg_hidden,
                                model.other_hidden);
  t.codebook_size = model.codebook_size;
  t.code_dim = model.code_dim;
  t.decoder_hidden = model.decoder_hidden;
  t.decoder_layers = model.decoder_layers;
  t.decoder_heads = model.decoder_heads;
  t.alpha1 = alpha1;
  t.alpha2 = alpha2;
  t.ema_decay = ema_decay;
  t.cross_modal = !flags.no_cross_modal;
  t.disentangle = !flags.no_disentangle;
  t.shared_codebook = !flags.no_shared_codebook;
  return t;
}

PretrainConfig RunConfig::pretrain_config() const {
  PretrainConfig p;
  p.modalities = modalities;
  p.encoders = default_encoders(modalities, default_specs(), model.encoder_layers, model.encoder_heads,
                                model.eeg_hidden, model.other_hidden);
  p.mask_ratio = mask_ratio;
  p.codebook_size = model.codebook_size;
  p.shared_head = !flags.no_shared_codebook;
  return p;
}

FinetuneConfig RunConfig::finetune_config() const {
  FinetuneConfig f;
  f.modalities = modalities;
  f.encoders = default_encoders(modalities, default_specs(), model.encoder_layers, model.encoder_heads,
                                model.eeg_hidden, model.other_hidden);
  f.tokens = model.tokens;
  f.width = model.width;
  f.fuser_heads = model.fuser_heads;
  f.experts = flags.moe_fuser ? model.experts : 0;
  f.kind = task_kind();
  f.classes = f.kind == TaskKind::Regression ? 2 : classes;
  f.target_dim = f.kind == TaskKind::Regression ? target_dim : 1;
  f.prototypes = model.prototypes;
  f.gamma_main = gamma_main;
  f.gamma_align = gamma_align;
  f.gamma_spec = gamma_spec;
  f.gamma_by_mod = gamma_by_mod;
  f.label_smoothing = label_smoothing;
  f.prototype_align = !flags.no_prototype_align;
  f.spec_loss = !flags.no_spec_loss;
  f.freeze_encoders = flags.freeze_encoders;
  return f;
}

void RunConfig::validate() const {
  try {
    for (const auto& [name, o] : {std::pair<const char*, const OptimConfig*>{"tokenizer", &tokenizer_optim},
                                  {"pretrain", &pretrain_optim},
                                  {"finetune", &finetune_optim}}) {
      o->validate(name);
    }
    gen.validate();
    tokenizer_config().validate();
    for (const auto& [m, e] : tokenizer_config().encoders) e.validate();
    pretrain_config().validate();
    if (task != "auto") finetune_config().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

TokenizerTrainOptions RunConfig::tokenizer_options() const {
  TokenizerTrainOptions o;
  o.optim = tokenizer_optim;
  o.threads = resolved_threads();
  o.seed = seed;
  return o;
}

PretrainOptions RunConfig::pretrain_options() const {
  PretrainOptions o;
  o.optim = pretrain_optim;
  o.threads = resolved_threads();
  o.seed = seed;
  return o;
}

FinetuneOptions RunConfig::finetune_options() const {
  FinetuneOptions o;
  o.optim = finetune_optim;
  o.threads = resolved_threads();
  o.seed = seed;
  return o;
}

}  // namespace pomni
