#include "pomni/datagen/generator.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace pomni {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Microvolt scales.
constexpr double kSharedAmp[] = {20.0, 25.0, 30.0, 15.0};  // by modality code
constexpr double kNoiseAmp = 4.0;
constexpr double kLineAmp = 5.0;

struct SubjectTraits {
  std::map<Modality, std::vector<double>> gain;
  double heart_rate = 1.2;
  double drift_freq = 0.3;
};

SubjectTraits subject_traits(const GenSpec& spec, Rng rng) {
  SubjectTraits s;
  for (Modality m : spec.modalities) {
    auto& g = s.gain[m];
    for (int c = 0; c < spec.channels.at(m); ++c) g.push_back(rng.uniform(0.8, 1.2));
  }
  s.heart_rate = rng.uniform(1.0, 1.4);
  s.drift_freq = rng.uniform(0.2, 0.5);
  return s;
}

std::string split_of(const GenSpec& spec, int index) {
  if (index < spec.train) return "train";
  if (index < spec.train + spec.valid) return "valid";
  return "test";
}

int subject_of(const GenSpec& spec, int index) {
  const int per = spec.per_subject;
  const int train_subjects = (spec.train + per - 1) / per;
  const int valid_subjects = (spec.valid + per - 1) / per;
  if (index < spec.train) return index / per;
  if (index < spec.train + spec.valid) return train_subjects + (index - spec.train) / per;
  return train_subjects + valid_subjects + (index - spec.train - spec.valid) / per;
}

Rng sample_rng(const GenSpec& spec, std::size_t index) {
  return Rng(spec.seed).split("datagen").split("sample").split(static_cast<std::uint64_t>(index));
}

// Label draw and latent parameters come from the same substream so the
// diagnostic accessor reproduces them exactly.
LatentTrack draw_latent(const GenSpec& spec, Rng rng, std::uint32_t& label, std::vector<float>& target) {
  double centre = 0.0;
  std::vector<double> amp_scale{1.0, 0.6, 0.4};
  if (spec.kind == LabelKind::Regression) {
    for (int d = 0; d < spec.regression_dim; ++d) target.push_back(static_cast<float>(rng.uniform()));
    centre = spec.band_centre(0) + spec.band_spacing * (spec.classes - 1) * target[0];
    for (int d = 1; d < std::min(spec.regression_dim, 3); ++d) amp_scale[static_cast<std::size_t>(d)] = 0.3 + 0.7 * target[static_cast<std::size_t>(d)];
  } else {
    label = static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(spec.classes)));
    centre = spec.band_centre(static_cast<int>(label));
  }
  LatentTrack lt;
  for (double a : amp_scale) {
    lt.freqs.push_back(centre + rng.uniform(-spec.band_halfwidth, spec.band_halfwidth));
    lt.phases.push_back(rng.uniform(0.0, kTwoPi));
    lt.amps.push_back(a * rng.uniform(0.8, 1.2));
  }
  return lt;
}

}  // namespace

void GenSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("gen spec: " + what); };
  if (modalities.empty()) fail("no modalities");
  for (Modality m : modalities) {
    auto it = channels.find(m);
    if (it == channels.end() || it->second <= 0) fail("modality " + std::string(modality_name(m)) + " needs channels > 0");
  }
  if (!(duration > 0.0)) fail("duration must be positive");
  if (!(source_rate > 0.0) || source_rate != std::floor(source_rate)) fail("source rate must be a positive integer");
  if (source_rate * duration < 1.0) fail("duration shorter than one sample");
  if (kind == LabelKind::Class && classes < 2) fail("need at least 2 classes");
  if (kind == LabelKind::Regression && regression_dim < 1) fail("regression dimension must be >= 1");
  if (train < 0 || valid < 0 || test < 0 || train + valid + test == 0) fail("split sizes must be non-negative with a positive total");
  if (per_subject <= 0) fail("recordings per subject must be positive");
  if (noise < 0.0) fail("noise must be >= 0");
  if (band_halfwidth < 0.0 || first_band_centre - band_halfwidth <= 0.0) fail("latent bands must stay above 0 Hz");
  if (band_centre(std::max(classes - 1, 0)) + band_halfwidth >= source_rate / 2.0) fail("latent bands exceed Nyquist");
}

std::vector<double> LatentTrack::sample(double rate, Eigen::Index n) const {
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / rate;
    double v = 0.0;
    for (std::size_t k = 0; k < freqs.size(); ++k) v += amps[k] * std::sin(kTwoPi * freqs[k] * t + phases[k]);
    out[static_cast<std::size_t>(i)] = v;
  }
  return out;
}

LatentTrack latent_for(const GenSpec& spec, std::size_t index) {
  std::uint32_t label = 0;
  std::vector<float> target;
  return draw_latent(spec, sample_rng(spec, index).split("latent"), label, target);
}

std::vector<GeneratedSample> generate(const GenSpec& spec) {
  spec.validate();
  const int total = spec.train + spec.valid + spec.test;
  const auto n = static_cast<Eigen::Index>(std::llround(spec.source_rate * spec.duration));
  const double rate = spec.source_rate;
  const Rng root = Rng(spec.seed).split("datagen");

  std::map<int, SubjectTraits> subjects;
  std::vector<GeneratedSample> out;
  out.reserve(static_cast<std::size_t>(total));
  for (int index = 0; index < total; ++index) {
    GeneratedSample gs;
    gs.split = split_of(spec, index);
    gs.subject = subject_of(spec, index);
    if (!subjects.count(gs.subject)) {
      subjects.emplace(gs.subject, subject_traits(spec, root.split("subject").split(static_cast<std::uint64_t>(gs.subject))));
    }
    const SubjectTraits& traits = subjects.at(gs.subject);
    Rng rng = sample_rng(spec, static_cast<std::size_t>(index));
    Recording& rec = gs.recording;
    rec.kind = spec.kind;
    const LatentTrack latent = draw_latent(spec, rng.split("latent"), rec.label, rec.target);
    const std::vector<double> shared = latent.sample(rate, n);

    for (Modality m : spec.modalities) {
      Rng mr = rng.split(modality_name(m));
      const int channels = spec.channels.at(m);
      ModalityRecording mod;
      mod.modality = m;
      mod.rate = static_cast<std::uint32_t>(rate);
      mod.data.resize(channels, n);
      const double line_phase = mr.uniform(0.0, kTwoPi);
      for (int c = 0; c < channels; ++c) {
        Rng cr = mr.split(static_cast<std::uint64_t>(c));
        std::vector<double> x(static_cast<std::size_t>(n), 0.0);
        const double g = kSharedAmp[static_cast<int>(m)] * traits.gain.at(m)[static_cast<std::size_t>(c)];
        for (Eigen::Index i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] = g * shared[static_cast<std::size_t>(i)];

        switch (m) {
          case Modality::EEG: {  // beta-band background
            for (int k = 0; k < 4; ++k) {
              const double f = cr.uniform(18.0, 30.0), ph = cr.uniform(0.0, kTwoPi), a = cr.uniform(3.0, 7.0);
              for (Eigen::Index i = 0; i < n; ++i) x[static_cast<std::size_t>(i)] += a * std::sin(kTwoPi * f * i / rate + ph);
            }
            break;
          }
          case Modality::EOG: {  // slow drift and blinks
            const double ph = cr.uniform(0.0, kTwoPi);
            const double blink_gain = c == 0 ? 60.0 : 25.0;
            std::vector<double> blinks;
            Rng br = mr.split("blinks");
            const auto count = br.below(3);
            for (std::uint64_t b = 0; b < count; ++b) blinks.push_back(br.uniform(0.0, spec.duration));
            for (Eigen::Index i = 0; i < n; ++i) {
              const double t = static_cast<double>(i) / rate;
              double v = 15.0 * std::sin(kTwoPi * traits.drift_freq * t + ph);
              for (double tb : blinks) v += blink_gain * std::exp(-0.5 * std::pow((t - tb) / 0.05, 2));
              x[static_cast<std::size_t>(i)] += v;
            }
            break;
          }
          case Modality::ECG: {  // R spike and T wave per beat
            const double offset = mr.uniform(0.0, 1.0 / traits.heart_rate);
            for (Eigen::Index i = 0; i < n; ++i) {
              const double t = static_cast<double>(i) / rate;
              double v = 0.0;
              for (double tb = offset - 1.0; tb < spec.duration + 1.0; tb += 1.0 / traits.heart_rate) {
                v += 120.0 * std::exp(-0.5 * std::pow((t - tb) / 0.012, 2));
                v += 25.0 * std::exp(-0.5 * std::pow((t - tb - 0.25) / 0.04, 2));
              }
              x[static_cast<std::size_t>(i)] += v;
            }
            break;
          }
          case Modality::EMG: {  // bursts of broadband activity
            const double burst = cr.uniform(0.0, spec.duration);
            for (Eigen::Index i = 0; i < n; ++i) {
              const double t = static_cast<double>(i) / rate;
              const double env = 0.3 + std::exp(-0.5 * std::pow((t - burst) / 0.3, 2));
              x[static_cast<std::size_t>(i)] += 20.0 * env * cr.normal();
            }
            break;
          }
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          x[static_cast<std::size_t>(i)] += kLineAmp * std::sin(kTwoPi * 50.0 * i / rate + line_phase) +
                                            spec.noise * kNoiseAmp * cr.normal();
          mod.data(c, i) = static_cast<float>(x[static_cast<std::size_t>(i)]);
        }
      }
      rec.modalities.push_back(std::move(mod));
    }
    out.push_back(std::move(gs));
  }
  return out;
}

std::vector<ManifestEntry> write_dataset(const std::vector<GeneratedSample>& samples, const std::filesystem::path& dir) {
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    std::ostringstream name;
    name << s.split << "/" << std::setw(5) << std::setfill('0') << i << ".psrd";
    write_psrd(s.recording, dir / name.str());
    ManifestEntry e;
    e.path = name.str();
    if (s.recording.kind == LabelKind::Class) {
      e.label = std::to_string(s.recording.label);
    } else if (s.recording.kind == LabelKind::Regression) {
      std::ostringstream lab;
      lab << std::setprecision(9);
      for (std::size_t d = 0; d < s.recording.target.size(); ++d) lab << (d ? "," : "") << s.recording.target[d];
      e.label = lab.str();
    } else {
      e.label = "-";
    }
    e.split = s.split;
    e.subject = s.subject;
    entries.push_back(std::move(e));
  }
  write_manifest(entries, dir / "manifest.tsv");
  return entries;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "# path\tlabel\tsplit\tsubject\n";
  for (const auto& e : entries) out << e.path.generic_string() << '\t' << e.label << '\t' << e.split << '\t' << e.subject << '\n';
  const std::string text = out.str();
  write_file_atomic(path, std::vector<char>(text.begin(), text.end()));
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    ManifestEntry e;
    std::string p, subject;
    if (!std::getline(fields, p, '\t') || !std::getline(fields, e.label, '\t') || !std::getline(fields, e.split, '\t') ||
        !std::getline(fields, subject, '\t')) {
      throw FormatError(path.string() + ": line " + std::to_string(lineno) + " needs 4 tab-separated fields");
    }
    if (e.split != "train" && e.split != "valid" && e.split != "test") {
      throw FormatError(path.string() + ": line " + std::to_string(lineno) + " has unknown split '" + e.split + "'");
    }
    try {
      e.subject = std::stoi(subject);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": line " + std::to_string(lineno) + " has a non-integer subject");
    }
    e.path = std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : path.parent_path() / p;
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace pomni
