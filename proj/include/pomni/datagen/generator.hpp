#pragma once

#include "pomni/datagen/recording.hpp"
#include "pomni/numerics/rng.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace pomni {

/// Synthetic recordings whose class (or regression target) sets the
/// frequency of a latent oscillation shared by every modality. Each modality
/// adds its own private activity, white noise and 50 Hz line noise.
struct GenSpec {
  std::vector<Modality> modalities{Modality::EEG, Modality::EOG, Modality::ECG};
  std::map<Modality, int> channels{{Modality::EEG, 2}, {Modality::EOG, 2}, {Modality::ECG, 1}, {Modality::EMG, 1}};
  double source_rate = 1000.0;
  double duration = 2.0;  // seconds
  LabelKind kind = LabelKind::Class;
  int classes = 3;
  int regression_dim = 1;
  /// Class c oscillates within band_centre(c) +- band_halfwidth Hz.
  double first_band_centre = 5.0;
  double band_spacing = 5.0;
  double band_halfwidth = 0.3;
  /// Scales the white-noise floor; 0 disables it.
  double noise = 1.0;
  int train = 600;
  int valid = 150;
  int test = 150;
  int per_subject = 10;
  std::uint64_t seed = 0;

  void validate() const;
  double band_centre(int cls) const { return first_band_centre + band_spacing * cls; }
};

struct GeneratedSample {
  Recording recording;
  std::string split;
  int subject = 0;
};

/// Deterministic for a given spec; subjects never straddle splits.
std::vector<GeneratedSample> generate(const GenSpec& spec);

/// Shared latent of one sample evaluated at `rate`, for diagnostics.
struct LatentTrack {
  std::vector<double> freqs, phases, amps;
  std::vector<double> sample(double rate, Eigen::Index n) const;
};
LatentTrack latent_for(const GenSpec& spec, std::size_t index);

struct ManifestEntry {
  std::filesystem::path path;  // absolute or relative to the manifest
  std::string label;           // class index, or comma-separated targets
  std::string split;
  int subject = 0;
};

/// Writes one PSRD per sample under `dir` plus `dir/manifest.tsv`.
std::vector<ManifestEntry> write_dataset(const std::vector<GeneratedSample>& samples, const std::filesystem::path& dir);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
/// Paths are resolved against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace pomni
