#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pomni {

enum class Modality : std::uint8_t { EEG = 0, EOG = 1, ECG = 2, EMG = 3 };

inline constexpr std::array<Modality, 4> kAllModalities{Modality::EEG, Modality::EOG, Modality::ECG, Modality::EMG};

std::string_view modality_name(Modality m);           // "eeg", "eog", ...
std::optional<Modality> parse_modality(std::string_view token);  // case-insensitive

/// Per-modality preprocessing and patching constants.
struct ModalitySpec {
  Modality modality = Modality::EEG;
  double band_low = 0.1;
  double band_high = 75.0;
  std::vector<double> notches{50.0};
  int rate = 200;   // target sampling rate S, Hz
  int patch = 200;  // samples per patch P

  double patch_seconds() const { return static_cast<double>(patch) / rate; }
};

/// Defaults: EEG/EOG resampled to 200 Hz (P = 200 / 100), ECG/EMG to 500 Hz
/// (P = 100). Line noise at 50 Hz; EMG also notches the harmonics.
ModalitySpec default_spec(Modality m);

/// f_j = (S_j * P_anchor) / (S_anchor * P_j): the number of modality-j patches
/// covering one anchor patch. Throws std::invalid_argument when not integral.
int alignment_factor(const ModalitySpec& modality, const ModalitySpec& anchor);

}  // namespace pomni
