#include "pomni/sigproc/modality.hpp"

#include <cctype>
#include <stdexcept>

namespace pomni {

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::EEG: return "eeg";
    case Modality::EOG: return "eog";
    case Modality::ECG: return "ecg";
    case Modality::EMG: return "emg";
  }
  return "?";
}

std::optional<Modality> parse_modality(std::string_view token) {
  std::string lower;
  for (char c : token) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  for (Modality m : kAllModalities) {
    if (lower == modality_name(m)) return m;
  }
  return std::nullopt;
}

ModalitySpec default_spec(Modality m) {
  switch (m) {
    case Modality::EEG: return {m, 0.1, 75.0, {50.0}, 200, 200};
    case Modality::EOG: return {m, 0.1, 75.0, {50.0}, 200, 100};
    case Modality::ECG: return {m, 0.5, 60.0, {50.0}, 500, 100};
    case Modality::EMG: return {m, 5.0, 200.0, {50.0, 100.0, 150.0}, 500, 100};
  }
  throw std::invalid_argument("unknown modality");
}

int alignment_factor(const ModalitySpec& modality, const ModalitySpec& anchor) {
  const long num = static_cast<long>(modality.rate) * anchor.patch;
  const long den = static_cast<long>(anchor.rate) * modality.patch;
  if (den <= 0 || num % den != 0) {
    throw std::invalid_argument("alignment factor for " + std::string(modality_name(modality.modality)) +
                                " is not an integer: " + std::to_string(num) + "/" + std::to_string(den));
  }
  return static_cast<int>(num / den);
}

}  // namespace pomni
