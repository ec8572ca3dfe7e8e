#pragma once

#include "pomni/datagen/generator.hpp"
#include "pomni/encoder/encoder.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace pomni {

/// One preprocessed, patched sample. `tokens` follows Dataset::modalities.
struct Sample {
  std::vector<ModalityTokens> tokens;
  LabelKind kind = LabelKind::None;
  int label = 0;
  std::vector<float> target;
  int subject = 0;
};

struct Dataset {
  std::vector<Modality> modalities;
  std::map<Modality, ModalitySpec> specs;
  std::vector<Sample> train, valid, test;
  LabelKind kind = LabelKind::None;
  int classes = 0;     // class tasks: 1 + largest label
  int target_dim = 0;  // regression tasks

  const std::vector<Sample>& split(const std::string& name) const;
  int index_of(Modality m) const;  // -1 when absent
};

/// Preprocesses and patches the requested modalities of a recording.
/// Throws std::invalid_argument when a modality is missing.
Sample make_sample(const Recording& rec, const std::vector<Modality>& modalities,
                   const std::map<Modality, ModalitySpec>& specs);

/// Reads every manifest entry. Labels come from the recordings themselves.
Dataset load_dataset(const std::filesystem::path& manifest, const std::vector<Modality>& modalities,
                     const std::map<Modality, ModalitySpec>& specs, int threads = 1);

/// In-memory variant used by tests.
Dataset make_dataset(const std::vector<GeneratedSample>& samples, const std::vector<Modality>& modalities,
                     const std::map<Modality, ModalitySpec>& specs, int threads = 1);

std::map<Modality, ModalitySpec> default_specs();

}  // namespace pomni
