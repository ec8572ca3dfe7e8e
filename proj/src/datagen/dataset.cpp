#include "pomni/datagen/dataset.hpp"

#include "pomni/train/parallel.hpp"

#include <algorithm>
#include <stdexcept>

namespace pomni {

const std::vector<Sample>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  throw std::invalid_argument("unknown split " + name);
}

int Dataset::index_of(Modality m) const {
  auto it = std::find(modalities.begin(), modalities.end(), m);
  return it == modalities.end() ? -1 : static_cast<int>(it - modalities.begin());
}

std::map<Modality, ModalitySpec> default_specs() {
  std::map<Modality, ModalitySpec> specs;
  for (Modality m : kAllModalities) specs[m] = default_spec(m);
  return specs;
}

Sample make_sample(const Recording& rec, const std::vector<Modality>& modalities,
                   const std::map<Modality, ModalitySpec>& specs) {
  Sample s;
  s.kind = rec.kind;
  s.label = static_cast<int>(rec.label);
  s.target = rec.target;
  for (Modality m : modalities) {
    const auto* raw = rec.find(m);
    if (!raw) throw std::invalid_argument("recording lacks modality " + std::string(modality_name(m)));
    const ModalitySpec& spec = specs.at(m);
    const Signal x = preprocess(raw->data.cast<double>(), static_cast<double>(raw->rate), spec);
    s.tokens.push_back(make_tokens(patchify(x, m, spec.patch)));
  }
  return s;
}

namespace {

void finish(Dataset& ds) {
  int classes = 0;
  for (const auto* split : {&ds.train, &ds.valid, &ds.test}) {
    for (const auto& s : *split) {
      if (ds.kind == LabelKind::None) ds.kind = s.kind;
      if (s.kind != ds.kind) throw std::invalid_argument("dataset mixes label kinds");
      classes = std::max(classes, s.label + 1);
      ds.target_dim = std::max(ds.target_dim, static_cast<int>(s.target.size()));
    }
  }
  if (ds.kind == LabelKind::Class) ds.classes = classes;
}

}  // namespace

Dataset make_dataset(const std::vector<GeneratedSample>& samples, const std::vector<Modality>& modalities,
                     const std::map<Modality, ModalitySpec>& specs, int threads) {
  Dataset ds;
  ds.modalities = modalities;
  ds.specs = specs;
  std::vector<Sample> built(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    built[i] = make_sample(samples[i].recording, modalities, specs);
    built[i].subject = samples[i].subject;
  });
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& dst = samples[i].split == "train" ? ds.train : samples[i].split == "valid" ? ds.valid : ds.test;
    dst.push_back(std::move(built[i]));
  }
  finish(ds);
  return ds;
}

Dataset load_dataset(const std::filesystem::path& manifest, const std::vector<Modality>& modalities,
                     const std::map<Modality, ModalitySpec>& specs, int threads) {
  const auto entries = read_manifest(manifest);
  Dataset ds;
  ds.modalities = modalities;
  ds.specs = specs;
  std::vector<Sample> built(entries.size());
  parallel_for(entries.size(), threads, [&](std::size_t i) {
    built[i] = make_sample(read_psrd(entries[i].path), modalities, specs);
    built[i].subject = entries[i].subject;
  });
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& dst = entries[i].split == "train" ? ds.train : entries[i].split == "valid" ? ds.valid : ds.test;
    dst.push_back(std::move(built[i]));
  }
  finish(ds);
  return ds;
}

}  // namespace pomni
