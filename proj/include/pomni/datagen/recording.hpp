#pragma once

// Raw recordings and the PSRD on-disk format. All fields little-endian:
//   "POMN" | u16 version=1 | u8 label kind | u8 modality count |
//   label payload (kind 1: u32 class; kind 2: u16 dim, f32 x dim) |
//   per modality: u8 code, u16 channels, u32 rate, u64 samples, f32 data (channel-major)

#include "pomni/io/binary.hpp"
#include "pomni/sigproc/modality.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <string>
#include <vector>

namespace pomni {

using RawSignal = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class LabelKind : std::uint8_t { None = 0, Class = 1, Regression = 2 };

struct ModalityRecording {
  Modality modality = Modality::EEG;
  std::uint32_t rate = 0;
  RawSignal data;  // channels x samples, microvolts
};

struct Recording {
  LabelKind kind = LabelKind::None;
  std::uint32_t label = 0;
  std::vector<float> target;
  std::vector<ModalityRecording> modalities;

  const ModalityRecording* find(Modality m) const;
};

/// Bit-level equality of labels, layout and samples.
bool identical(const Recording& a, const Recording& b);

inline constexpr std::uint16_t kPsrdVersion = 1;

void write_psrd(const Recording& rec, const std::filesystem::path& path);
/// Throws FormatError with the byte offset on bad magic, version or truncation.
Recording read_psrd(const std::filesystem::path& path);
std::vector<char> encode_psrd(const Recording& rec);
Recording decode_psrd(const std::vector<char>& bytes, const std::string& source);

}  // namespace pomni
