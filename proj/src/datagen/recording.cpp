#include "pomni/datagen/recording.hpp"

#include <cstring>

namespace pomni {

const ModalityRecording* Recording::find(Modality m) const {
  for (const auto& r : modalities) {
    if (r.modality == m) return &r;
  }
  return nullptr;
}

bool identical(const Recording& a, const Recording& b) {
  if (a.kind != b.kind || a.label != b.label || a.modalities.size() != b.modalities.size()) return false;
  if (a.target.size() != b.target.size() ||
      std::memcmp(a.target.data(), b.target.data(), a.target.size() * sizeof(float)) != 0) {
    return false;
  }
  for (std::size_t i = 0; i < a.modalities.size(); ++i) {
    const auto& x = a.modalities[i];
    const auto& y = b.modalities[i];
    if (x.modality != y.modality || x.rate != y.rate || x.data.rows() != y.data.rows() ||
        x.data.cols() != y.data.cols()) {
      return false;
    }
    if (std::memcmp(x.data.data(), y.data.data(), static_cast<std::size_t>(x.data.size()) * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

std::vector<char> encode_psrd(const Recording& rec) {
  ByteWriter w;
  w.bytes("POMN", 4);
  w.u16(kPsrdVersion);
  w.u8(static_cast<std::uint8_t>(rec.kind));
  w.u8(static_cast<std::uint8_t>(rec.modalities.size()));
  if (rec.kind == LabelKind::Class) w.u32(rec.label);
  if (rec.kind == LabelKind::Regression) {
    w.u16(static_cast<std::uint16_t>(rec.target.size()));
    for (float v : rec.target) w.f32(v);
  }
  for (const auto& m : rec.modalities) {
    w.u8(static_cast<std::uint8_t>(m.modality));
    w.u16(static_cast<std::uint16_t>(m.data.rows()));
    w.u32(m.rate);
    w.u64(static_cast<std::uint64_t>(m.data.cols()));
    for (Eigen::Index i = 0; i < m.data.size(); ++i) w.f32(m.data.data()[i]);
  }
  return w.data();
}

Recording decode_psrd(const std::vector<char>& bytes, const std::string& source) {
  ByteReader r(bytes, source);
  if (r.string(4) != "POMN") r.fail("bad magic, expected POMN");
  const auto version = r.u16();
  if (version != kPsrdVersion) r.fail("unsupported version " + std::to_string(version));
  Recording rec;
  const auto kind = r.u8();
  if (kind > 2) r.fail("unknown label kind " + std::to_string(kind));
  rec.kind = static_cast<LabelKind>(kind);
  const auto count = r.u8();
  if (rec.kind == LabelKind::Class) rec.label = r.u32();
  if (rec.kind == LabelKind::Regression) {
    const auto dim = r.u16();
    for (int i = 0; i < dim; ++i) rec.target.push_back(r.f32());
  }
  for (int i = 0; i < count; ++i) {
    ModalityRecording m;
    const auto code = r.u8();
    if (code > 3) r.fail("unknown modality code " + std::to_string(code));
    m.modality = static_cast<Modality>(code);
    const auto channels = r.u16();
    m.rate = r.u32();
    const auto samples = r.u64();
    if (channels == 0 || samples == 0 || m.rate == 0) r.fail("empty modality block");
    if (samples > r.remaining() / 4 / channels) r.fail("truncated signal data");
    m.data.resize(channels, static_cast<Eigen::Index>(samples));
    for (Eigen::Index k = 0; k < m.data.size(); ++k) m.data.data()[k] = r.f32();
    rec.modalities.push_back(std::move(m));
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return rec;
}

void write_psrd(const Recording& rec, const std::filesystem::path& path) {
  write_file_atomic(path, encode_psrd(rec));
}

Recording read_psrd(const std::filesystem::path& path) {
  std::vector<char> bytes;
  try {
    bytes = read_file(path);
  } catch (const std::runtime_error& e) {
    throw FormatError(e.what());
  }
  return decode_psrd(bytes, path.string());
}

}  // namespace pomni
