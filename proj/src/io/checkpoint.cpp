#include "pomni/io/checkpoint.hpp"

#include "pomni/io/binary.hpp"

#include <fstream>
#include <iterator>

namespace pomni {

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void Checkpoint::put(const std::string& name, Tensor<float> value) {
  for (auto& [n, t] : tensors) {
    if (n == name) {
      t = std::move(value);
      return;
    }
  }
  tensors.emplace_back(name, std::move(value));
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  ByteWriter w;
  w.bytes("POCK", 4);
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + name.substr(0, 64));
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (Index d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
    for (Index i = 0; i < t.size(); ++i) w.f32(t[i]);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.config.size()));
  w.bytes(ckpt.config.data(), ckpt.config.size());
  write_file_atomic(path, w.data());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::vector<char> buf;
  try {
    buf = read_file(path);
  } catch (const std::exception& e) {
    throw CheckpointError(e.what());
  }
  ByteReader r(buf, path.string());
  try {
    if (r.string(4) != "POCK") r.fail("bad magic, expected POCK");
    const auto version = r.u16();
    if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
    const auto count = r.u32();
    Checkpoint ckpt;
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = r.u16();
      std::string name = r.string(len);
      const auto rank = r.u8();
      Shape shape;
      std::uint64_t total = 1;
      for (int d = 0; d < rank; ++d) {
        const auto dim = r.u64();
        if (dim == 0 || dim > (std::uint64_t{1} << 40)) r.fail("invalid dimension in tensor " + name);
        total *= dim;
        if (total > r.remaining() / 4 + 1) r.fail("tensor " + name + " larger than the file");
        shape.push_back(static_cast<Index>(dim));
      }
      Tensor<float> t(shape);
      if (r.remaining() < 4 * static_cast<std::size_t>(t.size())) r.fail("truncated data for tensor " + name);
      for (Index k = 0; k < t.size(); ++k) t[k] = r.f32();
      ckpt.tensors.emplace_back(std::move(name), std::move(t));
    }
    const auto clen = r.u32();
    ckpt.config = r.string(clen);
    if (r.remaining() != 0) r.fail("trailing bytes after config");
    return ckpt;
  } catch (const FormatError& e) {
    throw CheckpointError(e.what());
  }
}

void store_params(Checkpoint& ckpt, const ParamStore<float>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) ckpt.put(params[i].name, params[i].value);
}

std::size_t load_params(const Checkpoint& ckpt, ParamStore<float>& params, const std::string& prefix) {
  std::size_t loaded = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.name.rfind(prefix, 0) != 0) continue;
    const auto* t = ckpt.find(p.name);
    if (!t) throw CheckpointShapeError("checkpoint lacks tensor " + p.name);
    if (t->shape() != p.value.shape()) {
      throw CheckpointShapeError("tensor " + p.name + " has shape " + to_string(t->shape()) + " in checkpoint but " +
                                 to_string(p.value.shape()) + " in model");
    }
    p.value = *t;
    ++loaded;
  }
  return loaded;
}

}  // namespace pomni
