#include "pomni/encoder/encoder.hpp"

#include <stdexcept>

namespace pomni {

ModalityTokens make_tokens(const PatchGrid& grid) {
  ModalityTokens m;
  m.modality = grid.modality;
  m.channels = grid.channels;
  m.per_channel = grid.per_channel();
  m.patches = Tensor<Real>::from_matrix(grid.patches.cast<Real>());
  m.targets = Tensor<Real>::from_matrix(reconstruction_targets(grid).cast<Real>());
  m.channel.assign(grid.channel.begin(), grid.channel.end());
  m.time.assign(grid.time.begin(), grid.time.end());
  return m;
}

Index ConvSpec::output_length(Index patch) const {
  Index n = patch;
  for (std::size_t i = 0; i < 3; ++i) n = (n + 2 * pad[i] - kernel[i]) / stride[i] + 1;
  return n;
}

void EncoderConfig::validate() const {
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument("encoder " + std::string(modality_name(modality)) + ": " + what);
  };
  if (hidden <= 0 || hidden % 2 != 0) fail("hidden size must be positive and even, got " + std::to_string(hidden));
  if (heads <= 0 || hidden % heads != 0) fail("head count must divide hidden size");
  if (layers < 0) fail("negative layer count");
  if (patch <= 0 || conv.output_length(patch) <= 0) fail("patch too short for the conv chain");
  if (max_channels <= 0 || max_time <= 0) fail("embedding tables must be non-empty");
  for (std::size_t i = 1; i < 3; ++i) {
    if (conv.in[i] != conv.out[i - 1]) fail("conv chain channels do not connect");
  }
  if (conv.in[0] != 1) fail("first conv layer must take one input channel");
  for (Index c : conv.out) {
    if (c % conv.groups != 0) fail("group count must divide conv channels");
  }
}

Encoder::Encoder(ParamStore<Real>& ps, const std::string& prefix, const EncoderConfig& config, Rng& rng)
    : config_(config), prefix_(prefix) {
  config_.validate();
  const auto& c = config_.conv;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string name = prefix + ".conv" + std::to_string(i);
    conv_[i] = &ps.add(name + ".weight", trunc_normal<Real>(rng, {c.out[i], c.in[i], c.kernel[i]}));
    gn_gamma_[i] = &ps.add(name + ".norm.weight", Tensor<Real>::constant({c.out[i]}, 1.f));
    gn_beta_[i] = &ps.add(name + ".norm.bias", Tensor<Real>::zeros({c.out[i]}));
  }
  proj_ = Linear<Real>::make(ps, prefix + ".proj", c.out[2] * c.output_length(config_.patch), config_.hidden, true, rng);
  spatial_ = &ps.add(prefix + ".spatial_embed", trunc_normal<Real>(rng, {config_.max_channels, config_.hidden}));
  temporal_ = &ps.add(prefix + ".temporal_embed", trunc_normal<Real>(rng, {config_.max_time, config_.hidden}));
  stack_ = TransformerStack<Real>::make(ps, prefix + ".transformer", config_.layers, config_.hidden, config_.heads,
                                        config_.hidden * config_.mlp_ratio, rng);
}

Var<Real> Encoder::temporal_encode(Tape<Real>& t, Var<Real> patches) const {
  if (patches.value().rank() != 2 || patches.dim(1) != config_.patch) {
    throw ShapeError("temporal_encode: expected [N, " + std::to_string(config_.patch) + "] patches, got " +
                     to_string(patches.shape()));
  }
  const Index n = patches.dim(0);
  const auto& c = config_.conv;
  Var<Real> h = reshape(patches, {n, 1, config_.patch});
  for (std::size_t i = 0; i < 3; ++i) {
    h = conv1d(h, t.param(*conv_[i]), std::nullopt, c.stride[i], c.pad[i]);
    h = gelu(group_norm(h, c.groups, t.param(*gn_gamma_[i]), t.param(*gn_beta_[i])));
  }
  return proj_(t, reshape(h, {n, h.dim(1) * h.dim(2)}));
}

Var<Real> Encoder::forward(Tape<Real>& t, const ModalityTokens& x, std::span<const char> mask,
                           std::optional<Var<Real>> mask_token) const {
  for (std::size_t i = 0; i < x.channel.size(); ++i) {
    if (x.channel[i] < 0 || x.channel[i] >= config_.max_channels || x.time[i] < 0 || x.time[i] >= config_.max_time) {
      throw std::invalid_argument("encoder " + std::string(modality_name(config_.modality)) + ": token " +
                                  std::to_string(i) + " index (channel " + std::to_string(x.channel[i]) + ", time " +
                                  std::to_string(x.time[i]) + ") outside embedding tables " +
                                  std::to_string(config_.max_channels) + "x" + std::to_string(config_.max_time));
    }
  }
  Var<Real> h = temporal_encode(t, t.constant(x.patches));
  if (!mask.empty()) {
    if (!mask_token) throw std::invalid_argument("encoder: mask given without a mask token");
    h = replace_rows(h, *mask_token, mask);
  }
  h = add(h, gather_rows(t.param(*spatial_), std::span<const Index>(x.channel)));
  h = add(h, gather_rows(t.param(*temporal_), std::span<const Index>(x.time)));
  return stack_(t, h);
}

std::map<Modality, EncoderConfig> default_encoders(const std::vector<Modality>& modalities,
                                                   const std::map<Modality, ModalitySpec>& specs, Index layers,
                                                   Index heads, Index eeg_hidden, Index other_hidden) {
  std::map<Modality, EncoderConfig> out;
  for (Modality m : modalities) {
    EncoderConfig c;
    c.modality = m;
    c.patch = specs.at(m).patch;
    c.hidden = m == Modality::EEG ? eeg_hidden : other_hidden;
    c.layers = layers;
    c.heads = heads;
    out[m] = c;
  }
  return out;
}

}  // namespace pomni
