#include "pomni/tokenizer/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pomni {

void TokenizerConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("tokenizer: " + what); };
  if (modalities.empty()) fail("no modalities");
  for (std::size_t i = 0; i < modalities.size(); ++i) {
    for (std::size_t j = i + 1; j < modalities.size(); ++j) {
      if (modalities[i] == modalities[j]) fail("duplicate modality " + std::string(modality_name(modalities[i])));
    }
    if (!specs.count(modalities[i])) fail("no spec for " + std::string(modality_name(modalities[i])));
    if (!encoders.empty() && !encoders.count(modalities[i])) {
      fail("no encoder config for " + std::string(modality_name(modalities[i])));
    }
  }
  if (!specs.count(Modality::EEG)) fail("the EEG spec fixes the shared time scale and must be present");
  if (codebook_size < 1 || code_dim < 1) fail("codebook size and code dimension must be >= 1");
  if (decoder_hidden < 1 || decoder_layers < 0 || decoder_heads < 1 || decoder_hidden % decoder_heads != 0) {
    fail("decoder hidden size must be positive and divisible by the head count");
  }
  if (!(alpha1 >= 0.0) || !(alpha2 >= 0.0)) fail("loss weights must be >= 0");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) fail("ema_decay must lie in (0, 1)");
  if (!(ema_eps > 0.0)) fail("ema_eps must be > 0");
  if (revive_after < 0) fail("revive_after must be >= 0");
}

Tokenizer::Tokenizer(ParamStore<Real>& ps, const TokenizerConfig& config, Rng& rng, const std::string& prefix)
    : config_(config), prefix_(prefix) {
  if (config_.encoders.empty()) config_.encoders = default_encoders(config_.modalities, config_.specs);
  config_.validate();
  const Index d_code = config_.code_dim;
  const Index k_codes = config_.codebook_size;
  const ModalitySpec& anchor_spec = config_.specs.at(Modality::EEG);
  for (std::size_t i = 0; i < config_.modalities.size(); ++i) {
    if (config_.modalities[i] == Modality::EEG) anchor_ = i;
  }
  for (std::size_t slot = 0; slot < config_.modalities.size(); ++slot) {
    const Modality m = config_.modalities[slot];
    const std::string base = prefix + "." + std::string(modality_name(m));
    Rng r = rng.split(modality_name(m));
    PerModality pm;
    pm.modality = m;
    pm.factor = alignment_factor(config_.specs.at(m), anchor_spec);
    EncoderConfig ec = config_.encoders.at(m);
    ec.modality = m;
    pm.encoder = Encoder(ps, base + ".encoder", ec, r);
    const Index half = ec.hidden / 2;
    pm.private_proj = Linear<Real>::make(ps, base + ".private_proj", half, d_code, true, r);
    if (config_.shared_codebook) {
      pm.shared_proj = Linear<Real>::make(ps, base + ".shared_proj", half, d_code, true, r);
      if (pm.factor > 1) {
        pm.ta_query = &ps.add(base + ".ta.query", trunc_normal<Real>(r, {half}));
        pm.ta_key = Linear<Real>::make(ps, base + ".ta.key", half, half, false, r);
        pm.ta_value = Linear<Real>::make(ps, base + ".ta.value", half, half, false, r);
      }
      if (config_.cross_modal && anchor_ && slot != *anchor_) {
        pm.cma_query = &ps.add(base + ".cma.query", trunc_normal<Real>(r, {pm.factor, d_code}));
        pm.cma_key = Linear<Real>::make(ps, base + ".cma.key", d_code, d_code, false, r);
        pm.cma_value = Linear<Real>::make(ps, base + ".cma.value", d_code, d_code, false, r);
      }
    }
    const Index h = config_.decoder_hidden;
    pm.decoder.input = Linear<Real>::make(ps, base + ".decoder.input", 2 * d_code, h, true, r);
    pm.decoder.stack = TransformerStack<Real>::make(ps, base + ".decoder.transformer", config_.decoder_layers, h,
                                                    config_.decoder_heads, 4 * h, r);
    pm.decoder.head = Linear<Real>::make(ps, base + ".decoder.head", h, target_width(m, config_.specs.at(m).patch),
                                         true, r);
    pm.codebook = Codebook::make(ps, base + ".codebook", k_codes, d_code, r);
    mods_.push_back(std::move(pm));
  }
  if (config_.shared_codebook) {
    Rng r = rng.split("shared");
    shared_ = Codebook::make(ps, prefix + ".shared.codebook", k_codes, d_code, r);
  }
}

std::size_t Tokenizer::slot_of(Modality m) const {
  for (std::size_t i = 0; i < mods_.size(); ++i) {
    if (mods_[i].modality == m) return i;
  }
  throw std::invalid_argument("tokenizer has no " + std::string(modality_name(m)) + " branch");
}

const ModalityTokens& Tokenizer::tokens_for(const Sample& s, std::size_t slot) const {
  for (const auto& x : s.tokens) {
    if (x.modality == mods_[slot].modality) return x;
  }
  throw std::invalid_argument("sample lacks modality " + std::string(modality_name(mods_[slot].modality)));
}

bool Tokenizer::uses_cross_modal(std::size_t slot) const {
  return config_.cross_modal && config_.shared_codebook && anchor_ && slot != *anchor_;
}

Var<Real> Tokenizer::temporal_align(Tape<Real>& t, std::size_t slot, Var<Real> z, const ModalityTokens& x) const {
  const PerModality& pm = mods_[slot];
  const Index f = pm.factor;
  if (f == 1) return z;
  const Index n = z.dim(0);
  const Index width = z.dim(1);
  if (x.per_channel % f != 0 || n != x.count()) {
    throw ShapeError("temporal_align: " + std::to_string(x.per_channel) + " patches per channel not divisible by " +
                     std::to_string(f));
  }
  for (Index i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (x.channel[u] != i / x.per_channel || x.time[u] != i % x.per_channel) {
      throw std::invalid_argument("temporal_align: tokens must be channel-major with consecutive time indices");
    }
  }
  const Index groups = n / f;
  Var<Real> q = t.param(*pm.ta_query);
  Var<Real> scores = scale(matmul(pm.ta_key(t, z), transpose(reshape(q, {1, width}))),
                           static_cast<Real>(1.0 / std::sqrt(static_cast<double>(width))));
  Var<Real> weights = softmax(reshape(scores, {groups, f}));
  Var<Real> pooled = bmm(reshape(weights, {groups, 1, f}), reshape(pm.ta_value(t, z), {groups, f, width}));
  return add_bias(reshape(pooled, {groups, width}), q);
}

Var<Real> Tokenizer::anchor_windows(Var<Real> anchor_codes, const ModalityTokens& anchor) const {
  const Index windows = anchor.per_channel;
  const Index n = anchor.count();
  if (anchor_codes.dim(0) != n) throw ShapeError("anchor_windows: code rows do not match anchor tokens");
  Tensor<Real> avg = Tensor<Real>::zeros({windows, n});
  std::vector<Index> per_window(static_cast<std::size_t>(windows), 0);
  for (Index i = 0; i < n; ++i) ++per_window[static_cast<std::size_t>(anchor.time[static_cast<std::size_t>(i)])];
  for (Index i = 0; i < n; ++i) {
    const Index w = anchor.time[static_cast<std::size_t>(i)];
    avg(w, i) = Real(1) / static_cast<Real>(per_window[static_cast<std::size_t>(w)]);
  }
  return matmul(anchor_codes.tape().constant(std::move(avg)), anchor_codes);
}

Var<Real> Tokenizer::cross_modal_expand(Tape<Real>& t, std::size_t slot, Var<Real> windows) const {
  const PerModality& pm = mods_[slot];
  if (!pm.cma_query) {
    throw std::logic_error("cross_modal_expand: " + std::string(modality_name(pm.modality)) +
                           " has no cross-modal branch");
  }
  Var<Real> q = t.param(*pm.cma_query);
  std::vector<Var<Real>> rows;
  for (Index w = 0; w < windows.dim(0); ++w) {
    Var<Real> code = slice_rows(windows, w, 1);
    rows.push_back(add(attention(q, pm.cma_key(t, code), pm.cma_value(t, code), 1), q));
  }
  return l2_normalize(concat_rows(rows));
}

Var<Real> Tokenizer::decode(Tape<Real>& t, std::size_t slot, Var<Real> private_codes, Var<Real> shared_codes) const {
  const Decoder& d = mods_[slot].decoder;
  return d.head(t, d.stack(t, d.input(t, concat_cols(std::vector<Var<Real>>{private_codes, shared_codes}))));
}

namespace {

Var<Real> accumulate(Var<Real> acc, Var<Real> term) { return acc.valid() ? add(acc, term) : term; }

}  // namespace

Var<Real> disentangle_loss(Var<Real> z_private, Var<Real> z_shared) {
  return mean(square(cosine_similarity(z_private, z_shared)));
}

TokenizerPass Tokenizer::forward(Tape<Real>& t, const Sample& s) const {
  TokenizerPass pass;
  TokenizerLosses& loss = pass.loss;
  for (std::size_t slot = 0; slot < mods_.size(); ++slot) {
    const PerModality& pm = mods_[slot];
    const ModalityTokens& x = tokens_for(s, slot);
    ModalityPass mp;
    mp.modality = pm.modality;
    mp.factor = pm.factor;
    Var<Real> z = pm.encoder.forward(t, x);
    mp.z_private = pm.encoder.private_half(z);
    mp.z_shared = pm.encoder.shared_half(z);
    mp.priv = quantize(t, pm.private_proj(t, mp.z_private), pm.codebook);
    loss.commitment = accumulate(loss.commitment, commitment_loss(mp.priv));
    loss.vq = accumulate(loss.vq, vq_loss(t, mp.priv, pm.codebook));
    Var<Real> shared_tokens;
    if (config_.shared_codebook) {
      mp.shared = quantize(t, pm.shared_proj(t, temporal_align(t, slot, mp.z_shared, x)), shared_);
      mp.group.resize(static_cast<std::size_t>(x.count()));
      for (Index i = 0; i < x.count(); ++i) mp.group[static_cast<std::size_t>(i)] = i / pm.factor;
      shared_tokens = gather_rows(mp.shared->code, std::span<const Index>(mp.group));
      loss.commitment = add(loss.commitment, commitment_loss(*mp.shared));
      loss.vq = add(loss.vq, vq_loss(t, *mp.shared, shared_));
    } else {
      shared_tokens = t.constant(Tensor<Real>::zeros({x.count(), config_.code_dim}));
    }
    mp.recon = decode(t, slot, mp.priv.code, shared_tokens);
    loss.reconstruction = accumulate(loss.reconstruction, mse(mp.recon, t.constant(x.targets)));
    loss.disentangle = accumulate(loss.disentangle, disentangle_loss(mp.z_private, mp.z_shared));
    pass.modalities.push_back(std::move(mp));
  }

  if (config_.cross_modal && config_.shared_codebook && anchor_) {
    const ModalityTokens& anchor = tokens_for(s, *anchor_);
    Var<Real> windows = anchor_windows(pass.modalities[*anchor_].shared->code, anchor);
    for (std::size_t slot = 0; slot < mods_.size(); ++slot) {
      if (!uses_cross_modal(slot)) continue;
      const ModalityTokens& x = tokens_for(s, slot);
      Var<Real> expanded = cross_modal_expand(t, slot, windows);
      if (expanded.dim(0) != x.per_channel) {
        throw ShapeError("cross-modal alignment: " + std::to_string(windows.dim(0)) + " anchor windows x " +
                         std::to_string(mods_[slot].factor) + " != " + std::to_string(x.per_channel) + " " +
                         std::string(modality_name(x.modality)) + " patches per channel");
      }
      ModalityPass& mp = pass.modalities[slot];
      mp.cross_recon = decode(t, slot, mp.priv.code, gather_rows(expanded, std::span<const Index>(x.time)));
      loss.cross_modal = accumulate(loss.cross_modal, mse(mp.cross_recon, t.constant(x.targets)));
    }
  }

  loss.total = add(loss.reconstruction, loss.commitment);
  if (loss.cross_modal.valid()) loss.total = add(loss.total, scale(loss.cross_modal, static_cast<Real>(config_.alpha1)));
  if (config_.disentangle) loss.total = add(loss.total, scale(loss.disentangle, static_cast<Real>(config_.alpha2)));
  return pass;
}

std::vector<ModalityCodes> Tokenizer::codes(const Sample& s) const {
  Tape<Real> t;
  t.set_grad_enabled(false);
  std::vector<ModalityCodes> out;
  for (std::size_t slot = 0; slot < mods_.size(); ++slot) {
    const PerModality& pm = mods_[slot];
    const ModalityTokens& x = tokens_for(s, slot);
    Var<Real> z = pm.encoder.forward(t, x);
    ModalityCodes c;
    c.private_index = nearest_codes(pm.private_proj(t, pm.encoder.private_half(z)).value(), pm.codebook.codes->value);
    if (config_.shared_codebook) {
      const auto groups = nearest_codes(
          pm.shared_proj(t, temporal_align(t, slot, pm.encoder.shared_half(z), x)).value(), shared_.codes->value);
      c.shared_index.resize(static_cast<std::size_t>(x.count()));
      for (Index i = 0; i < x.count(); ++i) {
        c.shared_index[static_cast<std::size_t>(i)] = groups[static_cast<std::size_t>(i / pm.factor)];
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

Tensor<Real> Tokenizer::anchor_window_codes(const Sample& s) const {
  if (!anchor_ || !config_.shared_codebook) throw std::logic_error("tokenizer has no shared anchor codes");
  Tape<Real> t;
  t.set_grad_enabled(false);
  const PerModality& pm = mods_[*anchor_];
  const ModalityTokens& x = tokens_for(s, *anchor_);
  Var<Real> z = pm.encoder.forward(t, x);
  Quantized q = quantize(t, pm.shared_proj(t, pm.encoder.shared_half(z)), shared_);
  return anchor_windows(q.code, x).value();
}

double Tokenizer::cross_modal_error(const Sample& s, const Tensor<Real>* windows) const {
  if (!anchor_ || !config_.shared_codebook || !config_.cross_modal) {
    throw std::logic_error("cross-modal reconstruction is disabled for this tokenizer");
  }
  const Tensor<Real> own = windows ? Tensor<Real>() : anchor_window_codes(s);
  const Tensor<Real>& w = windows ? *windows : own;
  Tape<Real> t;
  t.set_grad_enabled(false);
  Var<Real> wv = t.constant(w);
  double total = 0.0;
  int terms = 0;
  for (std::size_t slot = 0; slot < mods_.size(); ++slot) {
    if (!uses_cross_modal(slot)) continue;
    const PerModality& pm = mods_[slot];
    const ModalityTokens& x = tokens_for(s, slot);
    Var<Real> z = pm.encoder.forward(t, x);
    Quantized q = quantize(t, pm.private_proj(t, pm.encoder.private_half(z)), pm.codebook);
    Var<Real> expanded = cross_modal_expand(t, slot, wv);
    Var<Real> out = decode(t, slot, q.code, gather_rows(expanded, std::span<const Index>(x.time)));
    total += mse(out, t.constant(x.targets)).value().item();
    ++terms;
  }
  return terms ? total / terms : 0.0;
}

}  // namespace pomni
