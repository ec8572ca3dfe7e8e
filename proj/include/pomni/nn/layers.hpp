#pragma once

// Parameterized building blocks. A layer only points at tensors owned by a
// ParamStore; forward passes bind them onto the caller's tape.

#include "pomni/numerics/ops.hpp"
#include "pomni/numerics/rng.hpp"

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pomni {

/// Precision used for training and inference.
using Real = float;

template <typename S>
Tensor<S> trunc_normal(Rng& rng, Shape shape, double sigma = 0.02) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng.truncated_normal(sigma));
  return t;
}

template <typename S>
struct Linear {
  const Parameter<S>* weight = nullptr;  // [out, in]
  const Parameter<S>* bias = nullptr;    // [out] or absent

  static Linear make(ParamStore<S>& ps, const std::string& name, Index in, Index out, bool with_bias, Rng& rng) {
    Linear l;
    l.weight = &ps.add(name + ".weight", trunc_normal<S>(rng, {out, in}));
    if (with_bias) l.bias = &ps.add(name + ".bias", Tensor<S>::zeros({out}));
    return l;
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    if (bias) return linear(x, t.param(*weight), t.param(*bias));
    return linear(x, t.param(*weight));
  }
  Index in() const { return weight->value.dim(1); }
  Index out() const { return weight->value.dim(0); }
};

template <typename S>
struct RmsNorm {
  const Parameter<S>* weight = nullptr;

  static RmsNorm make(ParamStore<S>& ps, const std::string& name, Index dim) {
    return RmsNorm{&ps.add(name + ".weight", Tensor<S>::constant({dim}, S(1)))};
  }
  Var<S> operator()(Tape<S>& t, Var<S> x) const { return rms_norm(x, t.param(*weight)); }
};

/// down(silu(gate x) * up x)
template <typename S>
struct SwiGlu {
  Linear<S> gate, up, down;

  static SwiGlu make(ParamStore<S>& ps, const std::string& name, Index dim, Index hidden, Rng& rng) {
    return SwiGlu{Linear<S>::make(ps, name + ".gate", dim, hidden, false, rng),
                  Linear<S>::make(ps, name + ".up", dim, hidden, false, rng),
                  Linear<S>::make(ps, name + ".down", hidden, dim, false, rng)};
  }
  Var<S> operator()(Tape<S>& t, Var<S> x) const { return down(t, mul(silu(gate(t, x)), up(t, x))); }
};

/// Top-1 routed mixture of SwiGLU experts. Each token goes to its highest
/// scoring expert and the output is scaled by that expert's gate probability.
template <typename S>
struct MoeSwiGlu {
  Linear<S> router;
  std::vector<SwiGlu<S>> experts;

  static MoeSwiGlu make(ParamStore<S>& ps, const std::string& name, Index dim, Index hidden, Index count, Rng& rng) {
    MoeSwiGlu m;
    m.router = Linear<S>::make(ps, name + ".router", dim, count, false, rng);
    for (Index e = 0; e < count; ++e) {
      m.experts.push_back(SwiGlu<S>::make(ps, name + ".expert" + std::to_string(e), dim, hidden, rng));
    }
    return m;
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    const Index n = x.value().rows();
    const Index dim = x.value().cols();
    const auto experts_n = static_cast<Index>(experts.size());
    Var<S> probs = softmax(router(t, x));
    const auto& p = probs.value();
    std::vector<Index> choice(static_cast<std::size_t>(n));
    Tensor<S> onehot = Tensor<S>::zeros({n, experts_n});
    for (Index r = 0; r < n; ++r) {
      Index best = 0;
      for (Index e = 1; e < experts_n; ++e) {
        if (p(r, e) > p(r, best)) best = e;
      }
      choice[static_cast<std::size_t>(r)] = best;
      onehot(r, best) = S(1);
    }
    Var<S> gate = reshape(row_dot(probs, t.constant(onehot)), {n, 1});

    // route: group tokens by expert, run each group, restore token order
    std::vector<Var<S>> outs;
    std::vector<Index> position(static_cast<std::size_t>(n));
    Index filled = 0;
    for (Index e = 0; e < experts_n; ++e) {
      std::vector<Index> rows;
      for (Index r = 0; r < n; ++r) {
        if (choice[static_cast<std::size_t>(r)] == e) rows.push_back(r);
      }
      if (rows.empty()) continue;
      for (Index r : rows) position[static_cast<std::size_t>(r)] = filled++;
      outs.push_back(experts[static_cast<std::size_t>(e)](t, gather_rows(x, std::span<const Index>(rows))));
    }
    Var<S> routed = gather_rows(concat_rows(outs), std::span<const Index>(position));
    return mul(routed, matmul(gate, t.constant(Tensor<S>::constant({1, dim}, S(1)))));
  }
};

/// Bias-free multi-head attention projections.
template <typename S>
struct MultiHeadAttention {
  Linear<S> q, k, v, o;
  Index heads = 1;

  static MultiHeadAttention make(ParamStore<S>& ps, const std::string& name, Index dim, Index heads, Rng& rng) {
    if (heads <= 0 || dim % heads != 0) {
      throw std::invalid_argument(name + ": head count " + std::to_string(heads) + " does not divide " +
                                  std::to_string(dim));
    }
    return MultiHeadAttention{Linear<S>::make(ps, name + ".q", dim, dim, false, rng),
                              Linear<S>::make(ps, name + ".k", dim, dim, false, rng),
                              Linear<S>::make(ps, name + ".v", dim, dim, false, rng),
                              Linear<S>::make(ps, name + ".o", dim, dim, false, rng), heads};
  }

  Var<S> operator()(Tape<S>& t, Var<S> query, Var<S> context) const {
    return o(t, attention(q(t, query), k(t, context), v(t, context), heads));
  }
};

/// Pre-norm block: x + attn(norm x), then x + ffn(norm x). The feed-forward
/// part is either a SwiGLU or a top-1 mixture of SwiGLU experts.
template <typename S>
struct TransformerBlock {
  RmsNorm<S> norm1, norm2;
  MultiHeadAttention<S> attn;
  SwiGlu<S> ffn;
  std::optional<MoeSwiGlu<S>> moe;

  static TransformerBlock make(ParamStore<S>& ps, const std::string& name, Index dim, Index heads, Index hidden,
                               Rng& rng, Index experts = 0) {
    TransformerBlock b;
    b.norm1 = RmsNorm<S>::make(ps, name + ".norm1", dim);
    b.attn = MultiHeadAttention<S>::make(ps, name + ".attn", dim, heads, rng);
    b.norm2 = RmsNorm<S>::make(ps, name + ".norm2", dim);
    if (experts > 0) {
      b.moe = MoeSwiGlu<S>::make(ps, name + ".moe", dim, hidden, experts, rng);
    } else {
      b.ffn = SwiGlu<S>::make(ps, name + ".ffn", dim, hidden, rng);
    }
    return b;
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    Var<S> h = norm1(t, x);
    x = add(x, attn(t, h, h));
    h = norm2(t, x);
    return add(x, moe ? (*moe)(t, h) : ffn(t, h));
  }
};

/// Stack of blocks followed by a final norm. With no blocks the stack is the
/// identity.
template <typename S>
struct TransformerStack {
  std::vector<TransformerBlock<S>> blocks;
  RmsNorm<S> norm;

  static TransformerStack make(ParamStore<S>& ps, const std::string& name, Index layers, Index dim, Index heads,
                               Index hidden, Rng& rng) {
    TransformerStack s;
    for (Index l = 0; l < layers; ++l) {
      s.blocks.push_back(TransformerBlock<S>::make(ps, name + ".block" + std::to_string(l), dim, heads, hidden, rng));
    }
    s.norm = RmsNorm<S>::make(ps, name + ".norm", dim);
    return s;
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    if (blocks.empty()) return x;
    for (const auto& b : blocks) x = b(t, x);
    return norm(t, x);
  }
};

}  // namespace pomni
