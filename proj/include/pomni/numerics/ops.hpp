#pragma once

#include "pomni/numerics/autodiff.hpp"

#include <optional>
#include <span>
#include <type_traits>
#include <vector>

// Differentiable operators. Every op takes and returns Var handles on the same
// Tape and records its own reverse-mode rule. Unless stated otherwise, 2-D
// semantics apply to the (rows x last-dim) matrix view of a tensor.
namespace pomni {

/// Non-deduced context: scalar and optional arguments convert implicitly.
template <typename T>
using nd = std::type_identity_t<T>;

// Element-wise arithmetic on identically shaped inputs.
template <typename S> Var<S> add(Var<S> a, Var<S> b);
template <typename S> Var<S> sub(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);
template <typename S> Var<S> scale(Var<S> a, nd<S> factor);
template <typename S> Var<S> add_scalar(Var<S> a, nd<S> value);
template <typename S> Var<S> square(Var<S> a);

/// x + bias, bias of shape [cols] broadcast over rows.
template <typename S> Var<S> add_bias(Var<S> x, Var<S> bias);
/// x * w, w of shape [cols] broadcast over rows.
template <typename S> Var<S> mul_cols(Var<S> x, Var<S> w);

/// [m,k] x [k,n] -> [m,n].
template <typename S> Var<S> matmul(Var<S> a, Var<S> b);
/// Batched [B,m,k] x [B,k,n] -> [B,m,n].
template <typename S> Var<S> bmm(Var<S> a, Var<S> b);
template <typename S> Var<S> transpose(Var<S> a);
/// x W^T (+ b), with W of shape [out, in]; leading axes of x are preserved.
template <typename S> Var<S> linear(Var<S> x, Var<S> weight, std::optional<nd<Var<S>>> bias = std::nullopt);

template <typename S> Var<S> reshape(Var<S> a, Shape shape);
template <typename S> Var<S> concat_cols(const std::vector<Var<S>>& parts);
template <typename S> Var<S> concat_rows(const std::vector<Var<S>>& parts);
template <typename S> Var<S> slice_cols(Var<S> a, Index begin, Index count);
template <typename S> Var<S> slice_rows(Var<S> a, Index begin, Index count);
/// Row lookup; indices may repeat (embedding lookup, duplication).
template <typename S> Var<S> gather_rows(Var<S> a, std::span<const Index> rows);
/// Rows with mask != 0 are replaced by `row` (shape [cols]).
template <typename S> Var<S> replace_rows(Var<S> x, Var<S> row, std::span<const char> mask);

template <typename S> Var<S> sum(Var<S> a);
template <typename S> Var<S> mean(Var<S> a);
/// Sum over rows: [rows, cols] -> [cols].
template <typename S> Var<S> sum_rows(Var<S> a);
template <typename S> Var<S> mean_rows(Var<S> a);
/// Per-row dot product: [rows, cols] x [rows, cols] -> [rows].
template <typename S> Var<S> row_dot(Var<S> a, Var<S> b);

template <typename S> Var<S> gelu(Var<S> a);
template <typename S> Var<S> silu(Var<S> a);
template <typename S> Var<S> softmax(Var<S> a);
template <typename S> Var<S> log_softmax(Var<S> a);

/// x / sqrt(|x|^2 + eps) along the last axis.
template <typename S> Var<S> l2_normalize(Var<S> a, nd<S> eps = S(1e-12));
/// Cosine similarity of matching rows -> [rows].
template <typename S> Var<S> cosine_similarity(Var<S> a, Var<S> b);
template <typename S> Var<S> rms_norm(Var<S> x, Var<S> weight, nd<S> eps = S(1e-6));
/// x: [B, C, L]; statistics per (sample, group) over C/groups x L values.
template <typename S> Var<S> group_norm(Var<S> x, Index groups, Var<S> gamma, Var<S> beta, nd<S> eps = S(1e-5));
/// x: [B, Cin, L], weight: [Cout, Cin, K], bias: [Cout] -> [B, Cout, Lout].
template <typename S> Var<S> conv1d(Var<S> x, Var<S> weight, std::optional<nd<Var<S>>> bias, Index stride, Index padding);

/// Multi-head scaled dot-product attention. q: [Nq, d], k: [Nk, d], v: [Nk, dv].
template <typename S> Var<S> attention(Var<S> q, Var<S> k, Var<S> v, Index heads);

/// Sum over rows of weight_i * CE(logits_i, target_i) with label smoothing.
/// Empty weights mean weight 1 for every row.
template <typename S>
Var<S> cross_entropy(Var<S> logits, std::span<const int> targets, nd<S> smoothing = S(0),
                     std::span<const nd<S>> weights = {});
/// Mean binary cross-entropy on logits.
template <typename S> Var<S> bce_with_logits(Var<S> logits, std::span<const nd<S>> targets);
/// Mean squared difference.
template <typename S> Var<S> mse(Var<S> a, Var<S> b);

/// Value passes through, gradient stops.
template <typename S> Var<S> stop_gradient(Var<S> a);
/// Forward value of `value_source`, gradient delivered unchanged to `grad_target`.
template <typename S> Var<S> straight_through(Var<S> value_source, Var<S> grad_target);

template <typename S> Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S> Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <typename S> Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }
template <typename S> Var<S> operator*(Var<S> a, nd<S> s) { return scale(a, s); }
template <typename S> Var<S> operator*(nd<S> s, Var<S> a) { return scale(a, s); }
template <typename S> Var<S> operator-(Var<S> a) { return scale(a, S(-1)); }

}  // namespace pomni
