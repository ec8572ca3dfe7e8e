#pragma once

// Central-difference gradient oracle. Independent of the reverse-mode rules:
// it only evaluates forward values on fresh tapes.

#include "pomni/numerics/ops.hpp"
#include "pomni/numerics/rng.hpp"

#include <algorithm>
#include <functional>
#include <vector>

namespace pomni::testing {

using D = double;
using TD = Tensor<D>;
using VD = Var<D>;

inline TD random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  TD t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
  return t;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

using GraphFn = std::function<VD(Tape<D>&, const std::vector<VD>&)>;

/// Builds loss = sum(f(inputs) * probe) with a random probe tensor and
/// compares tape gradients against central differences with step h.
/// Operators with a surrogate gradient (stop, straight-through) pass a
/// `reference` whose ordinary derivative is the intended one; the central
/// differences are then taken on it instead of on f.
inline GradCheckResult gradcheck(const GraphFn& fn, std::vector<TD> inputs, Rng& rng, double h = 1e-5,
                                 const GraphFn& reference = nullptr) {
  TD probe;
  auto loss_of = [&](const std::vector<TD>& xs, Tape<D>& tape, std::vector<VD>* vars) {
    std::vector<VD> vs;
    for (const auto& x : xs) vs.push_back(tape.input(x));
    VD out = (vars || !reference) ? fn(tape, vs) : reference(tape, vs);
    if (probe.shape() != out.shape()) probe = random_tensor(rng, out.shape());
    if (vars) *vars = vs;
    return sum(mul(out, tape.constant(probe)));
  };

  std::vector<TD> analytic;
  {
    Tape<D> tape;
    std::vector<VD> vars;
    VD loss = loss_of(inputs, tape, &vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    TD numeric(inputs[i].shape());
    for (Index j = 0; j < inputs[i].size(); ++j) {
      auto plus = inputs;
      auto minus = inputs;
      plus[i][j] += h;
      minus[i][j] -= h;
      Tape<D> tp, tm;
      const double fp = loss_of(plus, tp, nullptr).value().item();
      const double fm = loss_of(minus, tm, nullptr).value().item();
      numeric[j] = (fp - fm) / (2.0 * h);
    }
    const double diff = (analytic[i].array() - numeric.array()).matrix().norm();
    const double scale = std::max({analytic[i].array().matrix().norm(), numeric.array().matrix().norm(), 1e-8});
    result.max_rel_error = std::max(result.max_rel_error, diff / scale);
    result.max_abs_grad = std::max(result.max_abs_grad, analytic[i].array().abs().maxCoeff());
  }
  return result;
}

}  // namespace pomni::testing
