#include "pomni/numerics/ops.hpp"

#include <cmath>
#include <numbers>

namespace pomni {
namespace {

template <typename S>
using T = Tensor<S>;

template <typename S>
using RowMat = typename Tensor<S>::RowMatrix;

template <typename S>
using MapM = Eigen::Map<RowMat<S>>;

template <typename S>
using CMapM = Eigen::Map<const RowMat<S>>;

[[noreturn]] void fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

template <typename S>
void require_same(const char* op, const Var<S>& a, const Var<S>& b) {
  if (a.shape() != b.shape()) fail(op, "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  if (&a.tape() != &b.tape()) fail(op, "operands live on different tapes");
}

template <typename S>
void require_rank(const char* op, const Var<S>& a, Index rank) {
  if (a.value().rank() != rank) {
    fail(op, "expected rank " + std::to_string(rank) + ", got " + to_string(a.shape()));
  }
}

}  // namespace

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  require_same("add", a, b);
  T<S> out(a.shape(), a.value().array() + b.value().array());
  int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    if (auto* ga = t.grad_target(ia)) ga->array() += g.array();
    if (auto* gb = t.grad_target(ib)) gb->array() += g.array();
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  require_same("sub", a, b);
  T<S> out(a.shape(), a.value().array() - b.value().array());
  int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    if (auto* ga = t.grad_target(ia)) ga->array() += g.array();
    if (auto* gb = t.grad_target(ib)) gb->array() -= g.array();
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  require_same("mul", a, b);
  T<S> out(a.shape(), a.value().array() * b.value().array());
  int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    if (auto* ga = t.grad_target(ia)) ga->array() += g.array() * t.value(ib).array();
    if (auto* gb = t.grad_target(ib)) gb->array() += g.array() * t.value(ia).array();
  });
}

template <typename S>
Var<S> scale(Var<S> a, nd<S> factor) {
  T<S> out(a.shape(), a.value().array() * factor);
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, factor](Tape<S>& t, int self) {
    if (auto* ga = t.grad_target(ia)) ga->array() += t.incoming(self).array() * factor;
  });
}

template <typename S>
Var<S> add_scalar(Var<S> a, nd<S> value) {
  T<S> out(a.shape(), a.value().array() + value);
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<S>& t, int self) {
    if (auto* ga = t.grad_target(ia)) ga->array() += t.incoming(self).array();
  });
}

template <typename S>
Var<S> square(Var<S> a) {
  T<S> out(a.shape(), a.value().array().square());
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<S>& t, int self) {
    if (auto* ga = t.grad_target(ia)) ga->array() += S(2) * t.incoming(self).array() * t.value(ia).array();
  });
}

template <typename S>
Var<S> add_bias(Var<S> x, Var<S> bias) {
  if (bias.value().size() != x.value().cols()) {
    fail("add_bias", "bias " + to_string(bias.shape()) + " does not match " + to_string(x.shape()));
  }
  T<S> out = x.value();
  out.matrix().rowwise() += bias.value().array().transpose().matrix();
  int ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {ix, ib}, [ix, ib](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    if (auto* gx = t.grad_target(ix)) gx->array() += g.array();
    if (auto* gb = t.grad_target(ib)) gb->array() += g.matrix().colwise().sum().transpose().array();
  });
}

template <typename S>
Var<S> mul_cols(Var<S> x, Var<S> w) {
  if (w.value().size() != x.value().cols()) {
    fail("mul_cols", "weight " + to_string(w.shape()) + " does not match " + to_string(x.shape()));
  }
  T<S> out = x.value();
  auto wrow = w.value().array().transpose();
  out.matrix().array().rowwise() *= wrow;
  int ix = x.id(), iw = w.id();
  return x.tape().record(std::move(out), {ix, iw}, [ix, iw](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    if (auto* gx = t.grad_target(ix)) {
      gx->matrix().array() += g.matrix().array().rowwise() * t.value(iw).array().transpose();
    }
    if (auto* gw = t.grad_target(iw)) {
      gw->array() += (g.matrix().array() * t.value(ix).matrix().array()).colwise().sum().transpose();
    }
  });
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) fail("matmul", "inner dimensions " + to_string(a.shape()) + " x " + to_string(b.shape()));
  T<S> out({a.dim(0), b.dim(1)});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    if (auto* ga = t.grad_target(ia)) ga->matrix().noalias() += g.matrix() * t.value(ib).matrix().transpose();
    if (auto* gb = t.grad_target(ib)) gb->matrix().noalias() += t.value(ia).matrix().transpose() * g.matrix();
  });
}

template <typename S>
Var<S> bmm(Var<S> a, Var<S> b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    fail("bmm", "incompatible " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  T<S> out({batch, m, n});
  for (Index i = 0; i < batch; ++i) {
    MapM<S>(out.data() + i * m * n, m, n).noalias() =
        CMapM<S>(a.value().data() + i * m * k, m, k) * CMapM<S>(b.value().data() + i * k * n, k, n);
  }
  int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, batch, m, k, n](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    auto* ga = t.grad_target(ia);
    auto* gb = t.grad_target(ib);
    for (Index i = 0; i < batch; ++i) {
      CMapM<S> gi(g.data() + i * m * n, m, n);
      if (ga) {
        MapM<S>(ga->data() + i * m * k, m, k).noalias() +=
            gi * CMapM<S>(t.value(ib).data() + i * k * n, k, n).transpose();
      }
      if (gb) {
        MapM<S>(gb->data() + i * k * n, k, n).noalias() +=
            CMapM<S>(t.value(ia).data() + i * m * k, m, k).transpose() * gi;
      }
    }
  });
}

template <typename S>
Var<S> transpose(Var<S> a) {
  require_rank("transpose", a, 2);
  T<S> out({a.dim(1), a.dim(0)});
  out.matrix() = a.value().matrix().transpose();
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<S>& t, int self) {
    if (auto* ga = t.grad_target(ia)) ga->matrix() += t.incoming(self).matrix().transpose();
  });
}

template <typename S>
Var<S> linear(Var<S> x, Var<S> weight, std::optional<nd<Var<S>>> bias) {
  require_rank("linear", weight, 2);
  if (x.value().cols() != weight.dim(1)) {
    fail("linear", "input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  if (bias && bias->value().size() != weight.dim(0)) {
    fail("linear", "bias " + to_string(bias->shape()) + " vs weight " + to_string(weight.shape()));
  }
  Shape shape = x.shape();
  shape.back() = weight.dim(0);
  T<S> out(shape);
  out.matrix().noalias() = x.value().matrix() * weight.value().matrix().transpose();
  if (bias) out.matrix().rowwise() += bias->value().array().transpose().matrix();
  int ix = x.id(), iw = weight.id(), ib = bias ? bias->id() : -1;
  auto backward = [ix, iw, ib](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    if (auto* gx = t.grad_target(ix)) gx->matrix().noalias() += g.matrix() * t.value(iw).matrix();
    if (auto* gw = t.grad_target(iw)) gw->matrix().noalias() += g.matrix().transpose() * t.value(ix).matrix();
    if (ib >= 0) {
      if (auto* gb = t.grad_target(ib)) gb->array() += g.matrix().colwise().sum().transpose().array();
    }
  };
  if (bias) return x.tape().record(std::move(out), {ix, iw, ib}, backward);
  return x.tape().record(std::move(out), {ix, iw}, backward);
}

template <typename S>
Var<S> reshape(Var<S> a, Shape shape) {
  T<S> out = a.value().reshaped(std::move(shape));
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<S>& t, int self) {
    if (auto* ga = t.grad_target(ia)) ga->array() += t.incoming(self).array();
  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) fail("concat_cols", "no inputs");
  const Index rows = parts.front().value().rows();
  Index cols = 0;
  std::vector<int> ids;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) {
      fail("concat_cols", "row mismatch " + to_string(parts.front().shape()) + " vs " + to_string(p.shape()));
    }
    cols += p.value().cols();
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
  }
  Shape shape = parts.front().shape();
  shape.back() = cols;
  T<S> out(shape);
  Index offset = 0;
  for (const auto& p : parts) {
    out.matrix().middleCols(offset, p.value().cols()) = p.value().matrix();
    offset += p.value().cols();
  }
  return parts.front().tape().record(std::move(out), ids, [ids, widths](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (auto* gp = t.grad_target(ids[i])) gp->matrix() += g.matrix().middleCols(off, widths[i]);
      off += widths[i];
    }
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) fail("concat_rows", "no inputs");
  const Index cols = parts.front().value().cols();
  Index rows = 0;
  std::vector<int> ids;
  std::vector<Index> heights;
  for (const auto& p : parts) {
    if (p.value().cols() != cols) {
      fail("concat_rows", "column mismatch " + to_string(parts.front().shape()) + " vs " + to_string(p.shape()));
    }
    rows += p.value().rows();
    ids.push_back(p.id());
    heights.push_back(p.value().rows());
  }
  T<S> out({rows, cols});
  Index offset = 0;
  for (const auto& p : parts) {
    out.matrix().middleRows(offset, p.value().rows()) = p.value().matrix();
    offset += p.value().rows();
  }
  return parts.front().tape().record(std::move(out), ids, [ids, heights](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (auto* gp = t.grad_target(ids[i])) gp->matrix() += g.matrix().middleRows(off, heights[i]);
      off += heights[i];
    }
  });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.value().cols()) {
    fail("slice_cols", "range [" + std::to_string(begin) + "," + std::to_string(begin + count) + ") of " +
                           to_string(a.shape()));
  }
  Shape shape = a.shape();
  shape.back() = count;
  T<S> out(shape);
  out.matrix() = a.value().matrix().middleCols(begin, count);
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, begin, count](Tape<S>& t, int self) {
    if (auto* ga = t.grad_target(ia)) ga->matrix().middleCols(begin, count) += t.incoming(self).matrix();
  });
}

template <typename S>
Var<S> slice_rows(Var<S> a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.value().rows()) {
    fail("slice_rows", "range [" + std::to_string(begin) + "," + std::to_string(begin + count) + ") of " +
                           to_string(a.shape()));
  }
  T<S> out({count, a.value().cols()});
  out.matrix() = a.value().matrix().middleRows(begin, count);
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, begin, count](Tape<S>& t, int self) {
    if (auto* ga = t.grad_target(ia)) ga->matrix().middleRows(begin, count) += t.incoming(self).matrix();
  });
}

template <typename S>
Var<S> gather_rows(Var<S> a, std::span<const Index> rows) {
  const Index n = a.value().rows(), cols = a.value().cols();
  std::vector<Index> idx(rows.begin(), rows.end());
  for (Index r : idx) {
    if (r < 0 || r >= n) fail("gather_rows", "row " + std::to_string(r) + " out of " + to_string(a.shape()));
  }
  T<S> out({static_cast<Index>(idx.size()), cols});
  for (std::size_t i = 0; i < idx.size(); ++i) out.matrix().row(static_cast<Index>(i)) = a.value().matrix().row(idx[i]);
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, idx = std::move(idx)](Tape<S>& t, int self) {
    auto* ga = t.grad_target(ia);
    if (!ga) return;
    const auto& g = t.incoming(self);
    for (std::size_t i = 0; i < idx.size(); ++i) ga->matrix().row(idx[i]) += g.matrix().row(static_cast<Index>(i));
  });
}

template <typename S>
Var<S> replace_rows(Var<S> x, Var<S> row, std::span<const char> mask) {
  if (row.value().size() != x.value().cols() || static_cast<Index>(mask.size()) != x.value().rows()) {
    fail("replace_rows", "x " + to_string(x.shape()) + ", row " + to_string(row.shape()) + ", mask of " +
                             std::to_string(mask.size()));
  }
  std::vector<char> m(mask.begin(), mask.end());
  T<S> out = x.value();
  for (Index r = 0; r < out.rows(); ++r) {
    if (m[static_cast<std::size_t>(r)]) out.matrix().row(r) = row.value().array().transpose().matrix();
  }
  int ix = x.id(), ir = row.id();
  return x.tape().record(std::move(out), {ix, ir}, [ix, ir, m = std::move(m)](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    auto* gx = t.grad_target(ix);
    auto* gr = t.grad_target(ir);
    for (Index r = 0; r < g.rows(); ++r) {
      if (m[static_cast<std::size_t>(r)]) {
        if (gr) gr->array() += g.matrix().row(r).transpose().array();
      } else if (gx) {
        gx->matrix().row(r) += g.matrix().row(r);
      }
    }
  });
}

template <typename S>
Var<S> sum(Var<S> a) {
  T<S> out = T<S>::scalar(a.value().array().sum());
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<S>& t, int self) {
    if (auto* ga = t.grad_target(ia)) ga->array() += t.incoming(self)[0];
  });
}

template <typename S>
Var<S> mean(Var<S> a) {
  const Index n = a.value().size();
  if (n == 0) fail("mean", "empty input");
  T<S> out = T<S>::scalar(a.value().array().sum() / S(n));
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, n](Tape<S>& t, int self) {
    if (auto* ga = t.grad_target(ia)) ga->array() += t.incoming(self)[0] / S(n);
  });
}

template <typename S>
Var<S> sum_rows(Var<S> a) {
  T<S> out({a.value().cols()});
  out.array() = a.value().matrix().colwise().sum().transpose().array();
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<S>& t, int self) {
    if (auto* ga = t.grad_target(ia)) {
      ga->matrix().rowwise() += t.incoming(self).array().transpose().matrix();
    }
  });
}

template <typename S>
Var<S> mean_rows(Var<S> a) {
  const Index rows = a.value().rows();
  if (rows == 0) fail("mean_rows", "empty input");
  return scale(sum_rows(a), S(1) / S(rows));
}

template <typename S>
Var<S> row_dot(Var<S> a, Var<S> b) {
  require_same("row_dot", a, b);
  T<S> out({a.value().rows()});
  out.array() = (a.value().matrix().array() * b.value().matrix().array()).rowwise().sum();
  int ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    auto gcol = g.array();
    if (auto* ga = t.grad_target(ia)) ga->matrix().array() += t.value(ib).matrix().array().colwise() * gcol;
    if (auto* gb = t.grad_target(ib)) gb->matrix().array() += t.value(ia).matrix().array().colwise() * gcol;
  });
}

template <typename S>
Var<S> gelu(Var<S> a) {
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  T<S> out(a.shape(), a.value().array().unaryExpr([inv_sqrt2](S x) {
    return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
  }));
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, inv_sqrt2](Tape<S>& t, int self) {
    auto* ga = t.grad_target(ia);
    if (!ga) return;
    const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
    ga->array() += t.incoming(self).array() * t.value(ia).array().unaryExpr([&](S x) {
      return S(0.5) * (S(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(S(-0.5) * x * x);
    });
  });
}

template <typename S>
Var<S> silu(Var<S> a) {
  T<S> out(a.shape(), a.value().array() / (S(1) + (-a.value().array()).exp()));
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<S>& t, int self) {
    auto* ga = t.grad_target(ia);
    if (!ga) return;
    const auto& x = t.value(ia).array();
    auto sig = (S(1) + (-x).exp()).inverse();
    ga->array() += t.incoming(self).array() * (sig * (S(1) + x * (S(1) - sig)));
  });
}

template <typename S>
Var<S> softmax(Var<S> a) {
  T<S> out = a.value();
  auto m = out.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r).array();
    row = (row - row.maxCoeff()).exp();
    row /= row.sum();
  }
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<S>& t, int self) {
    auto* ga = t.grad_target(ia);
    if (!ga) return;
    const auto y = t.value(self).matrix().array();
    const auto g = t.incoming(self).matrix().array();
    auto dots = (g * y).rowwise().sum();
    ga->matrix().array() += y * (g.colwise() - dots);
  });
}

template <typename S>
Var<S> log_softmax(Var<S> a) {
  T<S> out = a.value();
  auto m = out.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r).array();
    const S mx = row.maxCoeff();
    const S lse = mx + std::log((row - mx).exp().sum());
    row -= lse;
  }
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape<S>& t, int self) {
    auto* ga = t.grad_target(ia);
    if (!ga) return;
    const auto p = t.value(self).matrix().array().exp();
    const auto g = t.incoming(self).matrix().array();
    auto sums = g.rowwise().sum();
    ga->matrix().array() += g - p.colwise() * sums;
  });
}

template <typename S>
Var<S> l2_normalize(Var<S> a, nd<S> eps) {
  T<S> out = a.value();
  Eigen::Array<S, Eigen::Dynamic, 1> norms = (out.matrix().rowwise().squaredNorm().array() + eps).sqrt();
  out.matrix().array().colwise() /= norms;
  int ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, norms = std::move(norms)](Tape<S>& t, int self) {
    auto* ga = t.grad_target(ia);
    if (!ga) return;
    const auto y = t.value(self).matrix().array();
    const auto g = t.incoming(self).matrix().array();
    auto dots = (g * y).rowwise().sum();
    ga->matrix().array() += (g - y.colwise() * dots).colwise() / norms;
  });
}

template <typename S>
Var<S> cosine_similarity(Var<S> a, Var<S> b) {
  require_same("cosine_similarity", a, b);
  return row_dot(l2_normalize(a), l2_normalize(b));
}

template <typename S>
Var<S> rms_norm(Var<S> x, Var<S> weight, nd<S> eps) {
  const Index d = x.value().cols();
  if (weight.value().size() != d) fail("rms_norm", "weight " + to_string(weight.shape()) + " vs " + to_string(x.shape()));
  Eigen::Array<S, Eigen::Dynamic, 1> inv =
      (x.value().matrix().rowwise().squaredNorm().array() / S(d) + eps).rsqrt();
  T<S> out = x.value();
  out.matrix().array().colwise() *= inv;
  out.matrix().array().rowwise() *= weight.value().array().transpose();
  int ix = x.id(), iw = weight.id();
  return x.tape().record(std::move(out), {ix, iw}, [ix, iw, d, inv = std::move(inv)](Tape<S>& t, int self) {
    const auto g = t.incoming(self).matrix().array();
    const auto xv = t.value(ix).matrix().array();
    const auto w = t.value(iw).array().transpose();
    if (auto* gw = t.grad_target(iw)) {
      gw->array() += ((xv.colwise() * inv) * g).colwise().sum().transpose();
    }
    if (auto* gx = t.grad_target(ix)) {
      Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic> gw_ = g.rowwise() * w;
      auto dots = (gw_ * xv).rowwise().sum();
      gx->matrix().array() += gw_.colwise() * inv - xv.colwise() * (inv.cube() * dots / S(d));
    }
  });
}

template <typename S>
Var<S> group_norm(Var<S> x, Index groups, Var<S> gamma, Var<S> beta, nd<S> eps) {
  require_rank("group_norm", x, 3);
  const Index batch = x.dim(0), channels = x.dim(1), length = x.dim(2);
  if (groups <= 0 || channels % groups != 0) {
    fail("group_norm", std::to_string(groups) + " groups do not divide " + to_string(x.shape()));
  }
  if (gamma.value().size() != channels || beta.value().size() != channels) {
    fail("group_norm", "affine parameters do not match " + to_string(x.shape()));
  }
  const Index per_group = channels / groups * length;
  const Index cg = channels / groups;
  // normalized values are kept for the backward pass
  T<S> xhat(x.shape());
  Eigen::Array<S, Eigen::Dynamic, 1> rstd(batch * groups);
  for (Index b = 0; b < batch; ++b) {
    for (Index gi = 0; gi < groups; ++gi) {
      const Index off = (b * channels + gi * cg) * length;
      auto seg = x.value().array().segment(off, per_group);
      const S mu = seg.mean();
      const S var = (seg - mu).square().mean();
      const S r = S(1) / std::sqrt(var + eps);
      rstd[b * groups + gi] = r;
      xhat.array().segment(off, per_group) = (seg - mu) * r;
    }
  }
  T<S> out(x.shape());
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (b * channels + c) * length;
      out.array().segment(off, length) = xhat.array().segment(off, length) * gamma.value()[c] + beta.value()[c];
    }
  }
  int ix = x.id(), igm = gamma.id(), ibt = beta.id();
  return x.tape().record(
      std::move(out), {ix, igm, ibt},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<S>& t, int self) {
        const auto& g = t.incoming(self);
        auto* gx = t.grad_target(ix);
        auto* ggm = t.grad_target(igm);
        auto* gbt = t.grad_target(ibt);
        const auto& gm = t.value(igm);
        Eigen::Array<S, Eigen::Dynamic, 1> dxhat(per_group);
        for (Index b = 0; b < batch; ++b) {
          for (Index gi = 0; gi < groups; ++gi) {
            for (Index c = gi * cg; c < (gi + 1) * cg; ++c) {
              const Index off = (b * channels + c) * length;
              auto gseg = g.array().segment(off, length);
              if (ggm) (*ggm)[c] += (gseg * xhat.array().segment(off, length)).sum();
              if (gbt) (*gbt)[c] += gseg.sum();
              dxhat.segment((c - gi * cg) * length, length) = gseg * gm[c];
            }
            if (!gx) continue;
            const Index off = (b * channels + gi * cg) * length;
            auto xh = xhat.array().segment(off, per_group);
            const S mean_d = dxhat.mean();
            const S mean_dx = (dxhat * xh).mean();
            gx->array().segment(off, per_group) += rstd[b * groups + gi] * (dxhat - mean_d - xh * mean_dx);
          }
        }
      });
}

template <typename S>
Var<S> conv1d(Var<S> x, Var<S> weight, std::optional<nd<Var<S>>> bias, Index stride, Index padding) {
  require_rank("conv1d", x, 3);
  require_rank("conv1d", weight, 3);
  const Index batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const Index cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin) fail("conv1d", "input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  if (bias && bias->value().size() != cout) fail("conv1d", "bias " + to_string(bias->shape()));
  if (stride <= 0 || padding < 0) fail("conv1d", "invalid stride/padding");
  const Index lout = (len + 2 * padding - k) / stride + 1;
  if (lout <= 0) fail("conv1d", "empty output for input " + to_string(x.shape()));
  // im2col: [cin*k, batch*lout]
  RowMat<S> cols = RowMat<S>::Zero(cin * k, batch * lout);
  const auto& xv = x.value();
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < cin; ++c) {
      const S* src = xv.data() + (b * cin + c) * len;
      for (Index kk = 0; kk < k; ++kk) {
        S* dst = cols.data() + (c * k + kk) * batch * lout + b * lout;
        for (Index o = 0; o < lout; ++o) {
          const Index pos = o * stride + kk - padding;
          if (pos >= 0 && pos < len) dst[o] = src[pos];
        }
      }
    }
  }
  CMapM<S> wmat(weight.value().data(), cout, cin * k);
  RowMat<S> y = wmat * cols;  // [cout, batch*lout]
  if (bias) y.colwise() += bias->value().array().matrix();
  T<S> out({batch, cout, lout});
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < cout; ++c) {
      std::copy_n(y.data() + c * batch * lout + b * lout, lout, out.data() + (b * cout + c) * lout);
    }
  }
  int ix = x.id(), iw = weight.id(), ib = bias ? bias->id() : -1;
  auto backward = [=, cols = std::move(cols)](Tape<S>& t, int self) {
    const auto& g = t.incoming(self);
    RowMat<S> gy(cout, batch * lout);
    for (Index b = 0; b < batch; ++b) {
      for (Index c = 0; c < cout; ++c) {
        std::copy_n(g.data() + (b * cout + c) * lout, lout, gy.data() + c * batch * lout + b * lout);
      }
    }
    if (auto* gw = t.grad_target(iw)) MapM<S>(gw->data(), cout, cin * k).noalias() += gy * cols.transpose();
    if (ib >= 0) {
      if (auto* gb = t.grad_target(ib)) gb->array() += gy.rowwise().sum().array();
    }
    if (auto* gx = t.grad_target(ix)) {
      RowMat<S> gcols = CMapM<S>(t.value(iw).data(), cout, cin * k).transpose() * gy;
      for (Index b = 0; b < batch; ++b) {
        for (Index c = 0; c < cin; ++c) {
          S* dst = gx->data() + (b * cin + c) * len;
          for (Index kk = 0; kk < k; ++kk) {
            const S* src = gcols.data() + (c * k + kk) * batch * lout + b * lout;
            for (Index o = 0; o < lout; ++o) {
              const Index pos = o * stride + kk - padding;
              if (pos >= 0 && pos < len) dst[pos] += src[o];
            }
          }
        }
      }
    }
  };
  if (bias) return x.tape().record(std::move(out), {ix, iw, ib}, backward);
  return x.tape().record(std::move(out), {ix, iw}, backward);
}

template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, Index heads) {
  require_rank("attention", q, 2);
  require_rank("attention", k, 2);
  require_rank("attention", v, 2);
  const Index nq = q.dim(0), nk = k.dim(0), d = q.dim(1), dv = v.dim(1);
  if (k.dim(1) != d || v.dim(0) != nk) {
    fail("attention", "q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " + to_string(v.shape()));
  }
  if (heads <= 0 || d % heads != 0 || dv % heads != 0) {
    fail("attention", std::to_string(heads) + " heads do not divide widths " + std::to_string(d) + "/" +
                          std::to_string(dv));
  }
  const Index dh = d / heads, dvh = dv / heads;
  const S inv_scale = S(1) / std::sqrt(S(dh));
  std::vector<RowMat<S>> probs(static_cast<std::size_t>(heads));
  T<S> out({nq, dv});
  const auto qm = q.value().matrix();
  const auto km = k.value().matrix();
  const auto vm = v.value().matrix();
  for (Index h = 0; h < heads; ++h) {
    RowMat<S> s = (qm.middleCols(h * dh, dh) * km.middleCols(h * dh, dh).transpose()) * inv_scale;
    for (Index r = 0; r < nq; ++r) {
      auto row = s.row(r).array();
      row = (row - row.maxCoeff()).exp();
      row /= row.sum();
    }
    out.matrix().middleCols(h * dvh, dvh).noalias() = s * vm.middleCols(h * dvh, dvh);
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      std::move(out), {iq, ik, iv}, [=, probs = std::move(probs)](Tape<S>& t, int self) {
        const auto g = t.incoming(self).matrix();
        const auto qv = t.value(iq).matrix();
        const auto kv = t.value(ik).matrix();
        const auto vv = t.value(iv).matrix();
        auto* gq = t.grad_target(iq);
        auto* gk = t.grad_target(ik);
        auto* gv = t.grad_target(iv);
        for (Index h = 0; h < heads; ++h) {
          const auto& p = probs[static_cast<std::size_t>(h)];
          auto gh = g.middleCols(h * dvh, dvh);
          if (gv) gv->matrix().middleCols(h * dvh, dvh).noalias() += p.transpose() * gh;
          if (!gq && !gk) continue;
          RowMat<S> dp = gh * vv.middleCols(h * dvh, dvh).transpose();
          Eigen::Array<S, Eigen::Dynamic, 1> dots = (dp.array() * p.array()).rowwise().sum();
          RowMat<S> ds = (p.array() * (dp.array().colwise() - dots)).matrix() * inv_scale;
          if (gq) gq->matrix().middleCols(h * dh, dh).noalias() += ds * kv.middleCols(h * dh, dh);
          if (gk) gk->matrix().middleCols(h * dh, dh).noalias() += ds.transpose() * qv.middleCols(h * dh, dh);
        }
      });
}

template <typename S>
Var<S> cross_entropy(Var<S> logits, std::span<const int> targets, nd<S> smoothing, std::span<const nd<S>> weights) {
  const Index rows = logits.value().rows(), classes = logits.value().cols();
  if (static_cast<Index>(targets.size()) != rows) {
    fail("cross_entropy", std::to_string(targets.size()) + " targets for logits " + to_string(logits.shape()));
  }
  if (!weights.empty() && static_cast<Index>(weights.size()) != rows) {
    fail("cross_entropy", std::to_string(weights.size()) + " weights for logits " + to_string(logits.shape()));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<S> w(weights.begin(), weights.end());
  if (w.empty()) w.assign(static_cast<std::size_t>(rows), S(1));
  RowMat<S> p(rows, classes);
  S total = 0;
  const auto lm = logits.value().matrix();
  for (Index r = 0; r < rows; ++r) {
    const int target = tg[static_cast<std::size_t>(r)];
    if (target < 0 || target >= classes) fail("cross_entropy", "target " + std::to_string(target) + " out of range");
    auto row = lm.row(r).array();
    const S mx = row.maxCoeff();
    const S lse = mx + std::log((row - mx).exp().sum());
    p.row(r) = (row - lse).exp().matrix();
    const S wr = w[static_cast<std::size_t>(r)];
    if (wr == S(0)) continue;
    const S nll = lse - row[target];
    const S uniform = lse - row.mean();
    total += wr * ((S(1) - smoothing) * nll + smoothing * uniform);
  }
  int il = logits.id();
  return logits.tape().record(
      T<S>::scalar(total), {il},
      [=, tg = std::move(tg), w = std::move(w), p = std::move(p)](Tape<S>& t, int self) {
        auto* gl = t.grad_target(il);
        if (!gl) return;
        const S g = t.incoming(self)[0];
        for (Index r = 0; r < rows; ++r) {
          const S wr = w[static_cast<std::size_t>(r)];
          if (wr == S(0)) continue;
          auto grow = gl->matrix().row(r);
          grow += (g * wr) * (p.row(r).array() - smoothing / S(classes)).matrix();
          grow[tg[static_cast<std::size_t>(r)]] -= g * wr * (S(1) - smoothing);
        }
      });
}

template <typename S>
Var<S> bce_with_logits(Var<S> logits, std::span<const nd<S>> targets) {
  const Index n = logits.value().size();
  if (static_cast<Index>(targets.size()) != n) {
    fail("bce_with_logits", std::to_string(targets.size()) + " targets for logits " + to_string(logits.shape()));
  }
  Eigen::Array<S, Eigen::Dynamic, 1> tg = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(targets.data(), n);
  const auto& x = logits.value().array();
  const S loss = (x.max(S(0)) - x * tg + (S(1) + (-x.abs()).exp()).log()).sum() / S(n);
  int il = logits.id();
  return logits.tape().record(T<S>::scalar(loss), {il}, [il, n, tg = std::move(tg)](Tape<S>& t, int self) {
    auto* gl = t.grad_target(il);
    if (!gl) return;
    const auto& xv = t.value(il).array();
    auto sig = (S(1) + (-xv).exp()).inverse();
    gl->array() += (sig - tg) * (t.incoming(self)[0] / S(n));
  });
}

template <typename S>
Var<S> mse(Var<S> a, Var<S> b) {
  require_same("mse", a, b);
  const Index n = a.value().size();
  if (n == 0) fail("mse", "empty input");
  return scale(sum(square(sub(a, b))), S(1) / S(n));
}

template <typename S>
Var<S> stop_gradient(Var<S> a) {
  return a.tape().constant(a.value());
}

template <typename S>
Var<S> straight_through(Var<S> value_source, Var<S> grad_target) {
  require_same("straight_through", value_source, grad_target);
  int ig = grad_target.id();
  return value_source.tape().record(value_source.value(), {ig}, [ig](Tape<S>& t, int self) {
    if (auto* gg = t.grad_target(ig)) gg->array() += t.incoming(self).array();
  });
}

#define POMNI_INSTANTIATE_OPS(S)                                                                       \
  template Var<S> add<S>(Var<S>, Var<S>);                                                             \
  template Var<S> sub<S>(Var<S>, Var<S>);                                                             \
  template Var<S> mul<S>(Var<S>, Var<S>);                                                             \
  template Var<S> scale<S>(Var<S>, S);                                                                \
  template Var<S> add_scalar<S>(Var<S>, S);                                                           \
  template Var<S> square<S>(Var<S>);                                                                  \
  template Var<S> add_bias<S>(Var<S>, Var<S>);                                                        \
  template Var<S> mul_cols<S>(Var<S>, Var<S>);                                                        \
  template Var<S> matmul<S>(Var<S>, Var<S>);                                                          \
  template Var<S> bmm<S>(Var<S>, Var<S>);                                                             \
  template Var<S> transpose<S>(Var<S>);                                                               \
  template Var<S> linear<S>(Var<S>, Var<S>, std::optional<Var<S>>);                                   \
  template Var<S> reshape<S>(Var<S>, Shape);                                                          \
  template Var<S> concat_cols<S>(const std::vector<Var<S>>&);                                         \
  template Var<S> concat_rows<S>(const std::vector<Var<S>>&);                                         \
  template Var<S> slice_cols<S>(Var<S>, Index, Index);                                                \
  template Var<S> slice_rows<S>(Var<S>, Index, Index);                                                \
  template Var<S> gather_rows<S>(Var<S>, std::span<const Index>);                                     \
  template Var<S> replace_rows<S>(Var<S>, Var<S>, std::span<const char>);                             \
  template Var<S> sum<S>(Var<S>);                                                                     \
  template Var<S> mean<S>(Var<S>);                                                                    \
  template Var<S> sum_rows<S>(Var<S>);                                                                \
  template Var<S> mean_rows<S>(Var<S>);                                                               \
  template Var<S> row_dot<S>(Var<S>, Var<S>);                                                         \
  template Var<S> gelu<S>(Var<S>);                                                                    \
  template Var<S> silu<S>(Var<S>);                                                                    \
  template Var<S> softmax<S>(Var<S>);                                                                 \
  template Var<S> log_softmax<S>(Var<S>);                                                             \
  template Var<S> l2_normalize<S>(Var<S>, S);                                                         \
  template Var<S> cosine_similarity<S>(Var<S>, Var<S>);                                               \
  template Var<S> rms_norm<S>(Var<S>, Var<S>, S);                                                     \
  template Var<S> group_norm<S>(Var<S>, Index, Var<S>, Var<S>, S);                                    \
  template Var<S> conv1d<S>(Var<S>, Var<S>, std::optional<Var<S>>, Index, Index);                     \
  template Var<S> attention<S>(Var<S>, Var<S>, Var<S>, Index);                                        \
  template Var<S> cross_entropy<S>(Var<S>, std::span<const int>, S, std::span<const S>);              \
  template Var<S> bce_with_logits<S>(Var<S>, std::span<const S>);                                     \
  template Var<S> mse<S>(Var<S>, Var<S>);                                                             \
  template Var<S> stop_gradient<S>(Var<S>);                                                           \
  template Var<S> straight_through<S>(Var<S>, Var<S>);

POMNI_INSTANTIATE_OPS(float)
POMNI_INSTANTIATE_OPS(double)

#undef POMNI_INSTANTIATE_OPS

}  // namespace pomni
