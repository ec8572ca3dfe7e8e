#include "pomni/tokenizer/codebook.hpp"

#include <cmath>
#include <limits>

namespace pomni {

namespace {

Tensor<Real> random_unit_rows(Rng& rng, Index rows, Index cols) {
  Tensor<Real> t({rows, cols});
  for (Index r = 0; r < rows; ++r) {
    double norm = 0.0;
    std::vector<double> v(static_cast<std::size_t>(cols));
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (Index c = 0; c < cols; ++c) t(r, c) = static_cast<Real>(v[static_cast<std::size_t>(c)] / norm);
  }
  return t;
}

}  // namespace

Codebook Codebook::make(ParamStore<Real>& ps, const std::string& name, Index size, Index dim, Rng& rng) {
  if (size < 1 || dim < 1) throw std::invalid_argument(name + ": codebook needs K >= 1 and D >= 1");
  Codebook cb;
  Tensor<Real> init = random_unit_rows(rng, size, dim);
  cb.codes = &ps.add(name + ".codes", init, false);
  cb.cluster_size = &ps.add(name + ".cluster_size", Tensor<Real>::zeros({size}), false);
  cb.code_sum = &ps.add(name + ".code_sum", init, false);
  cb.idle = &ps.add(name + ".idle", Tensor<Real>::zeros({size}), false);
  return cb;
}

std::vector<Index> nearest_codes(const Tensor<Real>& emb, const Tensor<Real>& codes) {
  if (emb.cols() != codes.cols()) {
    throw ShapeError("quantize: embedding width " + std::to_string(emb.cols()) + " vs code width " +
                     std::to_string(codes.cols()));
  }
  const Eigen::MatrixXd e = emb.matrix().cast<double>();
  const Eigen::MatrixXd v = codes.matrix().cast<double>();
  Eigen::VectorXd vn = v.rowwise().norm();
  std::vector<Index> out(static_cast<std::size_t>(e.rows()));
  for (Index r = 0; r < e.rows(); ++r) {
    const double en = e.row(r).norm();
    Index best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (Index k = 0; k < v.rows(); ++k) {
      const double s = e.row(r).dot(v.row(k)) / (std::max(en, 1e-300) * std::max(vn[k], 1e-300));
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

CodeUsage::CodeUsage(Index size, Index dim)
    : counts(Eigen::VectorXd::Zero(size)), sums(Eigen::MatrixXd::Zero(size, dim)), recent(0, dim) {}

void CodeUsage::add(const Tensor<Real>& unit, std::span<const Index> index) {
  const Index keep = 64;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto r = static_cast<Index>(i);
    counts[index[i]] += 1.0;
    sums.row(index[i]) += unit.matrix().row(r).cast<double>();
  }
  const Index take = std::min<Index>(keep, unit.rows());
  const Index old = recent.rows();
  recent.conservativeResize(old + take, Eigen::NoChange);
  recent.bottomRows(take) = unit.matrix().topRows(take);
}

void CodeUsage::merge(const CodeUsage& other) {
  if (other.empty()) return;
  if (empty()) {
    *this = other;
    return;
  }
  counts += other.counts;
  sums += other.sums;
  const Index old = recent.rows();
  recent.conservativeResize(old + other.recent.rows(), Eigen::NoChange);
  recent.bottomRows(other.recent.rows()) = other.recent;
}

void ema_update(Codebook& cb, const CodeUsage& usage, double decay, double eps) {
  if (usage.empty()) return;
  const Index k_count = cb.size();
  auto& n = cb.cluster_size->value.array();
  auto m = cb.code_sum->value.matrix();
  auto codes = cb.codes->value.matrix();
  for (Index k = 0; k < k_count; ++k) {
    n[k] = static_cast<Real>(decay * n[k] + (1.0 - decay) * usage.counts[k]);
    m.row(k) = (decay * m.row(k).cast<double>() + (1.0 - decay) * usage.sums.row(k)).cast<Real>();
  }
  const double total = n.template cast<double>().sum();
  const double smoothing = total > 0.0 ? 1.0 + static_cast<double>(k_count) * eps / total : 1.0;
  for (Index k = 0; k < k_count; ++k) {
    Eigen::RowVectorXd v = m.row(k).cast<double>() / ((static_cast<double>(n[k]) + eps) * smoothing);
    const double norm = v.norm();
    if (norm > 0.0 && std::isfinite(norm)) codes.row(k) = (v / norm).cast<Real>();
  }
}

int revive_dead_codes(Codebook& cb, const Eigen::VectorXd& epoch_counts, const Eigen::MatrixXf& candidates, int after,
                      Rng& rng) {
  int revived = 0;
  auto& idle = cb.idle->value.array();
  for (Index k = 0; k < cb.size(); ++k) {
    idle[k] = epoch_counts.size() > k && epoch_counts[k] > 0.0 ? 0.0f : idle[k] + 1.0f;
    if (after <= 0 || idle[k] < static_cast<Real>(after) || candidates.rows() == 0) continue;
    const auto pick = static_cast<Index>(rng.below(static_cast<std::uint64_t>(candidates.rows())));
    Eigen::RowVectorXf v = candidates.row(pick);
    const float norm = v.norm();
    if (!(norm > 0.0f)) continue;
    v /= norm;
    cb.codes->value.matrix().row(k) = v;
    cb.code_sum->value.matrix().row(k) = v;
    cb.cluster_size->value[k] = 0.0f;
    idle[k] = 0.0f;
    ++revived;
  }
  return revived;
}

double perplexity(const Eigen::VectorXd& counts) {
  const double total = counts.sum();
  if (!(total > 0.0)) return 0.0;
  double h = 0.0;
  for (Index k = 0; k < counts.size(); ++k) {
    if (counts[k] > 0.0) {
      const double p = counts[k] / total;
      h -= p * std::log(p);
    }
  }
  return std::exp(h);
}

Quantized quantize(Tape<Real>& t, Var<Real> emb, const Codebook& cb) {
  Quantized q;
  q.unit = l2_normalize(emb);
  q.index = nearest_codes(emb.value(), cb.codes->value);
  Tensor<Real> selected({static_cast<Index>(q.index.size()), cb.dim()});
  for (std::size_t i = 0; i < q.index.size(); ++i) {
    selected.matrix().row(static_cast<Index>(i)) = cb.codes->value.matrix().row(q.index[i]);
  }
  q.code_constant = t.constant(std::move(selected));
  q.code = straight_through(q.code_constant, q.unit);
  return q;
}

Var<Real> commitment_loss(const Quantized& q) { return mse(q.unit, stop_gradient(q.code_constant)); }

Var<Real> vq_loss(Tape<Real>& t, const Quantized& q, const Codebook& cb) {
  return mse(stop_gradient(q.unit), gather_rows(t.param(*cb.codes), std::span<const Index>(q.index)));
}

}  // namespace pomni
