#pragma once

#include "pomni/nn/layers.hpp"

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

namespace pomni {

/// K unit-norm codes plus EMA accumulators. Everything lives in the
/// ParamStore as non-trainable buffers so it checkpoints with the model.
struct Codebook {
  Parameter<Real>* codes = nullptr;         // [K, D], unit rows
  Parameter<Real>* cluster_size = nullptr;  // [K]
  Parameter<Real>* code_sum = nullptr;      // [K, D]
  Parameter<Real>* idle = nullptr;          // [K], epochs without assignments

  static Codebook make(ParamStore<Real>& ps, const std::string& name, Index size, Index dim, Rng& rng);

  Index size() const { return codes->value.dim(0); }
  Index dim() const { return codes->value.dim(1); }
};

/// Index of the nearest code to each row by cosine similarity (equivalently
/// Euclidean distance between unit vectors). Ties go to the lower index.
/// Scores are computed in double precision.
std::vector<Index> nearest_codes(const Tensor<Real>& emb, const Tensor<Real>& codes);

/// Per-batch assignment statistics for one codebook.
struct CodeUsage {
  Eigen::VectorXd counts;   // [K]
  Eigen::MatrixXd sums;     // [K, D], sums of unit embeddings
  Eigen::MatrixXf recent;   // unit embeddings kept as revival candidates

  CodeUsage() = default;
  CodeUsage(Index size, Index dim);
  /// unit: [N, D] rows already l2-normalized.
  void add(const Tensor<Real>& unit, std::span<const Index> index);
  void merge(const CodeUsage& other);
  bool empty() const { return counts.size() == 0; }
};

/// N <- decay N + (1-decay) count; m <- decay m + (1-decay) sum;
/// code <- l2(m / ((N + eps)(1 + K eps / sum N))).
void ema_update(Codebook& cb, const CodeUsage& usage, double decay, double eps);

/// Ends an epoch: codes unused for `after` consecutive epochs are reset to a
/// random candidate embedding. Returns the number of revived codes.
int revive_dead_codes(Codebook& cb, const Eigen::VectorXd& epoch_counts, const Eigen::MatrixXf& candidates, int after,
                      Rng& rng);

/// exp(entropy) of the assignment histogram; 0 when empty.
double perplexity(const Eigen::VectorXd& counts);

/// Forward value of the selected code, gradient straight through to the
/// unit embedding.
struct Quantized {
  Var<Real> unit;           // l2(emb)
  Var<Real> code;           // straight_through(code, unit)
  Var<Real> code_constant;  // selected codes, no gradient
  std::vector<Index> index;
};

Quantized quantize(Tape<Real>& t, Var<Real> emb, const Codebook& cb);

/// ||l2(z) - sg(code)||^2, mean over elements.
Var<Real> commitment_loss(const Quantized& q);

/// ||sg(l2(z)) - code||^2 with codes read from the buffer. Codes are updated
/// by EMA, so this term carries no gradient to the encoder or the codebook.
Var<Real> vq_loss(Tape<Real>& t, const Quantized& q, const Codebook& cb);

}  // namespace pomni
