#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "diverseevol/corpus.hpp"

namespace devol {

/// Symmetric similarity matrix with an exact unit diagonal.
struct SimilarityKernel {
  Eigen::MatrixXd entries;
  /// Rows whose embedding had zero norm; they get similarity 0 to all others.
  std::size_t zero_norm_rows = 0;

  std::size_t size() const noexcept { return static_cast<std::size_t>(entries.rows()); }
};

struct VendiResult {
  double score = 1.0;
  /// Clipped, renormalized eigenvalues of K/n, ascending.
  std::vector<double> eigenvalues;
};

SimilarityKernel cosine_kernel(const EmbeddingMatrix& emb, std::span<const RecordId> ids);

/// exp of the Shannon entropy of the eigenvalues of K/n. Eigenvalues in
/// [-1e-8, 0) are clipped to zero; anything more negative, or a spectrum
/// whose sum is off by more than 1e-4, is rejected as an invalid kernel.
VendiResult vendi_score(const SimilarityKernel& kernel);

/// Equals vendi_score(cosine_kernel(emb, ids)).score; pools larger than the
/// embedding dimension are scored through the d x d Gram matrix instead.
double pool_vendi(const EmbeddingMatrix& emb, std::span<const RecordId> ids);

struct TrajectoryPoint {
  std::size_t data_size = 0;
  double score = 0.0;
};

/// One point per step t: the Vendi Score of pools[t] under embeddings[t].
std::vector<TrajectoryPoint> pool_vendi_trajectory(std::span<const EmbeddingMatrix> embeddings,
                                                   std::span<const std::vector<RecordId>> pools);

}  // namespace devol
