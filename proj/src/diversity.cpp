#include "diverseevol/diversity.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <numeric>

#include <Eigen/Eigenvalues>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "diverseevol/error.hpp"

namespace devol {

namespace {

constexpr double kSymmetryTol = 1e-9;
constexpr double kClipTol = 1e-8;
constexpr double kTraceTol = 1e-4;
constexpr std::size_t kLargePool = 4096;

void validate_kernel(const Eigen::MatrixXd& k) {
  if (k.rows() != k.cols())
    throw Error(ErrorCode::kernel_validity, fmt::format("kernel is {}x{}", k.rows(), k.cols()));
  for (Eigen::Index i = 0; i < k.rows(); ++i) {
    if (k(i, i) != 1.0)
      throw Error(ErrorCode::kernel_validity, fmt::format("kernel diagonal at {} is {}", i, k(i, i)));
    for (Eigen::Index j = 0; j < i; ++j) {
      if (!std::isfinite(k(i, j)) || std::abs(k(i, j) - k(j, i)) > kSymmetryTol)
        throw Error(ErrorCode::kernel_validity, fmt::format("kernel not symmetric at ({}, {})", i, j));
    }
  }
}

}  // namespace

SimilarityKernel cosine_kernel(const EmbeddingMatrix& emb, std::span<const RecordId> ids) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  Eigen::MatrixXd rows(n, static_cast<Eigen::Index>(emb.dim()));
  for (Eigen::Index i = 0; i < n; ++i) {
    const RecordId id = ids[static_cast<std::size_t>(i)];
    if (id >= emb.count())
      throw Error(ErrorCode::alignment, fmt::format("pool id {} has no embedding row", id));
    const auto r = emb.row(id);
    for (std::size_t j = 0; j < r.size(); ++j) rows(i, static_cast<Eigen::Index>(j)) = r[j];
  }

  SimilarityKernel kernel;
  Eigen::VectorXd norms = rows.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (norms(i) == 0.0) {
      ++kernel.zero_norm_rows;
    } else {
      rows.row(i) /= norms(i);
    }
  }
  kernel.entries = rows * rows.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) {
      double s = (norms(i) == 0.0 || norms(j) == 0.0) ? 0.0 : std::clamp(kernel.entries(i, j), -1.0, 1.0);
      kernel.entries(i, j) = s;
      kernel.entries(j, i) = s;
    }
    kernel.entries(i, i) = 1.0;
  }
  if (kernel.zero_norm_rows > 0)
    spdlog::warn("cosine kernel: {} zero-norm rows treated as dissimilar to all others",
                 kernel.zero_norm_rows);
  return kernel;
}

namespace {

/// Clips, validates and renormalizes a spectrum of K/n, then scores it.
VendiResult finish_spectrum(std::vector<double> eigenvalues) {
  VendiResult result;
  result.eigenvalues = std::move(eigenvalues);
  double sum = 0.0;
  for (double& lambda : result.eigenvalues) {
    if (lambda < -kClipTol)
      throw Error(ErrorCode::kernel_validity,
                  fmt::format("kernel has eigenvalue {} (not positive semidefinite)", lambda));
    sum += lambda;
    lambda = std::max(lambda, 0.0);
  }
  if (std::abs(sum - 1.0) > kTraceTol)
    throw Error(ErrorCode::kernel_validity, fmt::format("normalized spectrum sums to {}", sum));

  const double clipped_sum = std::accumulate(result.eigenvalues.begin(), result.eigenvalues.end(), 0.0);
  double entropy = 0.0;
  for (double& lambda : result.eigenvalues) {
    lambda /= clipped_sum;
    if (lambda > 0.0) entropy -= lambda * std::log(lambda);
  }
  result.score = std::exp(entropy);
  return result;
}

std::vector<double> symmetric_eigenvalues(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success)
    throw Error(ErrorCode::eigensolver, "symmetric eigensolver did not converge");
  return {solver.eigenvalues().data(), solver.eigenvalues().data() + solver.eigenvalues().size()};
}

}  // namespace

VendiResult vendi_score(const SimilarityKernel& kernel) {
  const auto& k = kernel.entries;
  const auto n = k.rows();
  if (n == 0) throw Error(ErrorCode::empty_input, "Vendi Score of an empty pool");
  validate_kernel(k);
  if (static_cast<std::size_t>(n) > kLargePool)
    spdlog::warn("Vendi Score on a {}x{} kernel; exact eigendecomposition may be slow", n, n);
  return finish_spectrum(symmetric_eigenvalues(k / static_cast<double>(n)));
}

double pool_vendi(const EmbeddingMatrix& emb, std::span<const RecordId> ids) {
  if (ids.size() <= emb.dim()) return vendi_score(cosine_kernel(emb, ids)).score;

  // K = X X^T for unit rows X shares its nonzero spectrum with X^T X (d x d).
  // A zero-norm row is an isolated block of K and adds one eigenvalue 1/n.
  const auto d = static_cast<Eigen::Index>(emb.dim());
  const double n = static_cast<double>(ids.size());
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd x(d);
  std::size_t zero_rows = 0;
  for (RecordId id : ids) {
    if (id >= emb.count())
      throw Error(ErrorCode::alignment, fmt::format("pool id {} has no embedding row", id));
    const auto r = emb.row(id);
    for (Eigen::Index j = 0; j < d; ++j) x(j) = r[static_cast<std::size_t>(j)];
    const double norm = x.norm();
    if (norm == 0.0) {
      ++zero_rows;
      continue;
    }
    x /= norm;
    gram.selfadjointView<Eigen::Lower>().rankUpdate(x);
  }
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  if (zero_rows > 0)
    spdlog::warn("cosine kernel: {} zero-norm rows treated as dissimilar to all others", zero_rows);

  auto eigenvalues = symmetric_eigenvalues(gram / n);
  eigenvalues.insert(eigenvalues.end(), zero_rows, 1.0 / n);
  return finish_spectrum(std::move(eigenvalues)).score;
}

std::vector<TrajectoryPoint> pool_vendi_trajectory(std::span<const EmbeddingMatrix> embeddings,
                                                   std::span<const std::vector<RecordId>> pools) {
  if (embeddings.size() != pools.size())
    throw Error(ErrorCode::alignment, fmt::format("{} embedding matrices for {} recorded pools",
                                                  embeddings.size(), pools.size()));
  std::vector<TrajectoryPoint> out;
  out.reserve(pools.size());
  for (std::size_t t = 0; t < pools.size(); ++t)
    out.push_back({pools[t].size(), pool_vendi(embeddings[t], pools[t])});
  return out;
}

}  // namespace devol
