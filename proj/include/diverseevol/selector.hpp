#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diverseevol/corpus.hpp"

namespace devol {

enum class Strategy { k_center, random, least_confidence, margin };
enum class Metric { euclidean, cosine };

std::string_view to_string(Strategy s) noexcept;
std::string_view to_string(Metric m) noexcept;
Strategy parse_strategy(std::string_view name);
Metric parse_metric(std::string_view name);

/// Selection function configuration. Ties are always broken by lowest id.
struct StrategyConfig {
  Strategy strategy = Strategy::k_center;
  std::size_t k = 100;
  Metric distance = Metric::euclidean;

  friend bool operator==(const StrategyConfig&, const StrategyConfig&) = default;
};

/// The evolving partition of the corpus. `selected()[0]` is the initial random
/// pool; `selected()[t]` for t >= 1 is the batch added by selection step t.
/// P_t is the union of the first t + 1 batches, Q_t its complement.
class PoolState {
 public:
  PoolState(std::size_t corpus_size, std::vector<std::vector<RecordId>> selected,
            std::uint64_t seed, std::string config_fingerprint);

  std::size_t corpus_size() const noexcept { return corpus_size_; }
  std::size_t iteration() const noexcept { return selected_.size() - 1; }
  const std::vector<std::vector<RecordId>>& selected() const noexcept { return selected_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& config_fingerprint() const noexcept { return fingerprint_; }

  bool in_pool(RecordId id) const { return member_.at(id) != 0; }
  std::size_t pool_size() const noexcept { return pool_size_; }

  /// P_t in selection order.
  std::vector<RecordId> pool() const { return pool_at(iteration()); }
  /// P_s for s <= t, in selection order.
  std::vector<RecordId> pool_at(std::size_t step) const;
  /// Q_t in ascending id order.
  std::vector<RecordId> candidates() const;

  /// Appends S_t, advancing t. Throws if `batch` overlaps P_t or is out of range.
  void commit(std::vector<RecordId> batch);

  friend bool operator==(const PoolState& a, const PoolState& b) {
    return a.corpus_size_ == b.corpus_size_ && a.selected_ == b.selected_ && a.seed_ == b.seed_ &&
           a.fingerprint_ == b.fingerprint_;
  }

 private:
  std::size_t corpus_size_;
  std::vector<std::vector<RecordId>> selected_;
  std::uint64_t seed_;
  std::string fingerprint_;
  std::vector<unsigned char> member_;
  std::size_t pool_size_ = 0;
};

/// Δ between two embedding rows. Accumulates in double, left to right over
/// dimensions. Cosine distance is 1 - cos, clamped to [0, 2]; a zero-norm row
/// has similarity 0 to everything except another zero-norm row.
double distance(Metric metric, std::span<const float> a, std::span<const float> b);

/// Greedy farthest-point sampler over a fixed candidate set. Keeps one
/// min-distance per candidate, updated only against the newest center.
class KCenterSampler {
 public:
  /// `threads` = 0 picks std::thread::hardware_concurrency().
  KCenterSampler(const EmbeddingMatrix& emb, std::span<const RecordId> centers,
                 std::vector<RecordId> candidates, Metric metric, std::size_t threads = 0);

  /// Commits the argmax candidate (lowest id on ties) as a center and returns it.
  RecordId pick();
  /// Min-distance of the last picked candidate at the moment it was picked.
  double last_radius() const noexcept { return last_radius_; }

  /// Remaining candidates (ascending) and their current min-distances.
  std::span<const RecordId> candidates() const noexcept { return candidates_; }
  std::span<const double> min_distances() const noexcept { return min_dist_; }

 private:
  void absorb(std::span<const RecordId> centers);

  const EmbeddingMatrix& emb_;
  Metric metric_;
  std::size_t threads_;
  std::vector<RecordId> candidates_;
  std::vector<double> min_dist_;
  std::vector<double> norms_;
  double last_radius_ = 0.0;
};

struct KCenterResult {
  std::vector<RecordId> ids;
  /// radii[j] = min-distance of ids[j] when it was chosen; non-increasing.
  std::vector<double> radii;
};

KCenterResult select_k_center(const EmbeddingMatrix& emb, const PoolState& pool, std::size_t k,
                              Metric metric, std::size_t threads = 0);

/// Uniform sample without replacement from Q_t; the RNG stream key is
/// seed XOR t.
std::vector<RecordId> select_random(const PoolState& pool, std::size_t k, std::uint64_t seed);

/// Mean best log-probability; lower is less confident.
double uncertainty_score_least_confidence(const TokenScoreRecord& rec);
/// Mean of exp(best) - exp(second); lower is more ambiguous.
double uncertainty_score_margin(const TokenScoreRecord& rec);

std::vector<RecordId> select_least_confidence(const TokenScores& scores, const PoolState& pool,
                                              std::size_t k);
std::vector<RecordId> select_margin(const TokenScores& scores, const PoolState& pool, std::size_t k);

/// Max over all rows of the distance to the nearest center.
double covering_radius(const EmbeddingMatrix& emb, std::span<const RecordId> centers, Metric metric,
                       std::size_t threads = 0);

/// Deterministic uniform draw of `count` ids from {0..n-1}, used for P_0.
std::vector<RecordId> sample_initial_pool(std::size_t n, std::size_t count, std::uint64_t seed);

}  // namespace devol
