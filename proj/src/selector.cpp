#include "diverseevol/selector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <thread>

#include <fmt/format.h>

#include "diverseevol/error.hpp"

namespace devol {

namespace {

// Sums run over kLanes interleaved partial sums (element j goes to lane
// j % kLanes), combined pairwise at the end. Every distance in this file uses
// this one order, so the blocked kernel and `distance()` agree bit for bit.
constexpr std::size_t kLanes = 8;
// Rows per tile when absorbing many centers; 32 rows of d = 4096 is 512 KiB.
constexpr std::size_t kTileBytes = 512 * 1024;

double combine(const double (&acc)[kLanes]) {
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

double squared_euclidean(const float* a, const float* b, std::size_t dim) {
  double acc[kLanes] = {};
  const std::size_t body = dim - dim % kLanes;
  for (std::size_t j = 0; j < body; j += kLanes)
    for (std::size_t c = 0; c < kLanes; ++c) {
      const double d = static_cast<double>(a[j + c]) - static_cast<double>(b[j + c]);
      acc[c] += d * d;
    }
  for (std::size_t j = body; j < dim; ++j) {
    const double d = static_cast<double>(a[j]) - static_cast<double>(b[j]);
    acc[j - body] += d * d;
  }
  return combine(acc);
}

double dot(const float* a, const float* b, std::size_t dim) {
  double acc[kLanes] = {};
  const std::size_t body = dim - dim % kLanes;
  for (std::size_t j = 0; j < body; j += kLanes)
    for (std::size_t c = 0; c < kLanes; ++c) acc[c] += static_cast<double>(a[j + c]) * static_cast<double>(b[j + c]);
  for (std::size_t j = body; j < dim; ++j) acc[j - body] += static_cast<double>(a[j]) * static_cast<double>(b[j]);
  return combine(acc);
}

double sum_squares(std::span<const float> v) { return dot(v.data(), v.data(), v.size()); }

double cosine_from_parts(double dot, double sq_a, double sq_b) {
  double sim;
  if (sq_a == 0.0 || sq_b == 0.0) {
    sim = (sq_a == 0.0 && sq_b == 0.0) ? 1.0 : 0.0;
  } else {
    sim = dot / std::sqrt(sq_a * sq_b);
  }
  return std::clamp(1.0 - sim, 0.0, 2.0);
}

std::size_t resolve_threads(std::size_t threads) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  return threads;
}

// Runs fn(begin, end) over disjoint contiguous ranges of [0, n).
template <typename Fn>
void parallel_ranges(std::size_t n, std::size_t threads, Fn&& fn) {
  constexpr std::size_t kMinPerThread = 1024;
  threads = std::min(threads, std::max<std::size_t>(1, n / kMinPerThread));
  if (threads <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::jthread> workers;
  workers.reserve(threads - 1);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    const std::size_t begin = std::min(n, t * chunk);
    const std::size_t end = std::min(n, begin + chunk);
    workers.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
}

std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t r = rng();
    if (r >= threshold) return r % n;
  }
}

void check_budget(std::size_t k, std::size_t available) {
  if (k == 0) throw Error(ErrorCode::budget, "selection budget k must be at least 1");
  if (k > available)
    throw Error(ErrorCode::budget,
                fmt::format("budget k = {} exceeds the {} remaining candidates", k, available));
}

template <typename ScoreFn>
std::vector<RecordId> select_by_score(const TokenScores& scores, const PoolState& pool, std::size_t k,
                                      ScoreFn score) {
  const auto candidates = pool.candidates();
  check_budget(k, candidates.size());
  std::vector<std::pair<double, RecordId>> ranked;
  ranked.reserve(candidates.size());
  for (RecordId id : candidates) {
    auto it = scores.find(id);
    if (it == scores.end())
      throw Error(ErrorCode::coverage, fmt::format("no token scores for candidate {}", id));
    ranked.emplace_back(score(it->second), id);
  }
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end());
  std::vector<RecordId> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(ranked[i].second);
  return out;
}

}  // namespace

std::string_view to_string(Strategy s) noexcept {
  switch (s) {
    case Strategy::k_center: return "k_center";
    case Strategy::random: return "random";
    case Strategy::least_confidence: return "least_confidence";
    case Strategy::margin: return "margin";
  }
  return "?";
}

std::string_view to_string(Metric m) noexcept {
  return m == Metric::euclidean ? "euclidean" : "cosine";
}

Strategy parse_strategy(std::string_view name) {
  for (auto s : {Strategy::k_center, Strategy::random, Strategy::least_confidence, Strategy::margin})
    if (name == to_string(s)) return s;
  throw Error(ErrorCode::config, fmt::format("unknown strategy '{}'", name));
}

Metric parse_metric(std::string_view name) {
  for (auto m : {Metric::euclidean, Metric::cosine})
    if (name == to_string(m)) return m;
  throw Error(ErrorCode::config, fmt::format("unknown distance metric '{}'", name));
}

PoolState::PoolState(std::size_t corpus_size, std::vector<std::vector<RecordId>> selected,
                     std::uint64_t seed, std::string config_fingerprint)
    : corpus_size_(corpus_size),
      selected_(std::move(selected)),
      seed_(seed),
      fingerprint_(std::move(config_fingerprint)),
      member_(corpus_size, 0) {
  if (selected_.empty())
    throw Error(ErrorCode::precondition, "pool state needs at least the initial batch");
  for (const auto& batch : selected_) {
    for (RecordId id : batch) {
      if (id >= corpus_size_)
        throw Error(ErrorCode::precondition,
                    fmt::format("pool id {} outside corpus of size {}", id, corpus_size_));
      if (member_[id]) throw Error(ErrorCode::precondition, fmt::format("pool id {} selected twice", id));
      member_[id] = 1;
      ++pool_size_;
    }
  }
}

std::vector<RecordId> PoolState::pool_at(std::size_t step) const {
  if (step >= selected_.size())
    throw Error(ErrorCode::precondition, fmt::format("no pool recorded for step {}", step));
  std::vector<RecordId> out;
  for (std::size_t s = 0; s <= step; ++s) out.insert(out.end(), selected_[s].begin(), selected_[s].end());
  return out;
}

std::vector<RecordId> PoolState::candidates() const {
  std::vector<RecordId> out;
  out.reserve(corpus_size_ - pool_size_);
  for (RecordId id = 0; id < corpus_size_; ++id)
    if (!member_[id]) out.push_back(id);
  return out;
}

void PoolState::commit(std::vector<RecordId> batch) {
  std::vector<RecordId> sorted = batch;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw Error(ErrorCode::precondition, "selected batch contains duplicate ids");
  for (RecordId id : sorted) {
    if (id >= corpus_size_)
      throw Error(ErrorCode::precondition, fmt::format("selected id {} outside corpus", id));
    if (member_[id]) throw Error(ErrorCode::precondition, fmt::format("selected id {} already pooled", id));
  }
  for (RecordId id : sorted) member_[id] = 1;
  pool_size_ += batch.size();
  selected_.push_back(std::move(batch));
}

double distance(Metric metric, std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size())
    throw Error(ErrorCode::shape, fmt::format("distance between {}- and {}-vectors", a.size(), b.size()));
  if (metric == Metric::euclidean) return std::sqrt(squared_euclidean(a.data(), b.data(), a.size()));
  return cosine_from_parts(dot(a.data(), b.data(), a.size()), sum_squares(a), sum_squares(b));
}

KCenterSampler::KCenterSampler(const EmbeddingMatrix& emb, std::span<const RecordId> centers,
                               std::vector<RecordId> candidates, Metric metric, std::size_t threads)
    : emb_(emb),
      metric_(metric),
      threads_(resolve_threads(threads)),
      candidates_(std::move(candidates)),
      min_dist_(candidates_.size(), std::numeric_limits<double>::infinity()) {
  if (centers.empty())
    throw Error(ErrorCode::precondition, "k-center selection needs a non-empty initial pool");
  if (!std::is_sorted(candidates_.begin(), candidates_.end()) ||
      std::adjacent_find(candidates_.begin(), candidates_.end()) != candidates_.end())
    throw Error(ErrorCode::precondition, "candidate ids must be strictly ascending");
  for (RecordId id : candidates_)
    if (id >= emb_.count())
      throw Error(ErrorCode::alignment, fmt::format("candidate {} has no embedding row", id));
  if (metric_ == Metric::cosine) {
    norms_.resize(candidates_.size());
    for (std::size_t i = 0; i < candidates_.size(); ++i) norms_[i] = sum_squares(emb_.row(candidates_[i]));
  }
  for (RecordId c : centers)
    if (c >= emb_.count()) throw Error(ErrorCode::alignment, fmt::format("center {} has no embedding row", c));
  absorb(centers);
}

void KCenterSampler::absorb(std::span<const RecordId> centers) {
  const std::size_t dim = emb_.dim();
  std::vector<double> center_sq(centers.size(), 0.0);
  if (metric_ == Metric::cosine)
    for (std::size_t c = 0; c < centers.size(); ++c) center_sq[c] = sum_squares(emb_.row(centers[c]));
  const std::size_t tile = std::max<std::size_t>(1, kTileBytes / std::max<std::size_t>(1, dim * sizeof(float)));

  // Tiles of candidate rows stay in cache while every center passes over them.
  parallel_ranges(candidates_.size(), threads_, [&](std::size_t begin, std::size_t end) {
    for (std::size_t t0 = begin; t0 < end; t0 += tile) {
      const std::size_t t1 = std::min(end, t0 + tile);
      for (std::size_t c = 0; c < centers.size(); ++c) {
        const float* y = emb_.row(centers[c]).data();
        for (std::size_t i = t0; i < t1; ++i) {
          const float* x = emb_.row(candidates_[i]).data();
          const double d = metric_ == Metric::euclidean
                               ? std::sqrt(squared_euclidean(x, y, dim))
                               : cosine_from_parts(dot(x, y, dim), norms_[i], center_sq[c]);
          min_dist_[i] = std::min(min_dist_[i], d);
        }
      }
    }
  });
}

RecordId KCenterSampler::pick() {
  if (candidates_.empty()) throw Error(ErrorCode::budget, "no candidates left to select");
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates_.size(); ++i)
    if (min_dist_[i] > min_dist_[best]) best = i;
  const RecordId chosen = candidates_[best];
  last_radius_ = min_dist_[best];
  candidates_.erase(candidates_.begin() + static_cast<std::ptrdiff_t>(best));
  min_dist_.erase(min_dist_.begin() + static_cast<std::ptrdiff_t>(best));
  if (!norms_.empty()) norms_.erase(norms_.begin() + static_cast<std::ptrdiff_t>(best));
  absorb(std::span<const RecordId>(&chosen, 1));
  return chosen;
}

KCenterResult select_k_center(const EmbeddingMatrix& emb, const PoolState& pool, std::size_t k,
                              Metric metric, std::size_t threads) {
  if (emb.count() != pool.corpus_size())
    throw Error(ErrorCode::alignment, fmt::format("{} embedding rows for a corpus of {}", emb.count(),
                                                  pool.corpus_size()));
  if (pool.pool_size() == 0)
    throw Error(ErrorCode::precondition, "k-center selection needs a non-empty initial pool");
  auto candidates = pool.candidates();
  check_budget(k, candidates.size());
  const auto centers = pool.pool();
  KCenterSampler sampler(emb, centers, std::move(candidates), metric, threads);
  KCenterResult result;
  result.ids.reserve(k);
  result.radii.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    result.ids.push_back(sampler.pick());
    result.radii.push_back(sampler.last_radius());
  }
  return result;
}

std::vector<RecordId> select_random(const PoolState& pool, std::size_t k, std::uint64_t seed) {
  auto candidates = pool.candidates();
  check_budget(k, candidates.size());
  std::mt19937_64 rng(seed ^ static_cast<std::uint64_t>(pool.iteration()));
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + bounded(rng, candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(k);
  return candidates;
}

double uncertainty_score_least_confidence(const TokenScoreRecord& rec) {
  double sum = 0.0;
  for (const auto& t : rec.tokens) sum += t.best;
  return sum / static_cast<double>(rec.tokens.size());
}

double uncertainty_score_margin(const TokenScoreRecord& rec) {
  double sum = 0.0;
  for (const auto& t : rec.tokens) sum += std::exp(t.best) - std::exp(t.second);
  return sum / static_cast<double>(rec.tokens.size());
}

std::vector<RecordId> select_least_confidence(const TokenScores& scores, const PoolState& pool,
                                              std::size_t k) {
  return select_by_score(scores, pool, k, uncertainty_score_least_confidence);
}

std::vector<RecordId> select_margin(const TokenScores& scores, const PoolState& pool, std::size_t k) {
  return select_by_score(scores, pool, k, uncertainty_score_margin);
}

double covering_radius(const EmbeddingMatrix& emb, std::span<const RecordId> centers, Metric metric,
                       std::size_t threads) {
  std::vector<RecordId> all(emb.count());
  std::iota(all.begin(), all.end(), RecordId{0});
  KCenterSampler sampler(emb, centers, std::move(all), metric, threads);
  const auto d = sampler.min_distances();
  return d.empty() ? 0.0 : *std::max_element(d.begin(), d.end());
}

std::vector<RecordId> sample_initial_pool(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (count > n)
    throw Error(ErrorCode::budget, fmt::format("initial pool of {} exceeds corpus of {}", count, n));
  // Separate stream from select_random, which keys on seed ^ t.
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x706f6f6cU};
  std::mt19937_64 rng(seq);
  std::vector<RecordId> ids(n);
  std::iota(ids.begin(), ids.end(), RecordId{0});
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + bounded(rng, n - i);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(count);
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace devol
