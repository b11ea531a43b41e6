#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "diverseevol/diversity.hpp"
#include "diverseevol/error.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace devol;
using testutil::matrix_from;

namespace {

std::vector<RecordId> iota_ids(std::size_t n) {
  std::vector<RecordId> ids(n);
  std::iota(ids.begin(), ids.end(), RecordId{0});
  return ids;
}

SimilarityKernel kernel_of(const Eigen::MatrixXd& m) { return {m, 0}; }

}  // namespace

TEST_CASE("cosine kernel entries") {
  const auto ids = iota_ids(2);
  auto k = cosine_kernel(matrix_from({{1, 0}, {0, 1}}), ids);
  CHECK(k.entries(0, 1) == 0.0);
  CHECK(k.entries(0, 0) == 1.0);
  k = cosine_kernel(matrix_from({{1, 0}, {2, 0}}), ids);
  CHECK(k.entries(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
  k = cosine_kernel(matrix_from({{1, 0}, {1, 1}}), ids);
  CHECK(k.entries(1, 0) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("cosine kernel handles zero-norm rows") {
  const auto k = cosine_kernel(matrix_from({{0, 0}, {1, 0}, {1, 0}}), iota_ids(3));
  CHECK(k.zero_norm_rows == 1);
  CHECK(k.entries(0, 0) == 1.0);
  CHECK(k.entries(0, 1) == 0.0);
  CHECK(k.entries(1, 2) == doctest::Approx(1.0));
  // Spectrum of K/n is {1/3, 2/3, 0}.
  CHECK(vendi_score(k).score == doctest::Approx(oracle::exp_entropy({1.0 / 3, 2.0 / 3})).epsilon(1e-9));
}

TEST_CASE("vendi extremes") {
  for (int n : {1, 2, 5, 17, 64}) {
    CHECK(std::abs(vendi_score(kernel_of(Eigen::MatrixXd::Identity(n, n))).score - n) <= 1e-9);
    CHECK(std::abs(vendi_score(kernel_of(Eigen::MatrixXd::Ones(n, n))).score - 1.0) <= 1e-9);
  }
}

TEST_CASE("vendi of a two-point kernel follows (1 +- s) / 2") {
  Eigen::MatrixXd k(2, 2);
  k << 1.0, 0.5, 0.5, 1.0;
  const auto r = vendi_score(kernel_of(k));
  const double want = oracle::exp_entropy({0.75, 0.25});
  CHECK(want == doctest::Approx(1.7548).epsilon(1e-4));
  CHECK(std::abs(r.score - want) <= 1e-6);
  CHECK(r.eigenvalues[0] == doctest::Approx(0.25));
  CHECK(r.eigenvalues[1] == doctest::Approx(0.75));
}

TEST_CASE("vendi matches the characteristic-polynomial oracle") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng() % 7;  // n <= 8
    const auto emb = testutil::random_matrix(n, n + 3, rng());
    const auto k = cosine_kernel(emb, iota_ids(n));
    std::vector<std::vector<double>> kk(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) kk[i][j] = k.entries(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    CHECK(vendi_score(k).score == doctest::Approx(oracle::vendi_via_char_poly(kk)).epsilon(1e-7));
  }
}

TEST_CASE("vendi invariants") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng() % 32, d = 1 + rng() % 12;
    const auto emb = testutil::random_matrix(n, d, rng());
    const auto ids = iota_ids(n);
    const auto result = vendi_score(cosine_kernel(emb, ids));
    CHECK(result.score >= 1.0 - 1e-9);
    CHECK(result.score <= static_cast<double>(n) + 1e-9);
    CHECK(std::accumulate(result.eigenvalues.begin(), result.eigenvalues.end(), 0.0) ==
          doctest::Approx(1.0).epsilon(1e-6));

    // duplicating every point leaves the score unchanged
    std::vector<RecordId> doubled = ids;
    doubled.insert(doubled.end(), ids.begin(), ids.end());
    CHECK(std::abs(pool_vendi(emb, doubled) - result.score) <= 1e-6);

    // positive row scaling leaves it unchanged
    std::vector<float> scaled(emb.data().begin(), emb.data().end());
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) scaled[r * d + j] *= static_cast<float>(1 + r * 3);
    CHECK(pool_vendi(EmbeddingMatrix(n, d, scaled), ids) == doctest::Approx(result.score).epsilon(1e-6));
  }
}

TEST_CASE("vendi rejects invalid kernels") {
  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 0.2, 0.3, 1.0;
  CHECK_THROWS_AS(vendi_score(kernel_of(bad)), Error);
  Eigen::MatrixXd not_psd(3, 3);
  not_psd << 1, 1, -1, 1, 1, 1, -1, 1, 1;
  try {
    vendi_score(kernel_of(not_psd));
    FAIL("expected kernel validity error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kernel_validity);
  }
  Eigen::MatrixXd diag(1, 1);
  diag << 0.9;
  CHECK_THROWS_AS(vendi_score(kernel_of(diag)), Error);
}

TEST_CASE("vendi trajectory") {
  const std::vector<EmbeddingMatrix> one = {matrix_from({{1, 0}, {0, 1}})};
  const std::vector<std::vector<RecordId>> p = {{0, 1}};
  const auto tr = pool_vendi_trajectory(one, p);
  REQUIRE(tr.size() == 1);
  CHECK(tr[0].data_size == 2);
  CHECK(tr[0].score == doctest::Approx(2.0));

  CHECK(pool_vendi_trajectory({}, {}).empty());
  CHECK_THROWS_AS(pool_vendi_trajectory(one, {}), Error);

  // Adding a duplicate scores no higher than adding an orthogonal point.
  const auto emb = matrix_from({{1, 0, 0}, {0, 1, 0}, {1, 0, 0}, {0, 0, 1}});
  const std::vector<EmbeddingMatrix> two = {emb, emb};
  const std::vector<std::vector<RecordId>> dup = {{0, 1}, {0, 1, 2}};
  const std::vector<std::vector<RecordId>> orth = {{0, 1}, {0, 1, 3}};
  const auto a = pool_vendi_trajectory(two, dup);
  const auto b = pool_vendi_trajectory(two, orth);
  CHECK(a[1].score <= b[1].score);
  // Frozen from the closed-form spectrum: duplicate -> eigenvalues {2/3, 1/3}; orthogonal -> three of 1/3.
  CHECK(a[1].score == doctest::Approx(oracle::exp_entropy({2.0 / 3, 1.0 / 3})));
  CHECK(b[1].score == doctest::Approx(3.0));
}

TEST_CASE("pool vendi through the Gram matrix equals the kernel path") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = 1 + rng() % 6, n = d + 1 + rng() % 40;
    auto emb = testutil::random_matrix(n, d, rng());
    std::vector<float> data(emb.data().begin(), emb.data().end());
    if (trial % 3 == 0)
      for (std::size_t j = 0; j < d; ++j) data[j] = 0.0f;  // zero-norm row 0
    if (trial % 5 == 0)
      for (std::size_t j = 0; j < d; ++j) data[d + j] = data[2 * d + j];  // duplicate rows
    emb = EmbeddingMatrix(n, d, data);
    std::vector<RecordId> ids = iota_ids(n);
    ids.push_back(n - 1);
    CHECK(pool_vendi(emb, ids) == doctest::Approx(vendi_score(cosine_kernel(emb, ids)).score).epsilon(1e-9));
  }
}
