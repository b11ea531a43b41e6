#include <doctest.h>

// Eigen before httplib: <resolv.h> defines a `_res` macro that breaks Eigen.
#include "diverseevol/diversity.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <chrono>
#include <set>
#include <thread>

#include "diverseevol/error.hpp"
#include "diverseevol/orchestrator.hpp"
#include "mock_hooks.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace devol;
using testutil::TempDir;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected devol::Error");
  return ErrorCode::io;
}

struct Fixture {
  TempDir dir;
  RunConfig config;

  Fixture(std::size_t n, Strategy s, std::size_t k, std::size_t T, std::size_t initial, std::uint64_t seed = 7) {
    testutil::write_synthetic_corpus(dir / "corpus.jsonl", n);
    config.corpus_path = dir / "corpus.jsonl";
    config.workdir = dir / "work";
    config.strategy.strategy = s;
    config.strategy.k = k;
    config.iterations = T;
    config.initial_pool_size = initial;
    config.seed = seed;
    config.threads = 2;
  }
  std::filesystem::path state_file() const { return config.workdir / "state.json"; }
};

HookSpec shell_hook(std::string command, std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
  HookSpec spec;
  spec.command = std::move(command);
  spec.timeout = timeout;
  return spec;
}

std::vector<RecordId> flatten(const PoolState& s) { return s.pool(); }

}  // namespace

TEST_CASE("init_run partitions the corpus by seed") {
  Fixture f(1000, Strategy::random, 100, 1, 100);
  const auto state = init_run(f.config);
  CHECK(state.pool_size() == 100);
  CHECK(state.candidates().size() == 900);
  CHECK(std::filesystem::exists(f.state_file()));
  CHECK(std::filesystem::exists(f.config.workdir / "pool_0.jsonl"));

  Fixture g(1000, Strategy::random, 100, 1, 100);
  CHECK(init_run(g.config).pool() == state.pool());
  Fixture h(1000, Strategy::random, 100, 1, 100, 8);
  CHECK(init_run(h.config).pool() != state.pool());
}

TEST_CASE("initial pool equal to the corpus leaves nothing to select") {
  Fixture f(50, Strategy::random, 5, 1, 50);
  Evolution evo(f.config);
  CHECK(evo.init().candidates().empty());
  CHECK(code_of([&] { evo.step(); }) == ErrorCode::budget);
  // initial + T*k exceeds n, caught before the workdir is touched
  CHECK(code_of([&] { Evolution(f.config).run(); }) == ErrorCode::config);
}

TEST_CASE("config invariants") {
  Fixture f(100, Strategy::random, 10, 0, 10);
  CHECK(code_of([&] { run_evolution(f.config); }) == ErrorCode::config);
  f.config.iterations = 10;
  CHECK(code_of([&] { run_evolution(f.config); }) == ErrorCode::config);  // 10 + 100 > 100
  f.config.iterations = 9;
  f.config.initial_pool_size = 0;
  CHECK(code_of([&] { run_evolution(f.config); }) == ErrorCode::config);
  f.config.initial_pool_size = 10;
  f.config.strategy.strategy = Strategy::k_center;
  CHECK(code_of([&] { Evolution evo(f.config); }) == ErrorCode::config);  // no embed hook
  f.config.strategy.strategy = Strategy::margin;
  CHECK(code_of([&] { Evolution evo(f.config); }) == ErrorCode::config);  // no score hook
  f.config.strategy.strategy = Strategy::random;
  f.config.train_hook = shell_hook("true {OUT_FILE}");
  CHECK(code_of([&] { Evolution evo(f.config); }) == ErrorCode::config);  // lacks {POOL_FILE}
}

TEST_CASE("workdir collisions") {
  Fixture f(100, Strategy::random, 10, 2, 10);
  init_run(f.config);
  CHECK(code_of([&] { init_run(f.config); }) == ErrorCode::collision);
  f.config.resume = true;
  CHECK_NOTHROW(init_run(f.config));

  Fixture g(100, Strategy::random, 10, 2, 10);
  std::filesystem::create_directories(g.config.workdir);
  testutil::write_text(g.config.workdir / "stray.txt", "x");
  CHECK(code_of([&] { init_run(g.config); }) == ErrorCode::collision);

  Fixture h(100, Strategy::random, 10, 2, 10);
  init_run(h.config);
  h.config.resume = true;
  h.config.seed = 99;
  CHECK(code_of([&] { init_run(h.config); }) == ErrorCode::config);
}

TEST_CASE("T=10, k=100, initial 100 grows the pool to 1100") {
  Fixture f(2000, Strategy::random, 100, 10, 100);
  auto train = std::make_shared<testutil::CountingTrain>();
  const auto result = run_evolution(f.config, {train, nullptr, nullptr});
  CHECK(result.state.pool_size() == 1100);
  CHECK(result.records.size() == 10);
  CHECK(train->calls == 10);
  for (std::size_t t = 0; t <= 10; ++t)
    CHECK(std::filesystem::exists(f.config.workdir / ("pool_" + std::to_string(t) + ".jsonl")));
  // Disjoint growth.
  std::set<RecordId> seen;
  for (const auto& batch : result.state.selected())
    for (auto id : batch) CHECK(seen.insert(id).second);
  for (const auto& r : result.records) {
    CHECK(r.selected_ids.size() == 100);
    CHECK(r.model_artifact == "model_" + std::to_string(r.t) + ".out");
  }
  const auto loaded = load_state(f.state_file());
  CHECK(loaded.state == result.state);
}

TEST_CASE("T=1, k=1, n=2 selects the remaining record") {
  Fixture f(2, Strategy::random, 1, 1, 1);
  const auto result = run_evolution(f.config);
  auto pool = result.state.pool();
  std::sort(pool.begin(), pool.end());
  CHECK(pool == std::vector<RecordId>{0, 1});
}

TEST_CASE("orthonormal embeddings make k-center take the lowest ids") {
  const std::size_t n = 8;
  Fixture f(n, Strategy::k_center, 2, 1, 1, 3);
  std::vector<std::vector<float>> rows(n, std::vector<float>(n, 0.0f));
  for (std::size_t i = 0; i < n; ++i) rows[i][i] = 1.0f;
  auto embed = std::make_shared<testutil::FixedEmbedder>(testutil::matrix_from(rows));
  Evolution evo(f.config, {nullptr, embed, nullptr});
  const auto p0 = evo.init().pool();
  const auto& rec = evo.step();
  auto cands = evo.state().pool_at(0);
  std::vector<RecordId> expected;
  for (RecordId id = 0; id < n && expected.size() < 2; ++id)
    if (std::find(p0.begin(), p0.end(), id) == p0.end()) expected.push_back(id);
  CHECK(rec.selected_ids == expected);

  std::vector<std::vector<double>> pts;
  for (const auto& r : rows) pts.emplace_back(r.begin(), r.end());
  CHECK(oracle::greedy_k_center(pts, p0, 2) == expected);
}

TEST_CASE("failing train hook leaves state.json unchanged") {
  Fixture f(100, Strategy::random, 10, 3, 10);
  f.config.train_hook = shell_hook("echo boom >&2; exit 3 # {POOL_FILE} {OUT_FILE}");
  Evolution evo(f.config);
  evo.init();
  const auto before = testutil::read_text(f.state_file());
  try {
    evo.step();
    FAIL("expected hook error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::hook);
    CHECK(e.error_class() == ErrorClass::hook);
    CHECK(std::string(e.what()).find("status 3") != std::string::npos);
    CHECK(std::string(e.what()).find("boom") != std::string::npos);
  }
  CHECK(testutil::read_text(f.state_file()) == before);
}

TEST_CASE("hook timeout kills the process group") {
  Fixture f(100, Strategy::random, 10, 3, 10);
  f.config.train_hook = shell_hook("sleep 20 & sleep 20; touch {OUT_FILE} # {POOL_FILE}", std::chrono::milliseconds(300));
  Evolution evo(f.config);
  evo.init();
  const auto before = testutil::read_text(f.state_file());
  const auto start = std::chrono::steady_clock::now();
  CHECK(code_of([&] { evo.step(); }) == ErrorCode::timeout);
  CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(5));
  CHECK(testutil::read_text(f.state_file()) == before);
}

TEST_CASE("hook that writes nothing is a hook error") {
  Fixture f(100, Strategy::random, 10, 3, 10);
  f.config.train_hook = shell_hook("true {POOL_FILE} {OUT_FILE}");
  Evolution evo(f.config);
  CHECK(code_of([&] { evo.step(); }) == ErrorCode::hook);
}

TEST_CASE("subprocess hooks see placeholders and the iteration variable") {
  Fixture f(30, Strategy::random, 5, 2, 5);
  f.config.train_hook =
      shell_hook("printf '%s %s ' \"$DIVERSEEVOL_ITER\" {ITER} > {OUT_FILE}; wc -l < {POOL_FILE} >> {OUT_FILE}");
  const auto result = run_evolution(f.config);
  CHECK(testutil::read_text(f.config.workdir / "model_0.out") == "0 0 5\n");
  CHECK(testutil::read_text(f.config.workdir / "model_1.out") == "1 1 10\n");
  CHECK(std::filesystem::exists(f.config.workdir / "model_1.out.log"));
  CHECK(result.records.size() == 2);
}

TEST_CASE("placeholder substitution quotes paths") {
  HookRequest req;
  req.pool_file = "/tmp/it's here.jsonl";
  req.out_file = "/tmp/out";
  req.iteration = 4;
  CHECK(substitute_placeholders("cat {POOL_FILE} > {OUT_FILE} {ITER} {UNKNOWN}", req) ==
        "cat '/tmp/it'\\''s here.jsonl' > '/tmp/out' 4 {UNKNOWN}");
}

TEST_CASE("embedding count mismatch is an alignment error") {
  Fixture f(20, Strategy::k_center, 2, 2, 2);
  auto embed = std::make_shared<testutil::FixedEmbedder>(testutil::random_matrix(19, 3, 1));
  Evolution evo(f.config, {nullptr, embed, nullptr});
  evo.init();
  const auto before = testutil::read_text(f.state_file());
  CHECK(code_of([&] { evo.step(); }) == ErrorCode::alignment);
  CHECK(testutil::read_text(f.state_file()) == before);
}

TEST_CASE("interrupted runs resume without repeating iterations") {
  Fixture f(500, Strategy::random, 20, 10, 20);
  auto train = std::make_shared<testutil::CountingTrain>();
  {
    Evolution evo(f.config, {train, nullptr, nullptr});
    evo.set_phase_observer([](std::size_t t, Phase p) {
      if (t == 5 && p == Phase::train) throw std::runtime_error("interrupted");
    });
    CHECK_THROWS_AS(evo.run(), std::runtime_error);
  }
  CHECK(train->calls == 5);
  f.config.resume = true;
  auto resumed = std::make_shared<testutil::CountingTrain>();
  const auto result = run_evolution(f.config, {resumed, nullptr, nullptr});
  CHECK(resumed->calls == 5);
  for (std::size_t t = 0; t < 5; ++t) CHECK(resumed->per_iteration.count(t) == 0);

  Fixture g(500, Strategy::random, 20, 10, 20);
  const auto straight = run_evolution(g.config, {std::make_shared<testutil::CountingTrain>(), nullptr, nullptr});
  CHECK(testutil::read_text(f.state_file()) == testutil::read_text(g.state_file()));
  CHECK(result.state == straight.state);
}

TEST_CASE("identical configs give byte-identical state") {
  auto once = [](Strategy s) {
    Fixture f(300, s, 10, 5, 10, 11);
    Hooks hooks;
    hooks.embed = std::make_shared<testutil::FixedEmbedder>(testutil::random_matrix(300, 5, 2));
    hooks.score = std::make_shared<testutil::HashScorer>();
    run_evolution(f.config, hooks);
    return testutil::read_text(f.state_file());
  };
  for (auto s : {Strategy::k_center, Strategy::random, Strategy::least_confidence, Strategy::margin})
    CHECK(once(s) == once(s));
}

TEST_CASE("uncertainty strategies score Q_t through the score hook") {
  Fixture f(80, Strategy::least_confidence, 5, 2, 10);
  auto scorer = std::make_shared<testutil::HashScorer>(3);
  Evolution evo(f.config, {nullptr, nullptr, scorer});
  evo.init();
  const PoolState before = evo.state();
  const auto& rec = evo.step();
  CHECK(scorer->calls == 1);
  const auto scores = load_token_scores(f.config.workdir / "scores_0.jsonl");
  CHECK(scores.size() == 70);
  CHECK(rec.selected_ids == select_least_confidence(scores, before, 5));
  CHECK(rec.embedding_file.empty());

  const auto lines = testutil::read_text(f.config.workdir / "candidates_0.jsonl");
  const auto first = nlohmann::json::parse(lines.substr(0, lines.find('\n')));
  CHECK(first["id"] == before.candidates().front());
  CHECK(first.contains("instruction"));
}

TEST_CASE("shortfall selects the rest and stops") {
  Fixture f(7, Strategy::random, 3, 1, 5);
  Evolution evo(f.config);
  const auto& rec = evo.step();
  CHECK(rec.shortfall);
  CHECK(rec.selected_ids.size() == 2);
  CHECK(evo.state().pool_size() == 7);
  CHECK(code_of([&] { evo.step(); }) == ErrorCode::budget);
}

TEST_CASE("T=1 iterative equals one-time at the same size") {
  const auto emb = testutil::random_matrix(400, 6, 5);
  Fixture a(400, Strategy::k_center, 50, 1, 20);
  Fixture b(400, Strategy::k_center, 50, 1, 20);
  const auto it = run_evolution(a.config, {nullptr, std::make_shared<testutil::FixedEmbedder>(emb), nullptr});
  const auto ot = run_one_time(b.config, 70, {nullptr, std::make_shared<testutil::FixedEmbedder>(emb), nullptr});
  CHECK(flatten(it.state) == flatten(ot.state));
}

TEST_CASE("one-time mode") {
  const auto emb = testutil::random_matrix(1200, 4, 9);
  Fixture f(1200, Strategy::k_center, 100, 10, 100);
  auto train = std::make_shared<testutil::CountingTrain>();
  auto embed = std::make_shared<testutil::FixedEmbedder>(emb);
  const auto r = run_one_time(f.config, 300, {train, embed, nullptr});
  REQUIRE(r.records.size() == 1);
  CHECK(r.records[0].selected_ids.size() == 200);
  CHECK(r.state.pool_size() == 300);
  CHECK(train->calls == 1);
  CHECK(embed->calls == 1);

  Fixture g(1200, Strategy::k_center, 100, 10, 100);
  const auto big = run_one_time(g.config, 1100, {nullptr, embed, nullptr});
  CHECK(big.records[0].selected_ids.size() == 1000);

  Fixture h(1200, Strategy::k_center, 100, 10, 100);
  const auto same = run_one_time(h.config, 100, {nullptr, embed, nullptr});
  CHECK(same.records.empty());
  CHECK(same.state.pool_size() == 100);

  Fixture bad(1200, Strategy::random, 100, 10, 100);
  CHECK(code_of([&] { run_one_time(bad.config, 300); }) == ErrorCode::config);
  Fixture big_target(1200, Strategy::k_center, 100, 10, 100);
  CHECK(code_of([&] { run_one_time(big_target.config, 1201, {nullptr, embed, nullptr}); }) == ErrorCode::config);
}

TEST_CASE("with_vendi records the diversity of P_{t+1}") {
  Fixture f(60, Strategy::random, 5, 2, 5);
  f.config.with_vendi = true;
  const auto emb = testutil::random_matrix(60, 4, 1);
  const auto r = run_evolution(f.config, {nullptr, std::make_shared<testutil::FixedEmbedder>(emb), nullptr});
  for (const auto& rec : r.records) {
    REQUIRE(rec.vendi_score.has_value());
    CHECK(*rec.vendi_score == doctest::Approx(pool_vendi(emb, r.state.pool_at(rec.t + 1))));
  }
}

TEST_CASE("run config JSON round trip and fingerprint") {
  RunConfig c;
  c.corpus_path = "c.jsonl";
  c.workdir = "w";
  c.strategy = {Strategy::margin, 7, Metric::cosine};
  c.iterations = 4;
  c.seed = 12345678901234ULL;
  c.score_hook = shell_hook("score {POOL_FILE} {OUT_FILE}", std::chrono::seconds(90));
  const auto back = run_config_from_json(run_config_to_json(c));
  CHECK(back.strategy.strategy == Strategy::margin);
  CHECK(back.strategy.k == 7);
  CHECK(back.strategy.distance == Metric::cosine);
  CHECK(back.seed == c.seed);
  CHECK(back.score_hook->timeout == std::chrono::seconds(90));
  CHECK(config_fingerprint(back) == config_fingerprint(c));

  RunConfig longer = c;
  longer.iterations = 40;
  CHECK(config_fingerprint(longer) == config_fingerprint(c));
  RunConfig other = c;
  other.strategy.k = 8;
  CHECK(config_fingerprint(other) != config_fingerprint(c));

  CHECK(code_of([] { run_config_from_json(nlohmann::json{{"strategy", "best"}}); }) == ErrorCode::config);
  CHECK(code_of([] { run_config_from_json(nlohmann::json{{"k", "ten"}}); }) == ErrorCode::config);
}

TEST_CASE("http embed hook stores the response body") {
  const auto emb = testutil::random_matrix(40, 3, 4);
  TempDir scratch;
  write_embeddings(scratch / "emb.bin", emb);
  const std::string payload = testutil::read_text(scratch / "emb.bin");

  httplib::Server server;
  std::atomic<int> hits{0};
  server.Post("/embed", [&](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    CHECK(body["role"] == "embed");
    CHECK(body.contains("corpus_file"));
    ++hits;
    res.set_content(payload, "application/octet-stream");
  });
  server.Post("/fail", [](const httplib::Request&, httplib::Response& res) {
    res.status = 500;
    res.set_content("model exploded", "text/plain");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  Fixture f(40, Strategy::k_center, 4, 2, 4);
  HookSpec spec;
  spec.kind = HookKind::http;
  spec.url = "http://127.0.0.1:" + std::to_string(port) + "/embed";
  spec.timeout = std::chrono::seconds(10);
  f.config.embed_hook = spec;
  const auto r = run_evolution(f.config);
  CHECK(hits == 2);
  CHECK(r.state.pool_size() == 12);

  Fixture g(40, Strategy::k_center, 4, 2, 4);
  spec.url = "http://127.0.0.1:" + std::to_string(port) + "/fail";
  g.config.embed_hook = spec;
  try {
    run_evolution(g.config);
    FAIL("expected hook error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::hook);
    CHECK(std::string(e.what()).find("model exploded") != std::string::npos);
  }
  server.stop();
  th.join();
}
