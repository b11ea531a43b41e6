// diverseevol: command-line front end for the selection pipeline.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "diverseevol/corpus.hpp"
#include "diverseevol/diversity.hpp"
#include "diverseevol/error.hpp"
#include "diverseevol/judge.hpp"
#include "diverseevol/orchestrator.hpp"
#include "diverseevol/selector.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace devol;

namespace {

constexpr int kExitConfig = static_cast<int>(ErrorClass::config);
constexpr int kExitData = static_cast<int>(ErrorClass::data);

/// Shortest form with at least one decimal: 3 -> "3.0", 1.754765 -> "1.754765".
std::string format_number(double v) {
  std::string s = fmt::format("{:.6f}", v);
  while (s.size() > 2 && s.back() == '0' && s[s.size() - 2] != '.') s.pop_back();
  return s;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::config, fmt::format("cannot open {}", path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, fmt::format("{}: {}", path.string(), e.what()));
  }
}

/// Flags shared by `run` and `init`; only flags given on the command line
/// (or through their environment variable) override the config file.
struct RunFlags {
  std::string config_file;
  std::string corpus, workdir, strategy, distance, mode;
  std::size_t k = 0, T = 0, initial = 0, target = 0, threads = 0;
  std::uint64_t seed = 0;
  std::string train_hook, embed_hook, score_hook;
  double hook_timeout_s = 0;
  bool with_vendi = false, resume = false;

  std::map<std::string, CLI::Option*> opts;

  void attach(CLI::App& app) {
    opts["config"] = app.add_option("--config", config_file, "JSON run config; flags override its values");
    opts["corpus"] = app.add_option("--corpus", corpus, "Corpus JSONL");
    opts["workdir"] = app.add_option("--workdir", workdir, "Artifact directory");
    opts["strategy"] = app.add_option("--strategy", strategy, "k_center | random | least_confidence | margin");
    opts["k"] = app.add_option("--k", k, "Per-step budget");
    opts["distance"] = app.add_option("--distance", distance, "euclidean | cosine");
    opts["T"] = app.add_option("--T", T, "Iterations");
    opts["initial"] = app.add_option("--initial-pool-size", initial, "|P_0|");
    opts["seed"] = app.add_option("--seed", seed, "Seed for every random choice");
    opts["mode"] = app.add_option("--mode", mode, "iterative | one_time");
    opts["target"] = app.add_option("--target-size", target, "Final pool size in one-time mode");
    opts["threads"] = app.add_option("--threads", threads, "Selection threads (0 = all cores)");
    opts["train"] = app.add_option("--train-hook", train_hook, "Train command template or http(s) URL");
    opts["embed"] = app.add_option("--embed-hook", embed_hook, "Embed command template or http(s) URL");
    opts["score"] = app.add_option("--score-hook", score_hook, "Score command template or http(s) URL");
    opts["timeout"] = app.add_option("--hook-timeout", hook_timeout_s, "Per-hook timeout in seconds")
                          ->envname("DIVERSEEVOL_HOOK_TIMEOUT")
                          ->check(CLI::PositiveNumber);
    opts["vendi"] = app.add_flag("--with-vendi", with_vendi, "Record the Vendi Score after every step");
    opts["resume"] = app.add_flag("--resume", resume, "Continue the run stored in the workdir");
  }

  bool given(const std::string& name) const { return opts.at(name)->count() > 0; }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_file.empty()) c = run_config_from_json(read_json_file(config_file));
    if (given("corpus")) c.corpus_path = corpus;
    if (given("workdir")) c.workdir = workdir;
    if (given("strategy")) c.strategy.strategy = parse_strategy(strategy);
    if (given("k")) c.strategy.k = k;
    if (given("distance")) c.strategy.distance = parse_metric(distance);
    if (given("T")) c.iterations = T;
    if (given("initial")) c.initial_pool_size = initial;
    if (given("seed")) c.seed = seed;
    if (given("mode")) c.mode = parse_run_mode(mode);
    if (given("target")) c.target_size = target;
    if (given("threads")) c.threads = threads;
    if (given("vendi")) c.with_vendi = with_vendi;
    c.resume = resume;
    auto hook = [](const std::string& value) {
      HookSpec spec;
      if (value.starts_with("http://") || value.starts_with("https://")) {
        spec.kind = HookKind::http;
        spec.url = value;
      } else {
        spec.command = value;
      }
      return spec;
    };
    if (given("train")) c.train_hook = hook(train_hook);
    if (given("embed")) c.embed_hook = hook(embed_hook);
    if (given("score")) c.score_hook = hook(score_hook);
    if (given("timeout")) {
      const auto ms = std::chrono::milliseconds(static_cast<long long>(hook_timeout_s * 1000.0));
      for (auto* h : {&c.train_hook, &c.embed_hook, &c.score_hook})
        if (*h) (*h)->timeout = ms;
    }
    if (c.corpus_path.empty()) throw Error(ErrorCode::config, "no corpus given (--corpus or config corpus_path)");
    return c;
  }
};

void echo_config(const RunConfig& c) {
  std::cerr << "effective config: " << run_config_to_json(c).dump() << "\n"
            << "config fingerprint: " << config_fingerprint(c) << "\n";
}

void print_record(const IterationRecord& r, std::size_t pool_size) {
  std::string line = fmt::format("t={} pool={} selected={} select_s={:.3f}", r.t, pool_size,
                                 r.selected_ids.size(), r.wall_time.select_s);
  if (r.vendi_score) line += fmt::format(" vendi={}", format_number(*r.vendi_score));
  if (r.shortfall) line += " shortfall";
  std::cout << line << std::endl;
}

int cmd_run(const RunFlags& flags) {
  const RunConfig config = flags.resolve();
  echo_config(config);
  Evolution evo(config);
  if (config.mode == RunMode::one_time) {
    validate_run_config(config, evo.corpus().size(), true);
    const auto result = evo.run_one_time(config.target_size);
    for (const auto& r : result.records) print_record(r, result.state.pool_size());
    std::cout << fmt::format("final pool {}", result.state.pool_size()) << std::endl;
    return 0;
  }
  // Print each step as it commits: the observer fires on the next step's
  // first phase, and after the loop for the last one.
  std::size_t printed = 0;
  auto flush = [&] {
    const auto& records = evo.records();
    for (; printed < records.size(); ++printed)
      print_record(records[printed], evo.state().pool_at(records[printed].t + 1).size());
  };
  evo.set_phase_observer([&](std::size_t, Phase phase) {
    if (phase == Phase::export_pool) flush();
  });
  const auto result = evo.run();
  flush();
  std::cout << fmt::format("final pool {}", result.state.pool_size()) << std::endl;
  return 0;
}

int cmd_init(const RunFlags& flags) {
  const RunConfig config = flags.resolve();
  echo_config(config);
  const auto state = init_run(config);
  std::cout << fmt::format("initial pool {} of {}", state.pool_size(), state.corpus_size()) << std::endl;
  return 0;
}

struct SelectFlags {
  std::string state, embeddings, scores, out, strategy = "k_center", distance = "euclidean";
  std::size_t k = 100, threads = 0;
  std::optional<std::uint64_t> seed;
  bool commit = false;
};

int cmd_select(const SelectFlags& f) {
  const auto loaded = load_state(f.state);
  const PoolState& state = loaded.state;
  const Strategy strategy = parse_strategy(f.strategy);
  const Metric metric = parse_metric(f.distance);
  std::vector<RecordId> ids;
  std::string embedding_file;
  switch (strategy) {
    case Strategy::k_center: {
      if (f.embeddings.empty()) throw Error(ErrorCode::config, "k_center needs --embeddings");
      const auto emb = load_embeddings(f.embeddings, state.corpus_size());
      ids = select_k_center(emb, state, f.k, metric, f.threads).ids;
      embedding_file = fs::absolute(f.embeddings).string();
      break;
    }
    case Strategy::random:
      ids = select_random(state, f.k, f.seed.value_or(state.seed()));
      break;
    case Strategy::least_confidence:
    case Strategy::margin: {
      if (f.scores.empty()) throw Error(ErrorCode::config, "uncertainty strategies need --scores");
      const auto scores = load_token_scores(f.scores);
      ids = strategy == Strategy::margin ? select_margin(scores, state, f.k)
                                         : select_least_confidence(scores, state, f.k);
      break;
    }
  }

  std::string text;
  for (auto id : ids) text += std::to_string(id) + "\n";
  if (f.out.empty()) {
    std::cout << text << std::flush;
  } else {
    std::ofstream out(f.out, std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", f.out));
    out << text;
  }

  if (f.commit) {
    PoolState next = state;
    next.commit(ids);
    auto records = loaded.records;
    IterationRecord r;
    r.t = state.iteration();
    r.selected_ids = ids;
    r.embedding_file = embedding_file;
    records.push_back(std::move(r));
    const RunMode mode = parse_run_mode(read_json_file(f.state).value("mode", "iterative"));
    atomic_write(f.state, serialize_state(next, records, mode));
    std::cerr << fmt::format("committed step {} to {}", state.iteration(), f.state) << "\n";
  }
  return 0;
}

/// Ids of a pool given either as integers (one per line or a JSON array),
/// JSONL objects with an "id" field, or a verbatim pool export matched
/// against `corpus`.
std::vector<RecordId> read_pool_ids(const fs::path& path, const Corpus* corpus) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, fmt::format("cannot open {}", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    const json whole = json::parse(text);
    if (whole.is_array()) return whole.get<std::vector<RecordId>>();
  } catch (const json::exception&) {
  }

  std::multimap<std::string, RecordId> by_line;
  if (corpus)
    for (const auto& rec : corpus->records) by_line.emplace(rec.raw, rec.id);
  std::vector<RecordId> ids;
  std::istringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (j.is_number_unsigned()) {
        ids.push_back(j.get<RecordId>());
        continue;
      }
      if (j.is_object() && j.contains("id")) {
        ids.push_back(j["id"].get<RecordId>());
        continue;
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::parse, fmt::format("{} line {}: {}", path.string(), lineno, e.what()));
    }
    const auto it = by_line.find(line);
    if (it == by_line.end())
      throw Error(ErrorCode::schema,
                  fmt::format("{} line {}: not an id and not a corpus record (pass --corpus for pool exports)",
                              path.string(), lineno));
    ids.push_back(it->second);
    by_line.erase(it);
  }
  return ids;
}

struct VendiFlags {
  std::vector<std::string> pools, embeddings;
  std::string state, corpus;
};

int cmd_vendi(const VendiFlags& f) {
  std::vector<EmbeddingMatrix> embs;
  std::vector<std::vector<RecordId>> pools;
  if (!f.state.empty()) {
    const fs::path state_path = f.state;
    const auto loaded = load_state(state_path);
    if (f.embeddings.size() > 1) throw Error(ErrorCode::config, "--state takes at most one --embeddings");
    if (f.embeddings.size() == 1) {
      // One fixed embedding space for every recorded pool P_0..P_T.
      const auto emb = load_embeddings(f.embeddings[0], loaded.state.corpus_size());
      for (std::size_t t = 0; t <= loaded.state.iteration(); ++t) {
        embs.push_back(emb);
        pools.push_back(loaded.state.pool_at(t));
      }
    } else {
      // Each P_{t+1} in the space of the step that built it.
      for (const auto& r : loaded.records) {
        if (r.embedding_file.empty())
          throw Error(ErrorCode::config, fmt::format("step {} stored no embeddings; pass --embeddings", r.t));
        embs.push_back(load_embeddings(state_path.parent_path() / r.embedding_file, loaded.state.corpus_size()));
        pools.push_back(loaded.state.pool_at(r.t + 1));
      }
    }
  } else {
    if (f.pools.empty()) throw Error(ErrorCode::config, "give --pool/--embeddings pairs or --state");
    if (f.embeddings.size() != 1 && f.embeddings.size() != f.pools.size())
      throw Error(ErrorCode::config, "give one --embeddings, or one per --pool");
    std::optional<Corpus> corpus;
    if (!f.corpus.empty()) corpus = load_corpus(f.corpus);
    for (std::size_t i = 0; i < f.pools.size(); ++i) {
      const auto& emb_path = f.embeddings[f.embeddings.size() == 1 ? 0 : i];
      embs.push_back(corpus ? load_embeddings(emb_path, corpus->size()) : load_embeddings(emb_path));
      pools.push_back(read_pool_ids(f.pools[i], corpus ? &*corpus : nullptr));
    }
  }
  for (const auto& point : pool_vendi_trajectory(embs, pools))
    std::cout << point.data_size << "," << format_number(point.score) << "\n";
  std::cout << std::flush;
  return 0;
}

struct EvalFlags {
  std::string answers, verdicts, endpoint, judge_model = "gpt-4-0613", token_env = "DIVERSEEVOL_JUDGE_TOKEN";
  std::string report, csv, prompts_out, verdicts_out;
  bool mock = false;
  std::size_t max_in_flight = 4;
  double timeout_s = 120;
};

int cmd_eval(const EvalFlags& f) {
  std::vector<JudgeVerdict> verdicts;
  std::size_t excluded = 0;
  std::vector<AnswerPair> pairs;
  if (!f.answers.empty()) pairs = load_answer_pairs(f.answers);

  if (!f.prompts_out.empty()) {
    if (pairs.empty()) throw Error(ErrorCode::config, "--emit-prompts needs --answers");
    std::ofstream out(f.prompts_out, std::ios::trunc);
    for (const auto& p : emit_judge_prompts(pairs))
      out << json{{"question_id", p.question_id}, {"ordering", to_string(p.ordering)}, {"prompt", p.text}}.dump()
          << "\n";
  }

  const int sources = !f.verdicts.empty() + f.mock + !f.endpoint.empty();
  if (sources != 1)
    throw Error(ErrorCode::config, "choose exactly one of --verdicts, --mock-judge, --judge-endpoint");
  if (!f.verdicts.empty()) {
    verdicts = load_verdicts(f.verdicts);
  } else {
    if (f.answers.empty()) throw Error(ErrorCode::config, "judging needs --answers");
    std::unique_ptr<JudgeClient> client;
    if (f.mock) {
      client = std::make_unique<MockJudge>();
    } else {
      HttpJudgeConfig cfg;
      cfg.endpoint = f.endpoint;
      cfg.model = f.judge_model;
      cfg.token_env = f.token_env;
      cfg.timeout = std::chrono::seconds(static_cast<long long>(f.timeout_s));
      client = std::make_unique<HttpJudge>(cfg);
    }
    auto run = collect_verdicts(*client, pairs, f.max_in_flight);
    verdicts = std::move(run.verdicts);
    excluded = run.excluded.size();
    if (!f.verdicts_out.empty()) write_verdicts(f.verdicts_out, verdicts);
  }

  const auto report = make_report(aggregate_scores(verdicts), excluded);
  if (!f.report.empty()) write_report_json(f.report, report);
  if (!f.csv.empty()) write_report_csv(f.csv, report);
  std::cout << "RS " << format_number(report.rs) << "\n"
            << "WTR " << format_number(report.wtr) << "\n"
            << "questions " << report.n_questions << "\n"
            << "excluded " << report.excluded << std::endl;
  return 0;
}

int cmd_report(const std::string& workdir) {
  const fs::path dir = workdir;
  const auto loaded = load_state(dir / "state.json");
  std::map<std::size_t, json> timings;
  if (std::ifstream in(dir / "timings.jsonl"); in) {
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) {
        const json j = json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.contains("t")) timings[j["t"].get<std::size_t>()] = j;
      }
  }
  std::cout << "t,pool_size,selected,train_s,embed_s,score_s,select_s,vendi\n";
  for (const auto& r : loaded.records) {
    const json tm = timings.count(r.t) ? timings[r.t] : json::object();
    auto secs = [&](const char* key) { return tm.contains(key) ? format_number(tm[key].get<double>()) : ""; };
    std::cout << fmt::format("{},{},{},{},{},{},{},{}\n", r.t, loaded.state.pool_at(r.t + 1).size(),
                             r.selected_ids.size(), secs("train_s"), secs("embed_s"), secs("score_s"),
                             secs("select_s"), r.vendi_score ? format_number(*r.vendi_score) : "");
  }
  std::cout << std::flush;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("diverseevol"));

  CLI::App app{"Iterative diversity-driven selection of instruction-tuning data"};
  app.require_subcommand(1);

  RunFlags run_flags, init_flags;
  auto* run = app.add_subcommand("run", "Run the selection loop (or one-time selection)");
  run_flags.attach(*run);
  auto* init = app.add_subcommand("init", "Create P_0 and state.json without running hooks");
  init_flags.attach(*init);

  SelectFlags select_flags;
  auto* select = app.add_subcommand("select", "One selection step from a state file, without hooks");
  select->add_option("--state", select_flags.state, "state.json")->required();
  select->add_option("--embeddings", select_flags.embeddings, "Embeddings of the whole corpus (EMB1 or JSONL)");
  select->add_option("--scores", select_flags.scores, "Token scores JSONL for uncertainty strategies");
  select->add_option("--strategy", select_flags.strategy, "k_center | random | least_confidence | margin");
  select->add_option("--distance", select_flags.distance, "euclidean | cosine");
  select->add_option("--k", select_flags.k, "Budget");
  select->add_option("--seed", select_flags.seed, "Seed for random selection (default: the state's)");
  select->add_option("--threads", select_flags.threads, "Selection threads (0 = all cores)");
  select->add_option("--out", select_flags.out, "Write ids here instead of stdout");
  select->add_flag("--commit", select_flags.commit, "Append the selection to the state file");

  VendiFlags vendi_flags;
  auto* vendi = app.add_subcommand("vendi", "Vendi Score of pools as CSV rows data_size,score");
  vendi->add_option("--pool", vendi_flags.pools, "Pool ids or pool export (repeatable)");
  vendi->add_option("--embeddings", vendi_flags.embeddings, "Embeddings (one, or one per --pool)");
  vendi->add_option("--corpus", vendi_flags.corpus, "Corpus, to resolve pool exports to ids");
  vendi->add_option("--state", vendi_flags.state, "Score every pool recorded in a state file");

  EvalFlags eval_flags;
  auto* eval = app.add_subcommand("eval", "Relative Score and Win-And-Tie Rate from judge verdicts");
  eval->add_option("--answers", eval_flags.answers, "Answers JSONL");
  eval->add_option("--verdicts", eval_flags.verdicts, "Verdicts JSONL (skips judging)");
  eval->add_flag("--mock-judge", eval_flags.mock, "Use the deterministic length-based judge");
  eval->add_option("--judge-endpoint", eval_flags.endpoint, "Chat-completion URL");
  eval->add_option("--judge-model", eval_flags.judge_model, "Judge model name");
  eval->add_option("--token-env", eval_flags.token_env, "Environment variable holding the bearer token");
  eval->add_option("--judge-timeout", eval_flags.timeout_s, "Per-request timeout in seconds");
  eval->add_option("--max-in-flight", eval_flags.max_in_flight, "Concurrent judge requests")
      ->check(CLI::PositiveNumber);
  eval->add_option("--report", eval_flags.report, "Report JSON output");
  eval->add_option("--csv", eval_flags.csv, "Per-question averages CSV output");
  eval->add_option("--emit-prompts", eval_flags.prompts_out, "Write judge prompts JSONL");
  eval->add_option("--save-verdicts", eval_flags.verdicts_out, "Write collected verdicts JSONL");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Per-iteration summary CSV of a workdir");
  report->add_option("--workdir", report_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_flags);
    if (*init) return cmd_init(init_flags);
    if (*select) return cmd_select(select_flags);
    if (*vendi) return cmd_vendi(vendi_flags);
    if (*eval) return cmd_eval(eval_flags);
    if (*report) return cmd_report(report_dir);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return static_cast<int>(e.error_class());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
