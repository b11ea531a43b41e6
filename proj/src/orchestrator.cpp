#include "diverseevol/orchestrator.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "diverseevol/diversity.hpp"
#include "diverseevol/error.hpp"

namespace devol {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kStateVersion = 1;
constexpr const char* kStateFile = "state.json";

std::string artifact(std::string_view stem, std::size_t t, std::string_view ext) {
  return fmt::format("{}_{}.{}", stem, t, ext);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

json hook_to_json(const HookSpec& spec) {
  json j = {{"kind", spec.kind == HookKind::http ? "http" : "subprocess"},
            {"timeout_s", std::chrono::duration<double>(spec.timeout).count()}};
  if (spec.kind == HookKind::http)
    j["url"] = spec.url;
  else
    j["command"] = spec.command;
  return j;
}

HookSpec hook_from_json(const json& j) {
  HookSpec spec;
  const std::string kind = j.value("kind", "subprocess");
  if (kind == "http") {
    spec.kind = HookKind::http;
    spec.url = j.value("url", "");
  } else if (kind == "subprocess") {
    spec.command = j.value("command", "");
  } else {
    throw Error(ErrorCode::config, fmt::format("unknown hook kind '{}'", kind));
  }
  if (j.contains("timeout_s"))
    spec.timeout = std::chrono::milliseconds(static_cast<long long>(j["timeout_s"].get<double>() * 1000.0));
  return spec;
}

void fsync_path(const fs::path& path, int flags) {
  const int fd = ::open(path.c_str(), flags);
  if (fd < 0) return;
  ::fsync(fd);
  ::close(fd);
}

json record_to_json(const IterationRecord& r) {
  json j = {{"t", r.t},
            {"selected_ids", r.selected_ids},
            {"model_artifact", r.model_artifact},
            {"embedding_file", r.embedding_file},
            {"shortfall", r.shortfall}};
  if (r.vendi_score) j["vendi_score"] = *r.vendi_score;
  return j;
}

IterationRecord record_from_json(const json& j) {
  IterationRecord r;
  r.t = j.at("t").get<std::size_t>();
  r.selected_ids = j.at("selected_ids").get<std::vector<RecordId>>();
  r.model_artifact = j.value("model_artifact", "");
  r.embedding_file = j.value("embedding_file", "");
  r.shortfall = j.value("shortfall", false);
  if (j.contains("vendi_score")) r.vendi_score = j["vendi_score"].get<double>();
  return r;
}

void write_candidate_export(const fs::path& path, const Corpus& corpus, std::span<const RecordId> ids) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", path.string()));
  for (RecordId id : ids) {
    json obj = json::parse(corpus[id].raw);
    obj["id"] = id;
    out << obj.dump() << '\n';
  }
}

bool workdir_is_fresh(const fs::path& dir) {
  if (!fs::exists(dir)) return true;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().filename() != fmt::format("{}.tmp", kStateFile)) return false;
  return true;
}

}  // namespace

std::string_view to_string(RunMode mode) noexcept {
  return mode == RunMode::iterative ? "iterative" : "one_time";
}

RunMode parse_run_mode(std::string_view name) {
  if (name == "iterative") return RunMode::iterative;
  if (name == "one_time" || name == "one-time") return RunMode::one_time;
  throw Error(ErrorCode::config, fmt::format("unknown mode '{}'", name));
}

std::string_view to_string(Phase phase) noexcept {
  switch (phase) {
    case Phase::init: return "init";
    case Phase::export_pool: return "export_pool";
    case Phase::train: return "train";
    case Phase::embed: return "embed";
    case Phase::score: return "score";
    case Phase::select: return "select";
    case Phase::commit: return "commit";
  }
  return "?";
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  if (!j.is_object()) throw Error(ErrorCode::config, "run config must be a JSON object");
  try {
    if (j.contains("corpus_path")) c.corpus_path = j["corpus_path"].get<std::string>();
    if (j.contains("workdir")) c.workdir = j["workdir"].get<std::string>();
    if (j.contains("strategy")) c.strategy.strategy = parse_strategy(j["strategy"].get<std::string>());
    if (j.contains("k")) c.strategy.k = j["k"].get<std::size_t>();
    if (j.contains("distance")) c.strategy.distance = parse_metric(j["distance"].get<std::string>());
    if (j.contains("T")) c.iterations = j["T"].get<std::size_t>();
    if (j.contains("initial_pool_size")) c.initial_pool_size = j["initial_pool_size"].get<std::size_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("mode")) c.mode = parse_run_mode(j["mode"].get<std::string>());
    if (j.contains("target_size")) c.target_size = j["target_size"].get<std::size_t>();
    if (j.contains("with_vendi")) c.with_vendi = j["with_vendi"].get<bool>();
    if (j.contains("threads")) c.threads = j["threads"].get<std::size_t>();
    if (j.contains("hooks")) {
      const auto& h = j["hooks"];
      if (h.contains("train")) c.train_hook = hook_from_json(h["train"]);
      if (h.contains("embed")) c.embed_hook = hook_from_json(h["embed"]);
      if (h.contains("score")) c.score_hook = hook_from_json(h["score"]);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::config, fmt::format("invalid run config: {}", e.what()));
  }
  return c;
}

json run_config_to_json(const RunConfig& c) {
  json j = {{"corpus_path", c.corpus_path.string()},
            {"workdir", c.workdir.string()},
            {"strategy", to_string(c.strategy.strategy)},
            {"k", c.strategy.k},
            {"distance", to_string(c.strategy.distance)},
            {"T", c.iterations},
            {"initial_pool_size", c.initial_pool_size},
            {"seed", c.seed},
            {"mode", to_string(c.mode)},
            {"with_vendi", c.with_vendi}};
  if (c.mode == RunMode::one_time) j["target_size"] = c.target_size;
  json hooks = json::object();
  if (c.train_hook) hooks["train"] = hook_to_json(*c.train_hook);
  if (c.embed_hook) hooks["embed"] = hook_to_json(*c.embed_hook);
  if (c.score_hook) hooks["score"] = hook_to_json(*c.score_hook);
  j["hooks"] = hooks;
  return j;
}

std::string config_fingerprint(const RunConfig& c) {
  json j = {{"strategy", to_string(c.strategy.strategy)},
            {"k", c.strategy.k},
            {"distance", to_string(c.strategy.distance)},
            {"tie_rule", "lowest_id"},
            {"initial_pool_size", c.initial_pool_size},
            {"seed", c.seed},
            {"mode", to_string(c.mode)}};
  if (c.mode == RunMode::one_time) j["target_size"] = c.target_size;
  return fmt::format("{:016x}", fnv1a64(j.dump()));
}

void validate_run_config(const RunConfig& c, std::size_t n, bool full_budget) {
  if (c.strategy.k < 1) throw Error(ErrorCode::config, "k must be at least 1");
  if (c.initial_pool_size < 1) throw Error(ErrorCode::config, "initial_pool_size must be at least 1");
  if (c.initial_pool_size > n)
    throw Error(ErrorCode::config,
                fmt::format("initial_pool_size {} exceeds corpus size {}", c.initial_pool_size, n));
  if (c.mode == RunMode::iterative) {
    if (c.iterations < 1) throw Error(ErrorCode::config, "T must be at least 1");
    if (full_budget && c.initial_pool_size + c.iterations * c.strategy.k > n)
      throw Error(ErrorCode::config,
                  fmt::format("initial_pool_size + T*k = {} exceeds corpus size {}",
                              c.initial_pool_size + c.iterations * c.strategy.k, n));
  } else {
    if (c.strategy.strategy != Strategy::k_center)
      throw Error(ErrorCode::config, "one-time mode runs K-Center selection only");
    if (c.target_size < c.initial_pool_size || c.target_size > n)
      throw Error(ErrorCode::config,
                  fmt::format("target size {} must lie in [{}, {}]", c.target_size, c.initial_pool_size, n));
  }
  if (c.workdir.empty()) throw Error(ErrorCode::config, "workdir is required");
}

void atomic_write(const fs::path& path, std::string_view contents) {
  const fs::path tmp = fs::path(path).concat(".tmp");
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw Error(ErrorCode::io, fmt::format("cannot write {}: {}", tmp.string(), std::strerror(errno)));
  std::size_t written = 0;
  while (written < contents.size()) {
    const ssize_t r = ::write(fd, contents.data() + written, contents.size() - written);
    if (r < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      throw Error(ErrorCode::io, fmt::format("write {}: {}", tmp.string(), std::strerror(errno)));
    }
    written += static_cast<std::size_t>(r);
  }
  ::fsync(fd);
  ::close(fd);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::io, fmt::format("rename {}: {}", path.string(), ec.message()));
  fsync_path(path.has_parent_path() ? path.parent_path() : fs::path("."), O_RDONLY | O_DIRECTORY);
}

std::string serialize_state(const PoolState& state, const std::vector<IterationRecord>& records,
                            RunMode mode) {
  json iterations = json::array();
  for (const auto& r : records) iterations.push_back(record_to_json(r));
  const json j = {{"version", kStateVersion},
                  {"config_fingerprint", state.config_fingerprint()},
                  {"seed", state.seed()},
                  {"corpus_size", state.corpus_size()},
                  {"mode", to_string(mode)},
                  {"iterations", iterations},
                  {"selected", state.selected()}};
  return j.dump(2) + "\n";
}

EvolutionResult load_state(const fs::path& state_file) {
  std::ifstream in(state_file);
  if (!in) throw Error(ErrorCode::io, fmt::format("cannot open {}", state_file.string()));
  try {
    const json j = json::parse(in);
    if (j.at("version").get<int>() != kStateVersion)
      throw Error(ErrorCode::schema, fmt::format("{}: unsupported state version", state_file.string()));
    PoolState state(j.at("corpus_size").get<std::size_t>(),
                    j.at("selected").get<std::vector<std::vector<RecordId>>>(),
                    j.at("seed").get<std::uint64_t>(), j.at("config_fingerprint").get<std::string>());
    std::vector<IterationRecord> records;
    for (const auto& r : j.at("iterations")) records.push_back(record_from_json(r));
    if (records.size() != state.iteration())
      throw Error(ErrorCode::schema, fmt::format("{}: {} iteration records for {} selection steps",
                                                 state_file.string(), records.size(), state.iteration()));
    return {std::move(state), std::move(records)};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse, fmt::format("{}: {}", state_file.string(), e.what()));
  }
}

Evolution::Evolution(RunConfig config, Hooks hooks)
    : config_(std::move(config)), hooks_(std::move(hooks)), fingerprint_(config_fingerprint(config_)) {
  corpus_ = load_corpus(config_.corpus_path);
  if (!hooks_.train && config_.train_hook) hooks_.train = make_hook(*config_.train_hook, HookRole::train);
  if (!hooks_.embed && config_.embed_hook) hooks_.embed = make_hook(*config_.embed_hook, HookRole::embed);
  if (!hooks_.score && config_.score_hook) hooks_.score = make_hook(*config_.score_hook, HookRole::score);

  const auto s = config_.strategy.strategy;
  if ((s == Strategy::k_center || config_.with_vendi) && !hooks_.embed)
    throw Error(ErrorCode::config, "this configuration needs an embed hook");
  if ((s == Strategy::least_confidence || s == Strategy::margin) && !hooks_.score)
    throw Error(ErrorCode::config, fmt::format("strategy {} needs a score hook", to_string(s)));
}

const PoolState& Evolution::state() const {
  if (!state_) throw Error(ErrorCode::precondition, "run not initialized");
  return *state_;
}

HookRunner* Evolution::hook(HookRole role) const {
  switch (role) {
    case HookRole::train: return hooks_.train.get();
    case HookRole::embed: return hooks_.embed.get();
    case HookRole::score: return hooks_.score.get();
  }
  return nullptr;
}

void Evolution::notify(std::size_t t, Phase phase) const {
  if (observer_) observer_(t, phase);
}

void Evolution::persist() const {
  atomic_write(config_.workdir / kStateFile, serialize_state(*state_, records_, config_.mode));
}

bool Evolution::load_existing() {
  const fs::path state_file = config_.workdir / kStateFile;
  if (!fs::exists(state_file)) return false;
  if (!config_.resume)
    throw Error(ErrorCode::collision,
                fmt::format("{} already holds a run; pass --resume to continue it", config_.workdir.string()));
  auto loaded = load_state(state_file);
  if (loaded.state.config_fingerprint() != fingerprint_)
    throw Error(ErrorCode::config,
                fmt::format("{} was created with a different configuration (fingerprint {} vs {})",
                            state_file.string(), loaded.state.config_fingerprint(), fingerprint_));
  if (loaded.state.corpus_size() != corpus_.size())
    throw Error(ErrorCode::alignment, fmt::format("{} records a corpus of {}, found {}", state_file.string(),
                                                  loaded.state.corpus_size(), corpus_.size()));
  state_ = std::move(loaded.state);
  records_ = std::move(loaded.records);
  return true;
}

const PoolState& Evolution::init() {
  if (state_) return *state_;
  validate_run_config(config_, corpus_.size(), false);
  if (load_existing()) return *state_;
  if (!workdir_is_fresh(config_.workdir))
    throw Error(ErrorCode::collision,
                fmt::format("workdir {} is not empty and holds no state.json", config_.workdir.string()));
  fs::create_directories(config_.workdir);

  notify(0, Phase::init);
  auto initial = sample_initial_pool(corpus_.size(), config_.initial_pool_size, config_.seed);
  PoolState fresh(corpus_.size(), {std::move(initial)}, config_.seed, fingerprint_);
  state_ = std::move(fresh);
  persist();
  write_pool_export(config_.workdir / artifact("pool", 0, "jsonl"), corpus_, state_->pool());
  return *state_;
}

bool Evolution::exhausted() const {
  return state().pool_size() == corpus_.size() || (!records_.empty() && records_.back().shortfall);
}

const IterationRecord& Evolution::step(std::optional<std::size_t> budget) {
  init();
  const PoolState& current = *state_;
  const std::size_t t = current.iteration();
  const std::size_t n = corpus_.size();
  const std::size_t k = budget.value_or(config_.strategy.k);
  const std::size_t available = n - current.pool_size();
  if (k == 0) throw Error(ErrorCode::budget, "selection budget k must be at least 1");
  if (available == 0) throw Error(ErrorCode::budget, fmt::format("step {}: no candidates left", t));
  const std::size_t take = std::min(k, available);

  const fs::path& wd = config_.workdir;
  const auto pool = current.pool();
  IterationRecord record;
  record.t = t;
  record.shortfall = take < k;
  if (record.shortfall)
    spdlog::warn("step {}: only {} candidates left for a budget of {}; selecting all and stopping", t,
                 available, k);

  notify(t, Phase::export_pool);
  const fs::path pool_file = wd / artifact("pool", t, "jsonl");
  write_pool_export(pool_file, corpus_, pool);

  HookRequest base;
  base.iteration = t;
  base.pool_file = pool_file;
  base.corpus_file = config_.corpus_path;
  base.ids = pool;

  notify(t, Phase::train);
  if (auto* train = hook(HookRole::train)) {
    const auto start = std::chrono::steady_clock::now();
    HookRequest req = base;
    req.role = HookRole::train;
    req.out_file = wd / artifact("model", t, "out");
    train->run(req);
    record.model_artifact = req.out_file.filename().string();
    record.wall_time.train_s = seconds_since(start);
  }
  const fs::path model_file = record.model_artifact.empty() ? fs::path() : wd / record.model_artifact;

  const Strategy strategy = config_.strategy.strategy;
  if (strategy == Strategy::k_center || config_.with_vendi) {
    notify(t, Phase::embed);
    const auto start = std::chrono::steady_clock::now();
    HookRequest req = base;
    req.role = HookRole::embed;
    req.model_file = model_file;
    req.out_file = wd / artifact("emb", t, "bin");
    hook(HookRole::embed)->run(req);
    last_embeddings_ = load_embeddings(req.out_file, n);
    record.embedding_file = req.out_file.filename().string();
    record.wall_time.embed_s = seconds_since(start);
  }

  TokenScores scores;
  if (strategy == Strategy::least_confidence || strategy == Strategy::margin) {
    notify(t, Phase::score);
    const auto start = std::chrono::steady_clock::now();
    const auto candidates = current.candidates();
    HookRequest req = base;
    req.role = HookRole::score;
    req.pool_file = wd / artifact("candidates", t, "jsonl");
    req.model_file = model_file;
    req.out_file = wd / artifact("scores", t, "jsonl");
    req.ids = candidates;
    write_candidate_export(req.pool_file, corpus_, candidates);
    hook(HookRole::score)->run(req);
    scores = load_token_scores(req.out_file);
    record.wall_time.score_s = seconds_since(start);
  }

  notify(t, Phase::select);
  const auto select_start = std::chrono::steady_clock::now();
  switch (strategy) {
    case Strategy::k_center:
      record.selected_ids =
          select_k_center(*last_embeddings_, current, take, config_.strategy.distance, config_.threads).ids;
      break;
    case Strategy::random:
      record.selected_ids = select_random(current, take, config_.seed);
      break;
    case Strategy::least_confidence:
      record.selected_ids = select_least_confidence(scores, current, take);
      break;
    case Strategy::margin:
      record.selected_ids = select_margin(scores, current, take);
      break;
  }
  record.wall_time.select_s = seconds_since(select_start);

  if (config_.with_vendi) {
    auto grown = pool;
    grown.insert(grown.end(), record.selected_ids.begin(), record.selected_ids.end());
    record.vendi_score = pool_vendi(*last_embeddings_, grown);
  }

  notify(t, Phase::commit);
  PoolState next = current;
  next.commit(record.selected_ids);
  auto next_records = records_;
  next_records.push_back(record);
  atomic_write(wd / kStateFile, serialize_state(next, next_records, config_.mode));
  state_ = std::move(next);
  records_ = std::move(next_records);

  std::ofstream timings(wd / "timings.jsonl", std::ios::app);
  timings << json{{"t", t},
                  {"train_s", record.wall_time.train_s},
                  {"embed_s", record.wall_time.embed_s},
                  {"score_s", record.wall_time.score_s},
                  {"select_s", record.wall_time.select_s}}
                 .dump()
          << '\n';
  return records_.back();
}

EvolutionResult Evolution::run() {
  if (config_.mode != RunMode::iterative)
    throw Error(ErrorCode::config, "run() drives iterative mode; use run_one_time()");
  validate_run_config(config_, corpus_.size(), true);
  init();
  while (state_->iteration() < config_.iterations && !exhausted()) step();
  const std::size_t last = state_->iteration();
  write_pool_export(config_.workdir / artifact("pool", last, "jsonl"), corpus_, state_->pool());
  return {*state_, records_};
}

EvolutionResult Evolution::run_one_time(std::size_t target_size) {
  if (config_.mode != RunMode::one_time || config_.target_size != target_size)
    throw Error(ErrorCode::config, "one-time runs need mode one_time and a matching target_size");
  validate_run_config(config_, corpus_.size(), true);
  init();
  if (state_->iteration() == 0 && target_size > config_.initial_pool_size) {
    step(target_size - config_.initial_pool_size);
    write_pool_export(config_.workdir / artifact("pool", 1, "jsonl"), corpus_, state_->pool());
  }
  return {*state_, records_};
}

PoolState init_run(const RunConfig& config, const Hooks& hooks) {
  Evolution evo(config, hooks);
  return evo.init();
}

EvolutionResult run_evolution(const RunConfig& config, const Hooks& hooks) {
  Evolution evo(config, hooks);
  return evo.run();
}

EvolutionResult run_one_time(const RunConfig& config, std::size_t target_size, const Hooks& hooks) {
  RunConfig c = config;
  c.mode = RunMode::one_time;
  c.target_size = target_size;
  Evolution evo(std::move(c), hooks);
  return evo.run_one_time(target_size);
}

}  // namespace devol
