#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "diverseevol/corpus.hpp"
#include "diverseevol/hooks.hpp"
#include "diverseevol/selector.hpp"

namespace devol {

enum class RunMode { iterative, one_time };

std::string_view to_string(RunMode mode) noexcept;
RunMode parse_run_mode(std::string_view name);

struct RunConfig {
  std::filesystem::path corpus_path;
  StrategyConfig strategy;
  std::size_t iterations = 10;  // T
  std::size_t initial_pool_size = 100;
  std::uint64_t seed = 0;
  std::optional<HookSpec> train_hook;
  std::optional<HookSpec> embed_hook;
  std::optional<HookSpec> score_hook;
  std::filesystem::path workdir;
  RunMode mode = RunMode::iterative;
  /// Final pool size for one-time mode.
  std::size_t target_size = 0;
  bool resume = false;
  /// Record the Vendi Score of P_{t+1} under the step's embeddings.
  bool with_vendi = false;
  /// Worker threads for distance scans; 0 = hardware concurrency.
  std::size_t threads = 0;
};

/// JSON schema shared by config files and the CLI `--config` flag.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
nlohmann::json run_config_to_json(const RunConfig& config);

/// Hash of everything that determines the selection sequence
/// (strategy, k, distance, initial pool size, seed, mode).
std::string config_fingerprint(const RunConfig& config);

struct PhaseTimes {
  double train_s = 0.0;
  double embed_s = 0.0;
  double score_s = 0.0;
  double select_s = 0.0;
};

struct IterationRecord {
  std::size_t t = 0;
  std::vector<RecordId> selected_ids;
  /// Paths relative to the workdir; empty when the phase did not run.
  std::string model_artifact;
  std::string embedding_file;
  std::optional<double> vendi_score;
  /// Q_t held fewer than k candidates, so the run stopped after this step.
  bool shortfall = false;
  /// Not persisted in state.json (it would break byte-identical reruns);
  /// appended to timings.jsonl instead.
  PhaseTimes wall_time;
};

/// In-process hook providers. Unset roles fall back to the config's HookSpecs.
struct Hooks {
  std::shared_ptr<HookRunner> train;
  std::shared_ptr<HookRunner> embed;
  std::shared_ptr<HookRunner> score;
};

enum class Phase { init, export_pool, train, embed, score, select, commit };
std::string_view to_string(Phase phase) noexcept;

/// Called before each phase; throwing aborts the run at that boundary.
using PhaseObserver = std::function<void(std::size_t t, Phase phase)>;

struct EvolutionResult {
  PoolState state;
  std::vector<IterationRecord> records;
};

/// Drives the train -> embed -> select loop and owns the workdir.
///
/// Workdir layout: state.json, pool_<t>.jsonl (P_t exports), model_<t>.out,
/// emb_<t>.bin, candidates_<t>.jsonl, scores_<t>.jsonl, timings.jsonl.
class Evolution {
 public:
  Evolution(RunConfig config, Hooks hooks = {});

  void set_phase_observer(PhaseObserver observer) { observer_ = std::move(observer); }

  /// Creates P_0 and state.json, or loads the existing state when resuming.
  const PoolState& init();
  /// One selection step. `budget` overrides k (used by one-time mode).
  const IterationRecord& step(std::optional<std::size_t> budget = std::nullopt);
  /// Runs until T steps are recorded or the candidates are exhausted.
  EvolutionResult run();
  /// Single train + embed on P_0 followed by one K-Center selection.
  EvolutionResult run_one_time(std::size_t target_size);

  const PoolState& state() const;
  const std::vector<IterationRecord>& records() const noexcept { return records_; }
  const Corpus& corpus() const noexcept { return corpus_; }
  const RunConfig& config() const noexcept { return config_; }
  /// Embeddings produced by the latest embed phase, if any.
  const EmbeddingMatrix* last_embeddings() const noexcept {
    return last_embeddings_ ? &*last_embeddings_ : nullptr;
  }

 private:
  void notify(std::size_t t, Phase phase) const;
  void persist() const;
  bool load_existing();
  bool exhausted() const;
  HookRunner* hook(HookRole role) const;

  RunConfig config_;
  Hooks hooks_;
  Corpus corpus_;
  std::string fingerprint_;
  std::optional<PoolState> state_;
  std::vector<IterationRecord> records_;
  std::optional<EmbeddingMatrix> last_embeddings_;
  PhaseObserver observer_;
};

/// Checks RunConfig invariants against a corpus of size `n`.
/// `full_budget` additionally requires initial_pool_size + T*k <= n.
void validate_run_config(const RunConfig& config, std::size_t n, bool full_budget);

PoolState init_run(const RunConfig& config, const Hooks& hooks = {});
EvolutionResult run_evolution(const RunConfig& config, const Hooks& hooks = {});
EvolutionResult run_one_time(const RunConfig& config, std::size_t target_size, const Hooks& hooks = {});

/// Reads state.json back into a PoolState and its iteration records.
EvolutionResult load_state(const std::filesystem::path& state_file);

/// Serializes state exactly as persisted (deterministic bytes).
std::string serialize_state(const PoolState& state, const std::vector<IterationRecord>& records,
                            RunMode mode);

/// Writes `contents` to `path` via a temp file, fsync and rename.
void atomic_write(const std::filesystem::path& path, std::string_view contents);

}  // namespace devol
