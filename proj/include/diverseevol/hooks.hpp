#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "diverseevol/corpus.hpp"

namespace devol {

enum class HookRole { train, embed, score };
enum class HookKind { subprocess, http };

std::string_view to_string(HookRole role) noexcept;

/// How to reach an external train / embed / score provider.
///
/// Subprocess commands run under /bin/sh with these placeholders replaced by
/// shell-quoted absolute paths (or the iteration number):
///   {POOL_FILE}   train/embed: P_t export; score: candidate export (Q_t)
///   {CORPUS_FILE} the full corpus
///   {MODEL_FILE}  output of this iteration's train hook (may not exist)
///   {OUT_FILE}    where the hook must write its artifact
///   {ITER}        iteration number t
/// DIVERSEEVOL_ITER is also set in the environment.
struct HookSpec {
  HookKind kind = HookKind::subprocess;
  std::string command;
  std::string url;
  std::chrono::milliseconds timeout = std::chrono::hours(24);
};

struct HookRequest {
  HookRole role = HookRole::train;
  std::size_t iteration = 0;
  std::filesystem::path pool_file;
  std::filesystem::path corpus_file;
  std::filesystem::path model_file;
  std::filesystem::path out_file;
  /// P_t for train/embed, Q_t for score. For in-process providers.
  std::span<const RecordId> ids;
};

/// Runs one hook invocation; on return `out_file` must exist.
class HookRunner {
 public:
  virtual ~HookRunner() = default;
  virtual void run(const HookRequest& request) = 0;
};

/// Validates that the command template carries the placeholders `role` needs.
void validate_hook_spec(const HookSpec& spec, HookRole role);

std::unique_ptr<HookRunner> make_hook(const HookSpec& spec, HookRole role);

/// Exposed for tests: replaces placeholders with shell-quoted values.
std::string substitute_placeholders(std::string_view command, const HookRequest& request);

}  // namespace devol
