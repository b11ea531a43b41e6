#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace devol {

struct AnswerPair {
  std::string question_id;
  std::string question;
  std::string model_answer;
  /// Answer of the reference model that every evaluated model is compared to.
  std::string reference_answer;
};

enum class Ordering { model_first, reference_first };

std::string_view to_string(Ordering o) noexcept;
Ordering parse_ordering(std::string_view name);

struct JudgeVerdict {
  std::string question_id;
  Ordering ordering = Ordering::model_first;
  double score_model = 0.0;
  double score_reference = 0.0;
};

struct JudgePrompt {
  std::string question_id;
  Ordering ordering = Ordering::model_first;
  std::string text;
};

struct AveragedScores {
  double model = 0.0;
  double reference = 0.0;
};

using AggregatedScores = std::map<std::string, AveragedScores>;

struct EvalReport {
  double rs = 0.0;
  double wtr = 0.0;
  std::size_t n_questions = 0;
  std::size_t excluded = 0;
  AggregatedScores per_question;
};

/// Pairwise judge template. Placeholders: {question}, {answer_1}, {answer_2}.
extern const std::string_view kJudgeTemplate;

std::string render_judge_prompt(std::string_view question, std::string_view answer_1,
                                std::string_view answer_2);

/// Two prompts per pair: model answer first, then reference answer first.
std::vector<JudgePrompt> emit_judge_prompts(std::span<const AnswerPair> pairs);

/// Parses "<score1> <score2>" from the first line of a judge reply.
std::optional<std::pair<double, double>> parse_judge_reply(std::string_view reply);

/// Per question, each side's score averaged over the two orderings.
AggregatedScores aggregate_scores(std::span<const JudgeVerdict> verdicts);

/// 100 * sum(model) / sum(reference).
double relative_score(const AggregatedScores& aggregated);
/// 100 * |{q : model_q >= reference_q}| / n.
double win_tie_rate(const AggregatedScores& aggregated);

EvalReport make_report(const AggregatedScores& aggregated, std::size_t excluded);

std::vector<AnswerPair> load_answer_pairs(const std::filesystem::path& path);
std::vector<JudgeVerdict> load_verdicts(const std::filesystem::path& path);
void write_verdicts(const std::filesystem::path& path, std::span<const JudgeVerdict> verdicts);
void write_report_json(const std::filesystem::path& path, const EvalReport& report);
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);

/// Completion backend for judge prompts.
class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

/// Deterministic stand-in judge: scores each answer from its length.
class MockJudge : public JudgeClient {
 public:
  std::string complete(const std::string& prompt) override;
};

struct HttpJudgeConfig {
  std::string endpoint;  // http://host[:port]/path
  std::string model = "gpt-4-0613";
  double temperature = 0.0;
  std::string token_env = "DIVERSEEVOL_JUDGE_TOKEN";
  std::chrono::seconds timeout{120};
};

/// Posts prompts to a chat-completion endpoint and returns the first choice.
class HttpJudge : public JudgeClient {
 public:
  explicit HttpJudge(HttpJudgeConfig config);
  std::string complete(const std::string& prompt) override;

 private:
  HttpJudgeConfig config_;
  std::string base_;
  std::string path_;
};

struct JudgeRunResult {
  std::vector<JudgeVerdict> verdicts;
  /// Questions dropped because a reply stayed unparseable after one retry.
  std::vector<std::string> excluded;
};

/// Sends both orderings of every pair to `client`, retrying an unparseable
/// reply once. Questions with a missing verdict are dropped entirely.
/// `max_in_flight` bounds concurrent requests.
JudgeRunResult collect_verdicts(JudgeClient& client, std::span<const AnswerPair> pairs,
                                std::size_t max_in_flight = 1);

}  // namespace devol
