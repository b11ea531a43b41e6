#include "diverseevol/judge.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <future>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "diverseevol/error.hpp"
#include "http_client.hpp"

namespace devol {

namespace fs = std::filesystem;
using nlohmann::json;

const std::string_view kJudgeTemplate =
    "[Question]\n"
    "{question}\n"
    "\n"
    "[The Start of Assistant 1's Answer]\n"
    "{answer_1}\n"
    "[The End of Assistant 1's Answer]\n"
    "\n"
    "[The Start of Assistant 2's Answer]\n"
    "{answer_2}\n"
    "[The End of Assistant 2's Answer]\n"
    "\n"
    "[System]\n"
    "We would like to request your feedback on the performance of two AI assistants in response to "
    "the user question displayed above. Please rate the helpfulness, relevance, accuracy, level of "
    "details of their responses. Each assistant receives an overall score on a scale of 1 to 10, "
    "where a higher score indicates better overall performance. Please first output a single line "
    "containing only two values indicating the scores for Assistant 1 and 2, respectively. The two "
    "scores are separated by a space. In the subsequent line, please provide a comprehensive "
    "explanation of your evaluation, avoiding any potential bias and ensuring that the order in "
    "which the responses were presented does not affect your judgment.\n";

namespace {

constexpr double kMinScore = 1.0;
constexpr double kMaxScore = 10.0;

constexpr std::string_view kAnswer1Start = "[The Start of Assistant 1's Answer]\n";
constexpr std::string_view kAnswer1End = "\n[The End of Assistant 1's Answer]";
constexpr std::string_view kAnswer2Start = "[The Start of Assistant 2's Answer]\n";
constexpr std::string_view kAnswer2End = "\n[The End of Assistant 2's Answer]";

bool in_range(double s) { return s >= kMinScore && s <= kMaxScore; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string id_from_json(const json& v, std::size_t lineno) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw Error(ErrorCode::schema, fmt::format("line {}: question_id must be a string or integer", lineno));
}

std::string required_string(const json& obj, const char* key, std::size_t lineno) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string())
    throw Error(ErrorCode::schema, fmt::format("line {}: missing string key '{}'", lineno, key));
  return it->get<std::string>();
}

template <typename Fn>
void for_each_json_line(const fs::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, fmt::format("cannot open {}", path.string()));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::parse, fmt::format("{}: line {}: {}", path.string(), lineno, e.what()));
    }
    if (!obj.is_object())
      throw Error(ErrorCode::schema, fmt::format("{}: line {}: expected an object", path.string(), lineno));
    fn(obj, lineno);
  }
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string_view between(std::string_view text, std::string_view open, std::string_view close) {
  const auto b = text.find(open);
  if (b == std::string_view::npos) return {};
  const auto start = b + open.size();
  const auto e = text.find(close, start);
  if (e == std::string_view::npos) return {};
  return text.substr(start, e - start);
}

}  // namespace

std::string_view to_string(Ordering o) noexcept {
  return o == Ordering::model_first ? "model_first" : "reference_first";
}

Ordering parse_ordering(std::string_view name) {
  if (name == "model_first") return Ordering::model_first;
  if (name == "reference_first") return Ordering::reference_first;
  throw Error(ErrorCode::schema, fmt::format("unknown ordering '{}'", name));
}

std::string render_judge_prompt(std::string_view question, std::string_view answer_1,
                                std::string_view answer_2) {
  // Substitute in one pass so placeholder-like text inside answers is kept.
  std::string out;
  out.reserve(kJudgeTemplate.size() + question.size() + answer_1.size() + answer_2.size());
  std::string_view rest = kJudgeTemplate;
  const std::pair<std::string_view, std::string_view> slots[] = {
      {"{question}", question}, {"{answer_1}", answer_1}, {"{answer_2}", answer_2}};
  for (const auto& [placeholder, value] : slots) {
    const auto pos = rest.find(placeholder);
    out.append(rest.substr(0, pos));
    out.append(value);
    rest.remove_prefix(pos + placeholder.size());
  }
  out.append(rest);
  return out;
}

std::vector<JudgePrompt> emit_judge_prompts(std::span<const AnswerPair> pairs) {
  std::vector<JudgePrompt> prompts;
  prompts.reserve(pairs.size() * 2);
  for (const auto& p : pairs) {
    prompts.push_back({p.question_id, Ordering::model_first,
                       render_judge_prompt(p.question, p.model_answer, p.reference_answer)});
    prompts.push_back({p.question_id, Ordering::reference_first,
                       render_judge_prompt(p.question, p.reference_answer, p.model_answer)});
  }
  return prompts;
}

std::optional<std::pair<double, double>> parse_judge_reply(std::string_view reply) {
  const auto nl = reply.find('\n');
  std::string_view line = trim(reply.substr(0, nl));
  double values[2];
  for (double& v : values) {
    if (line.empty()) return std::nullopt;
    const auto end = std::find_if(line.begin(), line.end(),
                                  [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
    const std::string_view token(line.data(), static_cast<std::size_t>(end - line.begin()));
    auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
    if (ec != std::errc() || ptr != token.data() + token.size() || !std::isfinite(v)) return std::nullopt;
    line = trim(line.substr(token.size()));
  }
  if (!line.empty()) return std::nullopt;
  return std::pair{values[0], values[1]};
}

AggregatedScores aggregate_scores(std::span<const JudgeVerdict> verdicts) {
  struct Slots {
    std::optional<JudgeVerdict> model_first;
    std::optional<JudgeVerdict> reference_first;
  };
  std::map<std::string, Slots> grouped;
  for (const auto& v : verdicts) {
    if (!in_range(v.score_model) || !in_range(v.score_reference))
      throw Error(ErrorCode::range, fmt::format("question {}: scores ({}, {}) outside [1, 10]",
                                                v.question_id, v.score_model, v.score_reference));
    auto& slot = v.ordering == Ordering::model_first ? grouped[v.question_id].model_first
                                                     : grouped[v.question_id].reference_first;
    if (slot)
      throw Error(ErrorCode::duplication,
                  fmt::format("question {}: two verdicts for ordering {}", v.question_id, to_string(v.ordering)));
    slot = v;
  }
  AggregatedScores out;
  for (const auto& [qid, slots] : grouped) {
    if (!slots.model_first || !slots.reference_first)
      throw Error(ErrorCode::coverage,
                  fmt::format("question {}: missing the {} ordering", qid,
                              slots.model_first ? "reference_first" : "model_first"));
    out[qid] = {(slots.model_first->score_model + slots.reference_first->score_model) / 2.0,
                (slots.model_first->score_reference + slots.reference_first->score_reference) / 2.0};
  }
  return out;
}

double relative_score(const AggregatedScores& aggregated) {
  double model = 0.0;
  double reference = 0.0;
  for (const auto& [qid, s] : aggregated) {
    model += s.model;
    reference += s.reference;
  }
  if (!(reference > 0.0)) throw Error(ErrorCode::division, "reference score total is zero");
  return 100.0 * model / reference;
}

double win_tie_rate(const AggregatedScores& aggregated) {
  if (aggregated.empty()) throw Error(ErrorCode::empty_input, "win-and-tie rate of an empty benchmark");
  const auto wins = std::count_if(aggregated.begin(), aggregated.end(),
                                  [](const auto& kv) { return kv.second.model >= kv.second.reference; });
  return 100.0 * static_cast<double>(wins) / static_cast<double>(aggregated.size());
}

EvalReport make_report(const AggregatedScores& aggregated, std::size_t excluded) {
  EvalReport report;
  report.rs = relative_score(aggregated);
  report.wtr = win_tie_rate(aggregated);
  report.n_questions = aggregated.size();
  report.excluded = excluded;
  report.per_question = aggregated;
  return report;
}

std::vector<AnswerPair> load_answer_pairs(const fs::path& path) {
  std::vector<AnswerPair> pairs;
  std::map<std::string, std::size_t> seen;
  for_each_json_line(path, [&](const json& obj, std::size_t lineno) {
    if (!obj.contains("question_id"))
      throw Error(ErrorCode::schema, fmt::format("line {}: missing question_id", lineno));
    AnswerPair p{id_from_json(obj["question_id"], lineno), required_string(obj, "question", lineno),
                 required_string(obj, "model_answer", lineno),
                 required_string(obj, "reference_answer", lineno)};
    if (!seen.emplace(p.question_id, lineno).second)
      throw Error(ErrorCode::duplication, fmt::format("line {}: duplicate question_id {}", lineno, p.question_id));
    pairs.push_back(std::move(p));
  });
  return pairs;
}

std::vector<JudgeVerdict> load_verdicts(const fs::path& path) {
  std::vector<JudgeVerdict> verdicts;
  for_each_json_line(path, [&](const json& obj, std::size_t lineno) {
    if (!obj.contains("question_id"))
      throw Error(ErrorCode::schema, fmt::format("line {}: missing question_id", lineno));
    JudgeVerdict v;
    v.question_id = id_from_json(obj["question_id"], lineno);
    v.ordering = parse_ordering(required_string(obj, "ordering", lineno));
    for (auto [key, dst] : {std::pair{"score_model", &v.score_model}, {"score_reference", &v.score_reference}}) {
      auto it = obj.find(key);
      if (it == obj.end() || !it->is_number())
        throw Error(ErrorCode::schema, fmt::format("line {}: missing numeric '{}'", lineno, key));
      *dst = it->get<double>();
    }
    verdicts.push_back(std::move(v));
  });
  return verdicts;
}

void write_verdicts(const fs::path& path, std::span<const JudgeVerdict> verdicts) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", path.string()));
  for (const auto& v : verdicts) {
    out << json{{"question_id", v.question_id},
                {"ordering", to_string(v.ordering)},
                {"score_model", v.score_model},
                {"score_reference", v.score_reference}}
               .dump()
        << '\n';
  }
}

void write_report_json(const fs::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", path.string()));
  out << json{{"rs", report.rs}, {"wtr", report.wtr}, {"n_questions", report.n_questions},
              {"excluded", report.excluded}}
             .dump(2)
      << '\n';
}

void write_report_csv(const fs::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", path.string()));
  out << "question_id,avg_model,avg_reference\n";
  for (const auto& [qid, s] : report.per_question)
    out << fmt::format("{},{},{}\n", csv_field(qid), s.model, s.reference);
}

std::string MockJudge::complete(const std::string& prompt) {
  auto score = [](std::string_view answer) { return 1 + std::min<std::size_t>(9, answer.size() / 20); };
  const auto a1 = between(prompt, kAnswer1Start, kAnswer1End);
  const auto a2 = between(prompt, kAnswer2Start, kAnswer2End);
  return fmt::format("{} {}\nLonger answers score higher.", score(a1), score(a2));
}

HttpJudge::HttpJudge(HttpJudgeConfig config) : config_(std::move(config)) {
  if (config_.endpoint.empty()) throw Error(ErrorCode::config, "judge endpoint is empty");
}

std::string HttpJudge::complete(const std::string& prompt) {
  const json request = {{"model", config_.model},
                        {"temperature", config_.temperature},
                        {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
  std::vector<std::pair<std::string, std::string>> headers;
  if (const char* token = std::getenv(config_.token_env.c_str()); token && *token)
    headers.emplace_back("Authorization", fmt::format("Bearer {}", token));

  const auto res = detail::http_post(config_.endpoint, request.dump(), "application/json", headers,
                                     config_.timeout);
  if (res.status < 200 || res.status >= 300)
    throw Error(ErrorCode::hook, fmt::format("judge endpoint returned HTTP {}: {}", res.status, res.body));
  try {
    const json body = json::parse(res.body);
    return body.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::hook, fmt::format("judge response not in chat-completion form: {}", e.what()));
  }
}

JudgeRunResult collect_verdicts(JudgeClient& client, std::span<const AnswerPair> pairs,
                                std::size_t max_in_flight) {
  const auto prompts = emit_judge_prompts(pairs);
  std::vector<std::optional<std::pair<double, double>>> parsed(prompts.size());

  auto ask = [&client](const std::string& text) -> std::optional<std::pair<double, double>> {
    for (int attempt = 0; attempt < 2; ++attempt) {
      auto scores = parse_judge_reply(client.complete(text));
      if (scores && in_range(scores->first) && in_range(scores->second)) return scores;
    }
    return std::nullopt;
  };

  max_in_flight = std::max<std::size_t>(1, max_in_flight);
  for (std::size_t begin = 0; begin < prompts.size(); begin += max_in_flight) {
    const std::size_t end = std::min(prompts.size(), begin + max_in_flight);
    if (end - begin == 1) {
      parsed[begin] = ask(prompts[begin].text);
      continue;
    }
    std::vector<std::future<std::optional<std::pair<double, double>>>> inflight;
    for (std::size_t i = begin; i < end; ++i)
      inflight.push_back(std::async(std::launch::async, ask, std::cref(prompts[i].text)));
    for (std::size_t i = begin; i < end; ++i) parsed[i] = inflight[i - begin].get();
  }

  JudgeRunResult result;
  for (std::size_t i = 0; i < prompts.size(); i += 2) {
    if (!parsed[i] || !parsed[i + 1]) {
      spdlog::warn("judge: excluding question {} (unparseable reply after retry)", prompts[i].question_id);
      result.excluded.push_back(prompts[i].question_id);
      continue;
    }
    // Assistant 1 is the model answer in model_first, the reference otherwise.
    result.verdicts.push_back(
        {prompts[i].question_id, Ordering::model_first, parsed[i]->first, parsed[i]->second});
    result.verdicts.push_back(
        {prompts[i + 1].question_id, Ordering::reference_first, parsed[i + 1]->second, parsed[i + 1]->first});
  }
  return result;
}

}  // namespace devol
