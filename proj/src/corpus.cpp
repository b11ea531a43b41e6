#include "diverseevol/corpus.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "diverseevol/error.hpp"

namespace devol {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 4> kEmbMagic = {'E', 'M', 'B', '1'};
constexpr std::size_t kEmbHeaderBytes = 12;

std::ifstream open_input(const fs::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw Error(ErrorCode::io, fmt::format("cannot open {}", path.string()));
  return in;
}

std::ofstream open_output(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, fmt::format("cannot write {}", path.string()));
  return out;
}

// Yields every line of a text file with a trailing '\r' removed. The final
// newline does not produce an extra empty line.
std::vector<std::string> read_lines(const fs::path& path) {
  auto in = open_input(path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

json parse_line(const std::string& line, std::size_t lineno, const fs::path& path) {
  try {
    return json::parse(line);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::parse,
                fmt::format("{}: line {}: malformed JSON ({})", path.string(), lineno, e.what()));
  }
}

std::string optional_string(const json& obj, const char* key, std::size_t lineno) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return {};
  if (!it->is_string())
    throw Error(ErrorCode::schema, fmt::format("line {}: key '{}' must be a string", lineno, key));
  return it->get<std::string>();
}

std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void write_u32_le(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> bytes = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                     static_cast<char>((v >> 16) & 0xff),
                                     static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes.data(), bytes.size());
}

EmbeddingMatrix parse_emb1(const std::vector<unsigned char>& bytes, const fs::path& path) {
  if (bytes.size() < kEmbHeaderBytes)
    throw Error(ErrorCode::shape, fmt::format("{}: truncated EMB1 header", path.string()));
  const std::size_t count = read_u32_le(bytes.data() + 4);
  const std::size_t dim = read_u32_le(bytes.data() + 8);
  const std::size_t values = count * dim;
  if (bytes.size() != kEmbHeaderBytes + values * 4)
    throw Error(ErrorCode::shape,
                fmt::format("{}: EMB1 payload is {} bytes, header declares {}x{} floats",
                            path.string(), bytes.size() - kEmbHeaderBytes, count, dim));
  std::vector<float> data(values);
  const unsigned char* p = bytes.data() + kEmbHeaderBytes;
  for (std::size_t i = 0; i < values; ++i, p += 4) data[i] = std::bit_cast<float>(read_u32_le(p));
  return EmbeddingMatrix(count, dim, std::move(data));
}

EmbeddingMatrix parse_embedding_jsonl(const fs::path& path) {
  const auto lines = read_lines(path);
  std::vector<float> data;
  std::size_t dim = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (is_blank(lines[i])) {
      if (i + 1 == lines.size()) break;
      throw Error(ErrorCode::parse, fmt::format("{}: line {}: blank line", path.string(), i + 1));
    }
    const json row = parse_line(lines[i], i + 1, path);
    if (!row.is_array())
      throw Error(ErrorCode::shape, fmt::format("{}: line {}: expected an array", path.string(), i + 1));
    if (count == 0) {
      dim = row.size();
    } else if (row.size() != dim) {
      throw Error(ErrorCode::shape, fmt::format("{}: row {} has {} values, expected {}",
                                                path.string(), count, row.size(), dim));
    }
    for (const auto& v : row) {
      if (!v.is_number())
        throw Error(ErrorCode::parse, fmt::format("{}: row {}: non-numeric value", path.string(), count));
      data.push_back(static_cast<float>(v.get<double>()));
    }
    ++count;
  }
  return EmbeddingMatrix(count, dim, std::move(data));
}

}  // namespace

Corpus load_corpus(const fs::path& path) {
  const auto lines = read_lines(path);
  Corpus corpus;
  corpus.records.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t lineno = i + 1;
    if (is_blank(lines[i])) {
      if (i + 1 == lines.size()) break;
      throw Error(ErrorCode::parse, fmt::format("{}: line {}: blank line", path.string(), lineno));
    }
    const json obj = parse_line(lines[i], lineno, path);
    if (!obj.is_object())
      throw Error(ErrorCode::schema, fmt::format("line {}: expected a JSON object", lineno));

    DatasetRecord rec;
    rec.id = corpus.records.size();
    for (const char* key : {"instruction", "response"}) {
      if (!obj.contains(key))
        throw Error(ErrorCode::schema, fmt::format("line {}: missing required key '{}'", lineno, key));
    }
    rec.instruction = optional_string(obj, "instruction", lineno);
    rec.response = optional_string(obj, "response", lineno);
    rec.input = obj.contains("input") ? optional_string(obj, "input", lineno)
                                      : optional_string(obj, "context", lineno);
    if (is_blank(rec.instruction))
      throw Error(ErrorCode::schema, fmt::format("line {}: instruction is empty", lineno));
    rec.raw = lines[i];
    corpus.records.push_back(std::move(rec));
  }
  if (corpus.records.empty())
    throw Error(ErrorCode::empty_corpus, fmt::format("{}: corpus is empty", path.string()));
  return corpus;
}

void write_pool_export(const fs::path& path, const Corpus& corpus, std::span<const RecordId> ids) {
  auto out = open_output(path);
  for (RecordId id : ids) out << corpus[id].raw << '\n';
  if (!out) throw Error(ErrorCode::io, fmt::format("write failed: {}", path.string()));
}

EmbeddingMatrix::EmbeddingMatrix(std::size_t count, std::size_t dim, std::vector<float> data)
    : count_(count), dim_(dim), data_(std::move(data)) {
  if (count_ * dim_ != data_.size())
    throw Error(ErrorCode::shape, fmt::format("embedding data has {} values, expected {}x{}",
                                              data_.size(), count_, dim_));
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i]))
      throw Error(ErrorCode::numeric,
                  fmt::format("non-finite embedding value at row {}, column {}", i / dim_, i % dim_));
  }
}

EmbeddingMatrix load_embeddings(const fs::path& path) {
  auto in = open_input(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() >= kEmbMagic.size() &&
      std::equal(kEmbMagic.begin(), kEmbMagic.end(), bytes.begin(),
                 [](char a, unsigned char b) { return static_cast<unsigned char>(a) == b; })) {
    return parse_emb1(bytes, path);
  }
  bytes.clear();
  bytes.shrink_to_fit();
  return parse_embedding_jsonl(path);
}

EmbeddingMatrix load_embeddings(const fs::path& path, std::size_t expected_count) {
  auto emb = load_embeddings(path);
  if (emb.count() != expected_count)
    throw Error(ErrorCode::alignment, fmt::format("{}: {} embedding rows, expected {}", path.string(),
                                                  emb.count(), expected_count));
  return emb;
}

void write_embeddings(const fs::path& path, const EmbeddingMatrix& emb) {
  auto out = open_output(path, std::ios::binary);
  out.write(kEmbMagic.data(), kEmbMagic.size());
  write_u32_le(out, static_cast<std::uint32_t>(emb.count()));
  write_u32_le(out, static_cast<std::uint32_t>(emb.dim()));
  for (float v : emb.data()) write_u32_le(out, std::bit_cast<std::uint32_t>(v));
  if (!out) throw Error(ErrorCode::io, fmt::format("write failed: {}", path.string()));
}

void write_embeddings_jsonl(const fs::path& path, const EmbeddingMatrix& emb) {
  auto out = open_output(path);
  for (std::size_t r = 0; r < emb.count(); ++r) {
    json row = json::array();
    for (float v : emb.row(r)) row.push_back(v);
    out << row.dump() << '\n';
  }
  if (!out) throw Error(ErrorCode::io, fmt::format("write failed: {}", path.string()));
}

TokenScores load_token_scores(const fs::path& path) {
  const auto lines = read_lines(path);
  TokenScores scores;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t lineno = i + 1;
    if (is_blank(lines[i])) {
      if (i + 1 == lines.size()) break;
      throw Error(ErrorCode::parse, fmt::format("{}: line {}: blank line", path.string(), lineno));
    }
    const json obj = parse_line(lines[i], lineno, path);
    if (!obj.is_object() || !obj.contains("id") || !obj["id"].is_number_unsigned() ||
        !obj.contains("tokens") || !obj["tokens"].is_array())
      throw Error(ErrorCode::schema,
                  fmt::format("line {}: expected {{\"id\": uint, \"tokens\": [...]}}", lineno));

    TokenScoreRecord rec;
    rec.id = obj["id"].get<RecordId>();
    for (const auto& pair : obj["tokens"]) {
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number() || !pair[1].is_number())
        throw Error(ErrorCode::schema, fmt::format("line {}: token entries must be [best, second]", lineno));
      TokenTopLogprobs tok{pair[0].get<double>(), pair[1].get<double>()};
      if (!std::isfinite(tok.best) || !std::isfinite(tok.second))
        throw Error(ErrorCode::numeric, fmt::format("line {}: non-finite log-probability", lineno));
      if (tok.best < tok.second)
        throw Error(ErrorCode::ordering,
                    fmt::format("line {}: record {} token {} has best {} < second {}", lineno, rec.id,
                                rec.tokens.size(), tok.best, tok.second));
      rec.tokens.push_back(tok);
    }
    if (rec.tokens.empty())
      throw Error(ErrorCode::schema, fmt::format("line {}: record {} has no tokens", lineno, rec.id));
    const RecordId id = rec.id;
    if (!scores.emplace(id, std::move(rec)).second)
      throw Error(ErrorCode::duplication, fmt::format("line {}: duplicate id {}", lineno, id));
  }
  return scores;
}

void write_token_scores(const fs::path& path, const TokenScores& scores) {
  auto out = open_output(path);
  for (const auto& [id, rec] : scores) {
    json tokens = json::array();
    for (const auto& t : rec.tokens) tokens.push_back({t.best, t.second});
    out << json{{"id", id}, {"tokens", tokens}}.dump() << '\n';
  }
  if (!out) throw Error(ErrorCode::io, fmt::format("write failed: {}", path.string()));
}

}  // namespace devol
