#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace devol {

using RecordId = std::size_t;

/// One instruction/response pair. `id` is the 0-based line index in the
/// source JSONL; `raw` keeps the original line so pool exports are verbatim.
struct DatasetRecord {
  RecordId id = 0;
  std::string instruction;
  std::string input;
  std::string response;
  std::string raw;
};

struct Corpus {
  std::vector<DatasetRecord> records;

  std::size_t size() const noexcept { return records.size(); }
  const DatasetRecord& operator[](RecordId id) const { return records.at(id); }
};

/// Reads a JSONL corpus. Keys: `instruction` (required, non-blank),
/// `response` (required), `input` (optional; `context` is accepted as an
/// alias so Dolly exports load unchanged). Unknown keys are ignored.
Corpus load_corpus(const std::filesystem::path& path);

/// Writes the given records, one original line each, in the given order.
void write_pool_export(const std::filesystem::path& path, const Corpus& corpus,
                       std::span<const RecordId> ids);

/// Dense row-major float matrix; row r is the embedding of record r.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  /// Throws numeric error on NaN/Inf, shape error if sizes disagree.
  EmbeddingMatrix(std::size_t count, std::size_t dim, std::vector<float> data);

  std::size_t count() const noexcept { return count_; }
  std::size_t dim() const noexcept { return dim_; }
  std::span<const float> row(std::size_t r) const {
    return {data_.data() + r * dim_, dim_};
  }
  std::span<const float> data() const noexcept { return data_; }

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;

 private:
  std::size_t count_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> data_;
};

/// Loads either the EMB1 binary format or JSONL float arrays (detected by the
/// magic bytes). `expected_count` must match the row count.
EmbeddingMatrix load_embeddings(const std::filesystem::path& path,
                                std::size_t expected_count);

/// Same as above without the alignment check.
EmbeddingMatrix load_embeddings(const std::filesystem::path& path);

/// EMB1: "EMB1", u32 LE count, u32 LE dim, count*dim LE f32 row-major.
void write_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& emb);
void write_embeddings_jsonl(const std::filesystem::path& path, const EmbeddingMatrix& emb);

struct TokenTopLogprobs {
  double best = 0.0;
  double second = 0.0;
};

struct TokenScoreRecord {
  RecordId id = 0;
  std::vector<TokenTopLogprobs> tokens;
};

using TokenScores = std::map<RecordId, TokenScoreRecord>;

/// JSONL `{"id": int, "tokens": [[best, second], ...]}`, natural-log probs.
TokenScores load_token_scores(const std::filesystem::path& path);
void write_token_scores(const std::filesystem::path& path, const TokenScores& scores);

}  // namespace devol
