// mock_hook: deterministic stand-in for the train / embed / score hooks.
//
//   mock_hook train --pool {POOL_FILE} --out {OUT_FILE}
//   mock_hook embed --corpus {CORPUS_FILE} --out {OUT_FILE} [--model {MODEL_FILE}] [--dim 16] [--jsonl]
//   mock_hook score --pool {POOL_FILE} --out {OUT_FILE}
//
// Embeddings hash each record's text, optionally salted with the model file
// contents so the space moves with the trained pool.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "diverseevol/corpus.hpp"

namespace {

std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic mock hook"};
  app.require_subcommand(1);
  std::string pool, corpus, model, out;
  std::size_t dim = 16;
  bool jsonl = false;

  auto* train = app.add_subcommand("train", "Write a model artifact describing the pool");
  train->add_option("--pool", pool)->required();
  train->add_option("--out", out)->required();

  auto* embed = app.add_subcommand("embed", "Embed every corpus record");
  embed->add_option("--corpus", corpus)->required();
  embed->add_option("--out", out)->required();
  embed->add_option("--model", model);
  embed->add_option("--dim", dim)->check(CLI::PositiveNumber);
  embed->add_flag("--jsonl", jsonl);

  auto* score = app.add_subcommand("score", "Token log-probs for candidate records");
  score->add_option("--pool", pool)->required();
  score->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const std::string text = slurp(pool);
      const auto lines = std::count(text.begin(), text.end(), '\n');
      std::ofstream(out) << "records " << lines << "\nhash " << fnv1a64(text) << "\n";
    } else if (*embed) {
      const auto c = devol::load_corpus(corpus);
      const std::uint64_t salt = model.empty() ? 0 : fnv1a64(slurp(model));
      std::vector<float> data(c.size() * dim);
      for (std::size_t r = 0; r < c.size(); ++r) {
        std::mt19937_64 rng(fnv1a64(c[r].instruction, salt ^ 0xcbf29ce484222325ULL));
        std::normal_distribution<float> g;
        for (std::size_t j = 0; j < dim; ++j) data[r * dim + j] = g(rng);
      }
      const devol::EmbeddingMatrix m(c.size(), dim, std::move(data));
      jsonl ? devol::write_embeddings_jsonl(out, m) : devol::write_embeddings(out, m);
    } else if (*score) {
      std::ifstream in(pool);
      std::ofstream o(out);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto rec = nlohmann::json::parse(line);
        std::uint64_t h = fnv1a64(rec.at("instruction").get<std::string>());
        nlohmann::json tokens = nlohmann::json::array();
        for (int t = 0; t < 4; ++t) {
          h = fnv1a64(std::to_string(h));
          const double best = -static_cast<double>(h % 997) / 500.0;
          tokens.push_back({best, best - 0.01 - static_cast<double>((h >> 16) % 991) / 400.0});
        }
        o << nlohmann::json{{"id", rec.at("id")}, {"tokens", tokens}}.dump() << "\n";
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "mock_hook: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
