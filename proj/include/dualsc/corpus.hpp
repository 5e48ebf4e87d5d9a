#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dualsc/rng.hpp"

namespace dualsc {

// One corpus row: an English intent paired with one logical assembly line
// (multi-instruction lines joined by the corpus's literal "\n" separator).
struct ExamplePair {
  std::string intent;
  std::string snippet;
};

enum class TaskDirection { gen, sum };
enum class TaskMode { dual, single_gen, single_sum };

std::string to_string(TaskDirection d);
std::string to_string(TaskMode m);
TaskMode task_mode_from_string(const std::string& s);

// Task prefix surface forms; each is a single reserved vocabulary token.
inline constexpr const char* kPrefixGen = "ShellCodeGen:";
inline constexpr const char* kPrefixSum = "ShellCodeSum:";

enum class TextKind { code, nl };

// code: commas and label colons split into their own tokens, bracketed memory
// operands kept whole, the literal "\n" separator becomes its own token,
// whitespace split otherwise. nl: whitespace split. Case preserved for both.
std::vector<std::string> tokenize(const std::string& text, TextKind kind);

// Token <-> id bijection with fixed reserved ids.
class Vocabulary {
 public:
  static constexpr int pad_id = 0;
  static constexpr int start_id = 1;
  static constexpr int end_id = 2;
  static constexpr int unk_id = 3;
  static constexpr int prefix_gen_id = 4;
  static constexpr int prefix_sum_id = 5;
  static constexpr int reserved_count = 6;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens);  // full list incl. reserved

  int id_of(const std::string& token) const;  // unk_id for OOV
  const std::string& token_of(int id) const;  // throws IndexError out of range
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

// All training tokens kept (min frequency 1); reserved tokens first.
Vocabulary build_vocab(const std::vector<ExamplePair>& training_pairs);

struct PrefixedExample {
  TaskDirection direction = TaskDirection::gen;
  std::vector<int> source_ids;  // prefix token first when prefixes are on
  std::vector<int> target_ids;  // start ... end
  std::size_t pair_index = 0;   // row in the originating split
};

// Each pair yields a gen and a sum example, interleaved. In a single-task
// mode only that direction is produced.
std::vector<PrefixedExample> dualize(const std::vector<ExamplePair>& pairs,
                                     const Vocabulary& vocab, TaskMode mode = TaskMode::dual,
                                     bool use_prefix = true);

enum class CorpusFormat { csv, tsv };

struct LoadOptions {
  CorpusFormat format = CorpusFormat::csv;
  std::string intent_column = "intent";
  std::string snippet_column = "snippet";
};

struct LoadResult {
  std::vector<ExamplePair> pairs;
  std::size_t rows_read = 0;
  std::size_t skipped = 0;  // malformed / empty rows
};

LoadResult load_pairs(const std::filesystem::path& path, const LoadOptions& options ={});

struct SplitResult {
  std::vector<ExamplePair> train, val, test;
  // Original row indices per split, for the audit manifest.
  std::vector<std::size_t> train_rows, val_rows, test_rows;
};

// Deterministic shuffled split; sizes floor(n*train), floor(n*val), rest.
SplitResult split_pairs(const std::vector<ExamplePair>& pairs, double train_ratio,
                        double val_ratio, double test_ratio, std::uint64_t seed);

// Whitespace-token length statistics (the corpus-table convention, computed
// before any model-specific tokenization).
struct CorpusStats {
  std::size_t pair_count = 0;
  double mean_snippet_len = 0.0;
  double mean_intent_len = 0.0;
  std::size_t median_snippet_len = 0;
  std::size_t median_intent_len = 0;
};

CorpusStats corpus_stats(const std::vector<ExamplePair>& pairs);

}  // namespace dualsc
