#include "dualsc/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dualsc/tensor.hpp"

namespace dualsc {

std::string to_string(TaskDirection d) { return d == TaskDirection::gen ? "gen" : "sum"; }

std::string to_string(TaskMode m) {
  switch (m) {
    case TaskMode::dual: return "dual";
    case TaskMode::single_gen: return "single_gen";
    case TaskMode::single_sum: return "single_sum";
  }
  throw ParamError("unknown task mode");
}

TaskMode task_mode_from_string(const std::string& s) {
  if (s == "dual") return TaskMode::dual;
  if (s == "single_gen" || s == "gen") return TaskMode::single_gen;
  if (s == "single_sum" || s == "sum") return TaskMode::single_sum;
  throw ParamError("unknown task mode '" + s + "' (expected dual|gen|sum)");
}

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v'; }

std::vector<std::string> whitespace_split(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (is_space(c)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text, TextKind kind) {
  if (kind == TextKind::nl) return whitespace_split(text);

  // code: pad separators so a plain whitespace split isolates them, but keep
  // bracketed memory operands whole (they may contain spaces and '+'/'-').
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&]() {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '[') {
      flush();
      std::size_t close = text.find(']', i);
      if (close == std::string::npos) {
        cur.push_back(c);  // unbalanced bracket, treat literally
        continue;
      }
      out.push_back(text.substr(i, close - i + 1));
      i = close;
      continue;
    }
    if (c == '\\' && i + 1 < text.size() && text[i + 1] == 'n') {
      flush();
      out.push_back("\\n");
      ++i;
      continue;
    }
    if (c == ',' || c == ':') {
      flush();
      out.push_back(std::string(1, c));
      continue;
    }
    if (is_space(c)) {
      flush();
      continue;
    }
    cur.push_back(c);
  }
  flush();
  return out;
}

Vocabulary::Vocabulary()
    : Vocabulary(std::vector<std::string>{"<pad>", "<s>", "</s>", "<unk>", kPrefixGen,
                                          kPrefixSum}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) : tokens_(tokens) {
  if (tokens_.size() < reserved_count) {
    throw ParamError("vocabulary must include the 6 reserved tokens");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<int>(i));
    if (!inserted) throw ParamError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? unk_id : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("vocabulary id " + std::to_string(id) + " out of range [0," +
                     std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id_of(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (int id : ids) tokens.push_back(token_of(id));
  return tokens;
}

Vocabulary build_vocab(const std::vector<ExamplePair>& training_pairs) {
  if (training_pairs.empty()) throw ParamError("build_vocab on an empty training set");
  std::vector<std::string> tokens{"<pad>", "<s>", "</s>", "<unk>", kPrefixGen, kPrefixSum};
  std::map<std::string, bool> seen;
  for (const auto& t : tokens) seen[t] = true;
  auto add_all = [&](const std::vector<std::string>& ts) {
    for (const auto& t : ts) {
      if (!seen.count(t)) {
        seen[t] = true;
        tokens.push_back(t);
      }
    }
  };
  for (const auto& p : training_pairs) {
    add_all(tokenize(p.intent, TextKind::nl));
    add_all(tokenize(p.snippet, TextKind::code));
  }
  return Vocabulary(tokens);
}

std::vector<PrefixedExample> dualize(const std::vector<ExamplePair>& pairs,
                                     const Vocabulary& vocab, TaskMode mode, bool use_prefix) {
  std::vector<PrefixedExample> out;
  out.reserve(pairs.size() * (mode == TaskMode::dual ? 2 : 1));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    auto make = [&](TaskDirection dir) {
      PrefixedExample ex;
      ex.direction = dir;
      ex.pair_index = i;
      const bool gen = dir == TaskDirection::gen;
      if (use_prefix) {
        ex.source_ids.push_back(gen ? Vocabulary::prefix_gen_id : Vocabulary::prefix_sum_id);
      }
      const auto src_tokens = tokenize(gen ? p.intent : p.snippet, gen ? TextKind::nl : TextKind::code);
      const auto tgt_tokens = tokenize(gen ? p.snippet : p.intent, gen ? TextKind::code : TextKind::nl);
      for (int id : vocab.encode(src_tokens)) ex.source_ids.push_back(id);
      ex.target_ids.push_back(Vocabulary::start_id);
      for (int id : vocab.encode(tgt_tokens)) ex.target_ids.push_back(id);
      ex.target_ids.push_back(Vocabulary::end_id);
      return ex;
    };
    if (mode != TaskMode::single_sum) out.push_back(make(TaskDirection::gen));
    if (mode != TaskMode::single_gen) out.push_back(make(TaskDirection::sum));
  }
  return out;
}

namespace {

// RFC-4180-ish row reader: handles quoted fields, "" escapes and embedded
// newlines. Returns false at end of stream.
bool read_csv_row(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  std::string field;
  bool in_quotes = false;
  bool any = false;
  int c;
  while ((c = in.get()) != EOF) {
    any = true;
    const char ch = static_cast<char>(c);
    if (in_quotes) {
      if (ch == '"') {
        if (in.peek() == '"') {
          field.push_back('"');
          in.get();
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(ch);
      }
      continue;
    }
    if (ch == '"' && field.empty()) {
      in_quotes = true;
    } else if (ch == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (ch == '\n') {
      break;
    } else if (ch == '\r') {
      if (in.peek() == '\n') in.get();
      break;
    } else {
      field.push_back(ch);
    }
  }
  if (!any) return false;
  fields.push_back(std::move(field));
  return true;
}

}  // namespace

LoadResult load_pairs(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParamError("cannot open corpus file: " + path.string());

  LoadResult result;
  if (options.format == CorpusFormat::tsv) {
    std::string line;
    while (std::getline(in, line)) {
      ++result.rows_read;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        ++result.skipped;
        continue;
      }
      ExamplePair p{trim(line.substr(0, tab)), trim(line.substr(tab + 1))};
      if (p.intent.empty() || p.snippet.empty()) {
        ++result.skipped;
        continue;
      }
      result.pairs.push_back(std::move(p));
    }
  } else {
    std::vector<std::string> fields;
    if (!read_csv_row(in, fields)) throw ParamError("empty csv file: " + path.string());
    // strip a UTF-8 BOM if present
    if (!fields.empty() && fields[0].size() >= 3 && fields[0].compare(0, 3, "\xEF\xBB\xBF") == 0) {
      fields[0].erase(0, 3);
    }
    std::ptrdiff_t intent_col = -1, snippet_col = -1;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (trim(fields[i]) == options.intent_column) intent_col = static_cast<std::ptrdiff_t>(i);
      if (trim(fields[i]) == options.snippet_column) snippet_col = static_cast<std::ptrdiff_t>(i);
    }
    if (intent_col < 0 || snippet_col < 0) {
      throw ParamError("csv header of " + path.string() + " lacks columns '" +
                       options.intent_column + "'/'" + options.snippet_column + "'");
    }
    while (read_csv_row(in, fields)) {
      ++result.rows_read;
      const std::size_t need = static_cast<std::size_t>(std::max(intent_col, snippet_col)) + 1;
      if (fields.size() < need) {
        ++result.skipped;
        continue;
      }
      ExamplePair p{trim(fields[static_cast<std::size_t>(intent_col)]),
                    trim(fields[static_cast<std::size_t>(snippet_col)])};
      if (p.intent.empty() || p.snippet.empty()) {
        ++result.skipped;
        continue;
      }
      result.pairs.push_back(std::move(p));
    }
  }
  if (result.pairs.empty()) {
    throw ParamError("no valid rows in corpus file: " + path.string());
  }
  return result;
}

SplitResult split_pairs(const std::vector<ExamplePair>& pairs, double train_ratio,
                        double val_ratio, double test_ratio, std::uint64_t seed) {
  const double total = train_ratio + val_ratio + test_ratio;
  if (std::abs(total - 1.0) > 1e-9) throw ParamError("split ratios must sum to 1");
  const std::size_t n = pairs.size();
  const std::size_t n_train = static_cast<std::size_t>(std::floor(train_ratio * n));
  const std::size_t n_val = static_cast<std::size_t>(std::floor(val_ratio * n));
  const std::size_t n_test = n - n_train - n_val;
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw ParamError("too few pairs (" + std::to_string(n) + ") for non-empty splits");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  SeededRng rng(seed);
  rng.shuffle(order);

  SplitResult r;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t row = order[i];
    if (i < n_train) {
      r.train.push_back(pairs[row]);
      r.train_rows.push_back(row);
    } else if (i < n_train + n_val) {
      r.val.push_back(pairs[row]);
      r.val_rows.push_back(row);
    } else {
      r.test.push_back(pairs[row]);
      r.test_rows.push_back(row);
    }
  }
  return r;
}

CorpusStats corpus_stats(const std::vector<ExamplePair>& pairs) {
  CorpusStats s;
  s.pair_count = pairs.size();
  if (pairs.empty()) return s;
  std::vector<std::size_t> code_lens, intent_lens;
  double code_sum = 0, intent_sum = 0;
  for (const auto& p : pairs) {
    const auto c = whitespace_split(p.snippet).size();
    const auto i = whitespace_split(p.intent).size();
    code_lens.push_back(c);
    intent_lens.push_back(i);
    code_sum += static_cast<double>(c);
    intent_sum += static_cast<double>(i);
  }
  s.mean_snippet_len = code_sum / static_cast<double>(pairs.size());
  s.mean_intent_len = intent_sum / static_cast<double>(pairs.size());
  std::sort(code_lens.begin(), code_lens.end());
  std::sort(intent_lens.begin(), intent_lens.end());
  s.median_snippet_len = code_lens[code_lens.size() / 2];
  s.median_intent_len = intent_lens[intent_lens.size() / 2];
  return s;
}

}  // namespace dualsc
