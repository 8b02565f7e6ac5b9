#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "dtmt/random.hpp"
#include "dtmt/vocab.hpp"

namespace dtmt {

enum class TaskKind { copy, reverse, lexsub };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::lexsub: return "lexsub";
  }
  return "?";
}

/// Synthetic translation task. vocab_size counts content tokens only.
struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  std::size_t vocab_size = 32;
  std::size_t min_len = 5;
  std::size_t max_len = 15;
  std::size_t train_size = 10000;
  std::size_t valid_size = 200;
  std::size_t test_size = 200;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size == 0) throw ConfigError("task: vocab_size must be > 0");
    if (min_len == 0 || min_len > max_len) throw ConfigError("task: need 1 <= min_len <= max_len");
    if (train_size == 0) throw ConfigError("task: train_size must be > 0");
    // enough distinct sequences for disjoint splits?
    long double available = 0;
    for (std::size_t L = min_len; L <= max_len && available < 1e30L; ++L) available += std::pow((long double)vocab_size, (long double)L);
    if (available < static_cast<long double>(train_size + valid_size + test_size)) {
      throw ConfigError("task: not enough distinct sequences for the requested corpus sizes");
    }
  }
};

/// One sentence pair; tgt always ends with eos.
struct Example {
  Sentence src;
  Sentence tgt;
};

struct TaskData {
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
  std::vector<Example> train, valid, test;
};

inline std::vector<std::string> content_tokens(std::size_t n) {
  std::vector<std::string> t;
  for (std::size_t i = 0; i < n; ++i) t.push_back("w" + std::to_string(i));
  return t;
}

/// The seed-fixed bijection used by lexsub, over content indices.
inline std::vector<std::size_t> lexsub_map(const TaskSpec& spec) {
  std::vector<std::size_t> perm(spec.vocab_size);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(spec.seed, {0x1e55}));
  rng.shuffle(perm);
  return perm;
}

/// Exact target of a synthetic task for a source sentence (content ids, no eos).
inline Sentence task_target(const TaskSpec& spec, const Sentence& src, const std::vector<std::size_t>& lex) {
  Sentence out = src;
  switch (spec.kind) {
    case TaskKind::copy: break;
    case TaskKind::reverse: std::reverse(out.begin(), out.end()); break;
    case TaskKind::lexsub:
      for (auto& t : out) t = Vocabulary::reserved_count + lex.at(t - Vocabulary::reserved_count);
      break;
  }
  return out;
}

/// Deterministic corpus for (spec, seed); splits are disjoint by source sequence.
inline TaskData generate_task(const TaskSpec& spec) {
  spec.validate();
  TaskData d;
  d.src_vocab = Vocabulary::from_tokens(content_tokens(spec.vocab_size));
  d.tgt_vocab = d.src_vocab;
  const auto lex = lexsub_map(spec);
  Rng rng(derive_seed(spec.seed, {0xda7a}));
  std::set<Sentence> seen;
  auto fill = [&](std::vector<Example>& out, std::size_t n) {
    while (out.size() < n) {
      const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
      Sentence s(len);
      for (auto& t : s) t = Vocabulary::reserved_count + rng.below(spec.vocab_size);
      if (!seen.insert(s).second) continue;
      Example ex{s, task_target(spec, s, lex)};
      ex.tgt.push_back(Vocabulary::eos);
      out.push_back(std::move(ex));
    }
  };
  fill(d.train, spec.train_size);
  fill(d.valid, spec.valid_size);
  fill(d.test, spec.test_size);
  return d;
}

// ---------------------------------------------------------------------------
// Text corpora: one whitespace-tokenised sentence per line, aligned by line.
// ---------------------------------------------------------------------------

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  for (const auto& l : lines) out << l << '\n';
}

inline void write_corpus(const std::string& src_path, const std::string& tgt_path, const std::vector<Example>& data,
                         const Vocabulary& sv, const Vocabulary& tv) {
  std::vector<std::string> s, t;
  for (const auto& ex : data) {
    s.push_back(sv.decode(ex.src));
    t.push_back(tv.decode(ex.tgt));
  }
  write_lines(src_path, s);
  write_lines(tgt_path, t);
}

inline std::vector<Example> read_corpus(const std::string& src_path, const std::string& tgt_path, const Vocabulary& sv,
                                        const Vocabulary& tv) {
  const auto s = read_lines(src_path);
  const auto t = read_lines(tgt_path);
  if (s.size() != t.size()) {
    throw DataError("parallel files '" + src_path + "' (" + std::to_string(s.size()) + " lines) and '" + tgt_path +
                    "' (" + std::to_string(t.size()) + " lines) are not aligned");
  }
  std::vector<Example> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    Example ex{sv.encode(s[i]), tv.encode(t[i])};
    if (ex.src.empty()) throw DataError(src_path + ":" + std::to_string(i + 1) + ": empty sentence");
    ex.tgt.push_back(Vocabulary::eos);
    out.push_back(std::move(ex));
  }
  return out;
}

/// Vocabulary from a text file: tokens by descending frequency, ties lexicographic.
inline Vocabulary build_vocabulary(const std::string& path) {
  std::map<std::string, std::size_t> counts;
  for (const auto& line : read_lines(path)) {
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) ++counts[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> v(counts.begin(), counts.end());
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> toks;
  for (auto& [t, c] : v) {
    bool reserved = std::find(Vocabulary::reserved_tokens().begin(), Vocabulary::reserved_tokens().end(), t) !=
                    Vocabulary::reserved_tokens().end();
    if (!reserved) toks.push_back(t);
  }
  return Vocabulary::from_tokens(toks);
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Length-bucketed batches: examples sorted by (source length, target
/// length, index) and cut greedily under a token budget (source + target
/// tokens). Each batch holds at least one example.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<Example>& data, std::size_t token_budget) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (data[a].src.size() != data[b].src.size()) return data[a].src.size() < data[b].src.size();
    return data[a].tgt.size() < data[b].tgt.size();
  });
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t tokens = 0;
  for (auto i : order) {
    const std::size_t n = data[i].src.size() + data[i].tgt.size();
    if (!cur.empty() && tokens + n > token_budget) {
      batches.push_back(std::move(cur));
      cur.clear();
      tokens = 0;
    }
    cur.push_back(i);
    tokens += n;
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  return batches;
}

/// Batch index used at a global step: batch order is reshuffled every epoch
/// from the run seed, so any step can be located without replaying earlier ones.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t batch_count, std::uint64_t seed) : count_(batch_count), seed_(seed) {
    if (count_ == 0) throw ContractError("no batches");
  }

  std::size_t batch_at(std::int64_t step) {
    const auto epoch = static_cast<std::uint64_t>(step) / count_;
    if (!cached_ || epoch != cached_epoch_) {
      order_.resize(count_);
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      Rng rng(derive_seed(seed_, {0xba7c, epoch}));
      rng.shuffle(order_);
      cached_epoch_ = epoch;
      cached_ = true;
    }
    return order_[static_cast<std::uint64_t>(step) % count_];
  }

 private:
  std::size_t count_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::uint64_t cached_epoch_ = 0;
  bool cached_ = false;
};

}  // namespace dtmt
