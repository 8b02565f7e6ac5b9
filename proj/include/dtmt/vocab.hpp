#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dtmt/tensor.hpp"

namespace dtmt {

using TokenId = std::size_t;
using Sentence = std::vector<TokenId>;

/// Token <-> index bijection with fixed reserved slots.
class Vocabulary {
 public:
  static constexpr TokenId pad = 0;
  static constexpr TokenId bos = 1;
  static constexpr TokenId eos = 2;
  static constexpr TokenId unk = 3;
  static constexpr std::size_t reserved_count = 4;

  static const std::vector<std::string>& reserved_tokens() {
    static const std::vector<std::string> r{"<pad>", "<s>", "</s>", "<unk>"};
    return r;
  }

  Vocabulary() {
    for (const auto& t : reserved_tokens()) push(t);
  }

  /// Reserved tokens followed by `tokens` in order; duplicates are an error.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    for (const auto& t : tokens) {
      if (v.index_.count(t)) throw DataError("duplicate vocabulary token '" + t + "'");
      v.push(t);
    }
    return v;
  }

  /// One token per line; the first lines must be the reserved tokens in order.
  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary file '" + path + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
    const auto& res = reserved_tokens();
    if (lines.size() < res.size()) throw DataError("vocabulary file '" + path + "' is missing reserved tokens");
    for (std::size_t i = 0; i < res.size(); ++i) {
      if (lines[i] != res[i]) {
        throw DataError(path + ":" + std::to_string(i + 1) + ": expected reserved token '" + res[i] + "', found '" +
                        lines[i] + "'");
      }
    }
    return from_tokens(std::vector<std::string>(lines.begin() + static_cast<std::ptrdiff_t>(res.size()), lines.end()));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary file '" + path + "'");
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
    return tokens_[id];
  }
  TokenId id(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    return it == index_.end() ? unk : it->second;
  }
  bool contains(std::string_view tok) const { return index_.count(std::string(tok)) > 0; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  /// Whitespace-tokenised text to ids (no bos/eos added).
  Sentence encode(std::string_view text) const {
    Sentence out;
    std::istringstream is{std::string(text)};
    std::string tok;
    while (is >> tok) out.push_back(id(tok));
    return out;
  }

  /// Ids to text, stopping at eos and skipping pad/bos.
  std::string decode(const Sentence& ids) const {
    std::string out;
    for (auto i : ids) {
      if (i == eos) break;
      if (i == pad || i == bos) continue;
      if (!out.empty()) out += ' ';
      out += token(i);
    }
    return out;
  }

  /// FNV-1a over the newline-joined token list.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens_) {
      for (unsigned char c : t) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
      h ^= static_cast<unsigned char>('\n');
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  void push(const std::string& t) {
    index_.emplace(t, tokens_.size());
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace dtmt
