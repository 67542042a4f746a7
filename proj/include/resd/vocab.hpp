#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace resd {

using TokenId = std::int32_t;

// Fixed word-level vocabulary. Words made only of tape letters (R, B, G, Y)
// are split into one token per letter; anything not in the table maps to
// <unk>.
class Vocab {
 public:
  static constexpr std::size_t kMaxSize = 512;

  explicit Vocab(std::vector<std::string> symbols);

  // The vocabulary for the tape-FSM task: DSL keywords, node names, tape
  // symbols, digits, section headers and the prose used by prompts,
  // feedback and lessons.
  static const Vocab& dsl();

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(TokenId id) const;
  // -1 when absent.
  TokenId find(std::string_view symbol) const;
  TokenId id(std::string_view symbol) const;  // throws when absent

  TokenId pad() const { return pad_; }
  TokenId bos() const { return bos_; }
  TokenId eos() const { return eos_; }
  TokenId unk() const { return unk_; }
  TokenId newline() const { return newline_; }

  std::vector<TokenId> encode(std::string_view text) const;
  // Stops at the first <eos>; <bos>/<pad> are skipped.
  std::string decode(const std::vector<TokenId>& ids) const;

 private:
  void encode_word(std::string_view word, std::vector<TokenId>& out) const;

  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId pad_ = 0, bos_ = 0, eos_ = 0, unk_ = 0, newline_ = 0;
};

}  // namespace resd
