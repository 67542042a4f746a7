#include "resd/vocab.hpp"

#include <algorithm>
#include <cctype>

#include "resd/error.hpp"

namespace resd {

namespace {

constexpr const char* kPad = "<pad>";
constexpr const char* kBos = "<bos>";
constexpr const char* kEos = "<eos>";
constexpr const char* kUnk = "<unk>";
constexpr const char* kNewline = "<nl>";

bool is_tape_word(std::string_view w) {
  return !w.empty() && std::all_of(w.begin(), w.end(), [](char c) {
    return c == 'R' || c == 'B' || c == 'G' || c == 'Y';
  });
}

std::vector<std::string> dsl_symbols() {
  std::vector<std::string> s = {kPad, kBos, kEos, kUnk, kNewline, "```", ":"};
  for (const char* w : {"START", "NEXT", "PULLER_RB", "PULLER_YG", "END", "[R]",
                        "[B]", "[Y]", "[G]", "[EMPTY]", "NONE", "start", "end"}) {
    s.emplace_back(w);
  }
  for (int i = 0; i < 5; ++i) s.push_back("s" + std::to_string(i));
  for (int i = 0; i < 5; ++i) s.push_back("s" + std::to_string(i) + "_yg");
  for (const char* w : {"R", "B", "G", "Y"}) s.emplace_back(w);
  for (int i = 0; i < 10; ++i) s.push_back(std::to_string(i));
  for (const char* w :
       {"TASK", "PLAYBOOK", "REFLECTION", "PREVIOUS", "FEEDBACK", "SOLUTION",
        "write", "a", "tape", "program", "reads", "or", "else", "is", "and",
        "accept", "reject", "iff", "the", "contains", "examples", "answer",
        "with", "one", "block", "all", "tests", "passed", "response",
        "truncated", "parse", "error", "no", "target", "undeclared",
        "malformed", "near", "loop", "loops", "on", "between", "failing",
        "expected", "got", "although", "never", "declared", "has", "at",
        "without", "closing", "fence", "every", "branch", "must", "be", "node",
        "header", "line", "then", "per", "symbols", "outside", "pattern", "are",
        "skipped", "not", "rejected", "only", "reach", "after", "last",
        "symbol", "of", "been", "read", "when", "empty", "state", "stop"}) {
    s.emplace_back(w);
  }
  return s;
}

}  // namespace

Vocab::Vocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  if (symbols_.empty() || symbols_.size() > kMaxSize) {
    throw Error(ErrorCode::kInvalidArgument, "vocabulary size must be in [1, 512]");
  }
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    if (!index_.emplace(symbols_[i], static_cast<TokenId>(i)).second) {
      throw Error(ErrorCode::kInvalidArgument, "duplicate vocabulary symbol: " + symbols_[i]);
    }
  }
  pad_ = id(kPad);
  bos_ = id(kBos);
  eos_ = id(kEos);
  unk_ = id(kUnk);
  newline_ = id(kNewline);
}

const Vocab& Vocab::dsl() {
  static const Vocab vocab(dsl_symbols());
  return vocab;
}

const std::string& Vocab::symbol(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
    throw Error(ErrorCode::kInvalidArgument, "token id out of range: " + std::to_string(id));
  }
  return symbols_[static_cast<std::size_t>(id)];
}

TokenId Vocab::find(std::string_view symbol) const {
  auto it = index_.find(std::string(symbol));
  return it == index_.end() ? -1 : it->second;
}

TokenId Vocab::id(std::string_view symbol) const {
  const TokenId t = find(symbol);
  if (t < 0) throw Error(ErrorCode::kInvalidArgument, "unknown symbol: " + std::string(symbol));
  return t;
}

void Vocab::encode_word(std::string_view word, std::vector<TokenId>& out) const {
  if (word.empty()) return;
  if (TokenId t = find(word); t >= 0) {
    out.push_back(t);
    return;
  }
  if (word.size() > 1 && word.back() == ':') {
    encode_word(word.substr(0, word.size() - 1), out);
    out.push_back(id(":"));
    return;
  }
  if (is_tape_word(word)) {
    for (char c : word) out.push_back(find(std::string_view(&c, 1)));
    return;
  }
  if (std::all_of(word.begin(), word.end(), [](unsigned char c) { return std::isdigit(c); })) {
    for (char c : word) out.push_back(find(std::string_view(&c, 1)));
    return;
  }
  const char last = word.back();
  if (word.size() > 1 && (last == '.' || last == ',' || last == ';')) {
    encode_word(word.substr(0, word.size() - 1), out);
    return;
  }
  out.push_back(unk_);
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '\n') {
      out.push_back(newline_);
      ++i;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    encode_word(text.substr(i, j - i), out);
    i = j;
  }
  return out;
}

std::string Vocab::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  bool line_start = true;
  for (TokenId t : ids) {
    if (t == eos_) break;
    if (t == bos_ || t == pad_) continue;
    if (t == newline_) {
      out += '\n';
      line_start = true;
      continue;
    }
    const std::string& s = symbol(t);
    if (!line_start && s != ":") out += ' ';
    out += s;
    line_start = false;
  }
  return out;
}

}  // namespace resd
