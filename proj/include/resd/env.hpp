#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace resd::env {

// Tapes are strings over {R, B, G, Y}.
using Tape = std::string;

bool is_tape_symbol(char c);

enum class NodeKind { kStart, kEnd, kPullerRB, kPullerYG };

inline constexpr int kRejectTarget = -1;

struct Node {
  NodeKind kind = NodeKind::kEnd;
  std::string name;
  // Start uses `next`. Pullers use first/second for (R, B) or (Y, G).
  int next = kRejectTarget;
  int on_first = kRejectTarget;
  int on_second = kRejectTarget;
  int on_empty = kRejectTarget;
};

struct Program {
  std::vector<Node> nodes;
  int start = 0;

  int find(std::string_view name) const;
};

enum class ParseErrorKind { kSyntax, kUndefinedState, kNoCodeBlock };

struct ParseError {
  ParseErrorKind kind = ParseErrorKind::kSyntax;
  std::string message;
  std::string offending;  // token or node name the error is about
  int line = 0;           // 1-based within the program text, 0 when not line-specific
};

using ParseResult = std::variant<Program, ParseError>;

// Parses the line-oriented DSL. Errors are values: unknown keywords,
// malformed lines, duplicate names, missing branches or a missing START are
// syntax errors; targets naming undeclared nodes are reported in source
// order as kUndefinedState.
ParseResult parse_program(std::string_view text);

// Contents of the first ``` fenced block, if any.
std::optional<std::string> extract_code(std::string_view response);

// extract_code + parse_program; a missing block is a kNoCodeBlock error.
ParseResult parse_response(std::string_view response);

enum class Outcome { kAccept, kReject, kStepLimitExceeded };

const char* to_string(Outcome outcome);

struct RunResult {
  Outcome outcome = Outcome::kReject;
  std::size_t steps = 0;
  std::string halt_node;          // node that accepted, rejected or was active at the limit
  char halt_symbol = '\0';        // front symbol at a reject, '\0' for an empty tape
  std::size_t consumed = 0;
  std::vector<std::string> cycle; // nodes visited since the last consumption (step limit only)
};

std::size_t default_step_limit(std::size_t tape_length);

RunResult run_program(const Program& program, std::string_view tape, std::size_t step_limit);
inline RunResult run_program(const Program& program, std::string_view tape) {
  return run_program(program, tape, default_step_limit(tape.size()));
}

// True iff `pattern` (non-empty, over R/B) occurs contiguously in `tape` once
// the G and Y symbols are removed; G and Y never break a match.
bool oracle_contains(std::string_view tape, std::string_view pattern);

struct TestCase {
  Tape tape;
  bool accept = false;

  bool operator==(const TestCase&) const = default;
};

struct TaskSpec {
  std::string id;
  std::string pattern;
  std::vector<TestCase> suite;

  bool operator==(const TaskSpec&) const = default;
};

// Random R/B pattern plus a balanced suite: half the tapes contain the
// pattern at a random offset, half are rejection-sampled to avoid it.
TaskSpec generate_task(std::uint64_t seed, std::size_t pattern_len, std::size_t suite_size,
                       std::size_t max_tape_len, std::string id = {});
// Split `split` of a corpus: task i uses derive_seed(seed, split, i) and id
// "<prefix>-NNNNN".
std::vector<TaskSpec> generate_tasks(std::uint64_t seed, std::uint64_t split, std::size_t n, std::size_t pattern_len,
                                     std::size_t suite_size, std::size_t max_tape_len, const std::string& prefix);
std::vector<TestCase> generate_suite(std::uint64_t seed, const std::string& pattern, std::size_t suite_size,
                                     std::size_t max_tape_len);

inline constexpr std::size_t kMaxFailingCases = 3;

struct FailingCase {
  Tape tape;
  bool expected_accept = false;
  Outcome got = Outcome::kReject;
  std::string halt_node;
  char halt_symbol = '\0';
};

struct LoopReport {
  Tape tape;
  std::vector<std::string> cycle;
};

enum class FeedbackKind { kParseError, kFailingCases, kStepLimit, kAllPassed };

struct EnvFeedback {
  FeedbackKind kind = FeedbackKind::kAllPassed;
  std::optional<ParseError> parse_error;
  std::vector<FailingCase> failing;  // at most kMaxFailingCases, shortest tapes first
  std::optional<LoopReport> loop;    // shortest looping tape
  // Shortest counterexample of each kind over the whole suite.
  std::optional<FailingCase> first_wrong_accept;
  std::optional<FailingCase> first_wrong_reject;
  bool truncated = false;            // response hit the token limit

  // Rendering used as the raw feedback section of teacher contexts.
  std::string render() const;
};

struct Evaluation {
  double reward = 0.0;
  std::size_t passed = 0;
  EnvFeedback feedback;
};

// step_limit 0 selects default_step_limit per tape. Step-limit runs count as
// rejects for scoring.
Evaluation evaluate(const ParseResult& program, const std::vector<TestCase>& suite,
                    std::size_t step_limit = 0);

struct PromptConfig {
  std::size_t shown_examples = 4;
};

// Task statement, e.g. "accept iff the tape contains BRBR".
std::string task_statement(const TaskSpec& task);
std::string render_prompt(const TaskSpec& task, const PromptConfig& config = {});
// Stable key for the task specification (the statement), used by the
// solution buffer and per-prompt attempt history.
std::string prompt_key(const TaskSpec& task);

// Task files: "task <id> <pattern>", one "<tape> accept|reject" line per
// case ("-" is the empty tape), then "end".
void write_tasks(std::ostream& out, const std::vector<TaskSpec>& tasks);
std::vector<TaskSpec> read_tasks(std::istream& in);
void save_tasks(const std::string& path, const std::vector<TaskSpec>& tasks);
std::vector<TaskSpec> load_tasks(const std::string& path);

}  // namespace resd::env
