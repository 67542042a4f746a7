#include "resd/env.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "resd/error.hpp"
#include "resd/rng.hpp"

namespace resd::env {

bool is_tape_symbol(char c) { return c == 'R' || c == 'B' || c == 'G' || c == 'Y'; }

int Program::find(std::string_view name) const {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].name == name) return static_cast<int>(i);
  }
  return kRejectTarget;
}

namespace {

std::vector<std::string> split_words(std::string_view line) {
  std::vector<std::string> words;
  std::istringstream in{std::string(line)};
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

bool is_identifier(std::string_view s) {
  if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  return std::all_of(s.begin(), s.end(),
                     [](unsigned char c) { return std::isalnum(c) || c == '_'; });
}

ParseError syntax(std::string message, std::string offending, int line) {
  return {ParseErrorKind::kSyntax, std::move(message), std::move(offending), line};
}

// Header words with an optional trailing ':' (either glued or separate).
std::optional<std::string> header_name(const std::vector<std::string>& words, bool colon_required) {
  if (words.size() == 2) {
    std::string name = words[1];
    const bool glued = !name.empty() && name.back() == ':';
    if (glued) name.pop_back();
    if (colon_required && !glued) return std::nullopt;
    return name;
  }
  if (words.size() == 3 && words[2] == ":") return words[1];
  return std::nullopt;
}

struct PendingNode {
  Node node;
  int line = 0;
  // Unresolved branch targets by slot.
  std::optional<std::string> next, first, second, empty;
  std::vector<int> slot_lines = std::vector<int>(4, 0);
};

}  // namespace

ParseResult parse_program(std::string_view text) {
  std::vector<PendingNode> pending;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const auto words = split_words(raw);
    if (words.empty()) continue;
    const std::string& head = words[0];

    auto open = [&](NodeKind kind, bool colon_required) -> std::optional<ParseError> {
      const auto name = header_name(words, colon_required);
      if (!name) return syntax("malformed " + head + " header", head, line_no);
      if (!is_identifier(*name) || *name == "NONE") return syntax("invalid node name", *name, line_no);
      PendingNode p;
      p.node.kind = kind;
      p.node.name = *name;
      p.line = line_no;
      pending.push_back(std::move(p));
      return std::nullopt;
    };

    std::optional<ParseError> err;
    if (head == "START") {
      err = open(NodeKind::kStart, true);
    } else if (head == "PULLER_RB") {
      err = open(NodeKind::kPullerRB, true);
    } else if (head == "PULLER_YG") {
      err = open(NodeKind::kPullerYG, true);
    } else if (head == "END") {
      err = open(NodeKind::kEnd, false);
    } else if (head == "NEXT" || head == "[R]" || head == "[B]" || head == "[Y]" ||
               head == "[G]" || head == "[EMPTY]") {
      if (pending.empty()) return syntax("branch line outside a node", head, line_no);
      if (words.size() != 2) return syntax("branch line needs exactly one target", head, line_no);
      PendingNode& cur = pending.back();
      std::optional<std::string>* slot = nullptr;
      int slot_index = 0;
      const NodeKind k = cur.node.kind;
      if (head == "NEXT" && k == NodeKind::kStart) {
        slot = &cur.next;
        slot_index = 0;
      } else if ((head == "[R]" && k == NodeKind::kPullerRB) || (head == "[Y]" && k == NodeKind::kPullerYG)) {
        slot = &cur.first;
        slot_index = 1;
      } else if ((head == "[B]" && k == NodeKind::kPullerRB) || (head == "[G]" && k == NodeKind::kPullerYG)) {
        slot = &cur.second;
        slot_index = 2;
      } else if (head == "[EMPTY]" && (k == NodeKind::kPullerRB || k == NodeKind::kPullerYG)) {
        slot = &cur.empty;
        slot_index = 3;
      } else {
        return syntax(head + " is not a branch of node " + cur.node.name, head, line_no);
      }
      if (slot->has_value()) return syntax("duplicate " + head + " branch in node " + cur.node.name, head, line_no);
      const std::string& target = words[1];
      if (target != "NONE" && !is_identifier(target)) return syntax("invalid branch target", target, line_no);
      *slot = target;
      cur.slot_lines[static_cast<std::size_t>(slot_index)] = line_no;
    } else {
      return syntax("unknown keyword", head, line_no);
    }
    if (err) return *err;
  }

  // Structure.
  Program program;
  int starts = 0;
  for (const auto& p : pending) {
    if (program.find(p.node.name) != kRejectTarget) return syntax("duplicate node name", p.node.name, p.line);
    const NodeKind k = p.node.kind;
    if (k == NodeKind::kStart) {
      ++starts;
      if (!p.next) return syntax("START node " + p.node.name + " has no NEXT line", p.node.name, p.line);
    } else if (k == NodeKind::kPullerRB || k == NodeKind::kPullerYG) {
      const bool rb = k == NodeKind::kPullerRB;
      if (!p.first) return syntax(std::string("node ") + p.node.name + " missing " + (rb ? "[R]" : "[Y]") + " branch", p.node.name, p.line);
      if (!p.second) return syntax(std::string("node ") + p.node.name + " missing " + (rb ? "[B]" : "[G]") + " branch", p.node.name, p.line);
      if (!p.empty) return syntax("node " + p.node.name + " missing [EMPTY] branch", p.node.name, p.line);
    }
    program.nodes.push_back(p.node);
  }
  if (starts == 0) return syntax("program has no START node", "START", 0);
  if (starts > 1) return syntax("program has more than one START node", "START", 0);

  // Target resolution in source order.
  struct Ref {
    int line;
    std::size_t node;
    int slot;
    std::string target;
  };
  std::vector<Ref> refs;
  for (std::size_t i = 0; i < pending.size(); ++i) {
    const auto& p = pending[i];
    const std::optional<std::string>* slots[4] = {&p.next, &p.first, &p.second, &p.empty};
    for (int s = 0; s < 4; ++s) {
      if (slots[s]->has_value()) refs.push_back({p.slot_lines[static_cast<std::size_t>(s)], i, s, **slots[s]});
    }
  }
  std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.line < b.line; });
  for (const auto& r : refs) {
    int target = kRejectTarget;
    if (r.target != "NONE") {
      target = program.find(r.target);
      if (target == kRejectTarget) {
        return ParseError{ParseErrorKind::kUndefinedState, "target " + r.target + " undeclared", r.target, r.line};
      }
    }
    Node& n = program.nodes[r.node];
    switch (r.slot) {
      case 0: n.next = target; break;
      case 1: n.on_first = target; break;
      case 2: n.on_second = target; break;
      default: n.on_empty = target; break;
    }
  }
  for (std::size_t i = 0; i < program.nodes.size(); ++i) {
    if (program.nodes[i].kind == NodeKind::kStart) program.start = static_cast<int>(i);
  }
  return program;
}

std::optional<std::string> extract_code(std::string_view response) {
  const auto open = response.find("```");
  if (open == std::string_view::npos) return std::nullopt;
  const auto body = open + 3;
  const auto close = response.find("```", body);
  if (close == std::string_view::npos) return std::nullopt;
  return std::string(response.substr(body, close - body));
}

ParseResult parse_response(std::string_view response) {
  const auto code = extract_code(response);
  if (!code) return ParseError{ParseErrorKind::kNoCodeBlock, "no fenced program block", "```", 0};
  return parse_program(*code);
}

const char* to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::kAccept: return "accept";
    case Outcome::kReject: return "reject";
    case Outcome::kStepLimitExceeded: return "step_limit";
  }
  return "?";
}

std::size_t default_step_limit(std::size_t tape_length) { return 4 * tape_length + 16; }

RunResult run_program(const Program& program, std::string_view tape, std::size_t step_limit) {
  RunResult r;
  std::size_t pos = 0;
  int node = program.start;
  std::vector<int> since_consume;
  while (true) {
    const Node& n = program.nodes[static_cast<std::size_t>(node)];
    if (n.kind == NodeKind::kEnd) {
      r.outcome = Outcome::kAccept;
      r.halt_node = n.name;
      r.consumed = pos;
      return r;
    }
    if (r.steps == step_limit) {
      r.outcome = Outcome::kStepLimitExceeded;
      r.halt_node = n.name;
      r.consumed = pos;
      for (int v : since_consume) {
        const auto& name = program.nodes[static_cast<std::size_t>(v)].name;
        if (std::find(r.cycle.begin(), r.cycle.end(), name) == r.cycle.end()) r.cycle.push_back(name);
      }
      return r;
    }
    int next = kRejectTarget;
    bool consumed = false;
    if (n.kind == NodeKind::kStart) {
      next = n.next;
    } else {
      const char front = pos < tape.size() ? tape[pos] : '\0';
      const bool rb = n.kind == NodeKind::kPullerRB;
      if (front == (rb ? 'R' : 'Y')) {
        next = n.on_first;
        consumed = true;
      } else if (front == (rb ? 'B' : 'G')) {
        next = n.on_second;
        consumed = true;
      } else {
        next = n.on_empty;
      }
      if (next == kRejectTarget) r.halt_symbol = front;
    }
    ++r.steps;
    if (consumed) {
      ++pos;
      since_consume.clear();
    } else {
      since_consume.push_back(node);
    }
    if (next == kRejectTarget) {
      r.outcome = Outcome::kReject;
      r.halt_node = n.name;
      r.consumed = pos;
      return r;
    }
    node = next;
  }
}

bool oracle_contains(std::string_view tape, std::string_view pattern) {
  if (pattern.empty()) throw Error(ErrorCode::kInvalidArgument, "pattern must be non-empty");
  std::string rb;
  for (char c : tape) {
    if (c == 'R' || c == 'B') rb += c;
  }
  return rb.find(pattern) != std::string::npos;
}

namespace {

std::vector<TestCase> draw_suite(Rng& rng, const std::string& pattern, std::size_t suite_size,
                                 std::size_t max_tape_len) {
  static constexpr char kAll[] = {'R', 'B', 'G', 'Y'};
  const std::size_t plen = pattern.size();
  auto random_tape = [&](std::size_t len) {
    Tape t;
    for (std::size_t i = 0; i < len; ++i) t += kAll[rng.below(4)];
    return t;
  };
  std::vector<TestCase> positives, negatives;
  for (std::size_t i = 0; i < suite_size / 2; ++i) {
    const std::size_t len = plen + rng.below(max_tape_len - plen + 1);
    Tape t = random_tape(len - plen);
    const std::size_t at = rng.below(t.size() + 1);
    t.insert(at, pattern);
    positives.push_back({t, oracle_contains(t, pattern)});
  }
  for (std::size_t i = 0; i < suite_size / 2; ++i) {
    Tape t;
    do {
      t = random_tape(rng.below(max_tape_len + 1));
    } while (oracle_contains(t, pattern));
    negatives.push_back({t, false});
  }
  // Interleave so that any prefix of the suite is roughly balanced.
  std::vector<TestCase> suite;
  for (std::size_t i = 0; i < suite_size / 2; ++i) {
    suite.push_back(positives[i]);
    suite.push_back(negatives[i]);
  }
  return suite;
}

void check_suite_args(std::size_t pattern_len, std::size_t suite_size, std::size_t max_tape_len) {
  if (pattern_len < 2) throw Error(ErrorCode::kInvalidArgument, "pattern_len must be >= 2");
  if (suite_size == 0 || suite_size % 2 != 0) throw Error(ErrorCode::kInvalidArgument, "suite_size must be even and positive");
  if (max_tape_len < pattern_len) throw Error(ErrorCode::kInvalidArgument, "max_tape_len must be >= pattern_len");
}

}  // namespace

TaskSpec generate_task(std::uint64_t seed, std::size_t pattern_len, std::size_t suite_size,
                       std::size_t max_tape_len, std::string id) {
  check_suite_args(pattern_len, suite_size, max_tape_len);
  Rng rng(derive_seed(seed, 0x7461736bULL));
  TaskSpec task;
  if (id.empty()) {
    std::ostringstream os;
    os << "task-" << std::hex << seed;
    id = os.str();
  }
  task.id = std::move(id);
  for (std::size_t i = 0; i < pattern_len; ++i) task.pattern += rng.below(2) ? 'B' : 'R';
  task.suite = draw_suite(rng, task.pattern, suite_size, max_tape_len);
  return task;
}

std::vector<TestCase> generate_suite(std::uint64_t seed, const std::string& pattern, std::size_t suite_size,
                                     std::size_t max_tape_len) {
  check_suite_args(pattern.size(), suite_size, max_tape_len);
  for (char c : pattern) {
    if (c != 'R' && c != 'B') throw Error(ErrorCode::kInvalidArgument, "pattern must be over R and B");
  }
  Rng rng(derive_seed(seed, 0x7375697465ULL));
  return draw_suite(rng, pattern, suite_size, max_tape_len);
}

namespace {

std::string show_tape(const Tape& t) { return t.empty() ? "empty" : t; }

}  // namespace

std::string EnvFeedback::render() const {
  std::ostringstream os;
  switch (kind) {
    case FeedbackKind::kAllPassed:
      os << "all tests passed";
      break;
    case FeedbackKind::kParseError:
      if (parse_error && parse_error->kind == ParseErrorKind::kNoCodeBlock) {
        os << (truncated ? "response truncated" : "parse error : no program block");
      } else if (parse_error && parse_error->kind == ParseErrorKind::kUndefinedState) {
        os << "parse error : target " << parse_error->offending << " undeclared";
      } else if (parse_error) {
        os << "parse error : malformed near " << parse_error->offending;
      }
      break;
    case FeedbackKind::kStepLimit:
    case FeedbackKind::kFailingCases:
      if (loop) {
        os << "loop on tape " << show_tape(loop->tape) << " between";
        for (const auto& s : loop->cycle) os << ' ' << s;
        os << '\n';
      }
      os << "failing :";
      for (std::size_t i = 0; i < failing.size(); ++i) {
        const auto& f = failing[i];
        os << (i ? " ;" : "") << ' ' << show_tape(f.tape) << " expected "
           << (f.expected_accept ? "accept" : "reject") << " got "
           << (f.got == Outcome::kStepLimitExceeded ? "loop" : to_string(f.got));
      }
      break;
  }
  return os.str();
}

Evaluation evaluate(const ParseResult& parsed, const std::vector<TestCase>& suite, std::size_t step_limit) {
  Evaluation ev;
  if (const auto* err = std::get_if<ParseError>(&parsed)) {
    ev.feedback.kind = FeedbackKind::kParseError;
    ev.feedback.parse_error = *err;
    return ev;
  }
  const Program& program = std::get<Program>(parsed);
  std::vector<std::size_t> failing_idx, loop_idx;
  std::vector<RunResult> runs;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    const auto& tc = suite[i];
    runs.push_back(run_program(program, tc.tape, step_limit ? step_limit : default_step_limit(tc.tape.size())));
    const bool accepted = runs.back().outcome == Outcome::kAccept;
    if (accepted == tc.accept) {
      ++ev.passed;
    } else {
      failing_idx.push_back(i);
    }
    if (runs.back().outcome == Outcome::kStepLimitExceeded) loop_idx.push_back(i);
  }
  ev.reward = suite.empty() ? 0.0 : static_cast<double>(ev.passed) / static_cast<double>(suite.size());

  auto shorter = [&](std::size_t a, std::size_t b) {
    const auto& ta = suite[a].tape;
    const auto& tb = suite[b].tape;
    if (ta.size() != tb.size()) return ta.size() < tb.size();
    if (ta != tb) return ta < tb;
    return a < b;
  };
  std::sort(failing_idx.begin(), failing_idx.end(), shorter);
  std::sort(loop_idx.begin(), loop_idx.end(), shorter);
  for (std::size_t k = 0; k < failing_idx.size() && k < kMaxFailingCases; ++k) {
    const std::size_t i = failing_idx[k];
    ev.feedback.failing.push_back({suite[i].tape, suite[i].accept, runs[i].outcome, runs[i].halt_node, runs[i].halt_symbol});
  }
  for (std::size_t i : failing_idx) {
    FailingCase fc{suite[i].tape, suite[i].accept, runs[i].outcome, runs[i].halt_node, runs[i].halt_symbol};
    auto& slot = suite[i].accept ? ev.feedback.first_wrong_reject : ev.feedback.first_wrong_accept;
    if (!slot) slot = std::move(fc);
  }
  if (!loop_idx.empty()) {
    ev.feedback.loop = LoopReport{suite[loop_idx.front()].tape, runs[loop_idx.front()].cycle};
    ev.feedback.kind = FeedbackKind::kStepLimit;
  } else if (!failing_idx.empty()) {
    ev.feedback.kind = FeedbackKind::kFailingCases;
  } else {
    ev.feedback.kind = FeedbackKind::kAllPassed;
  }
  return ev;
}

std::vector<TaskSpec> generate_tasks(std::uint64_t seed, std::uint64_t split, std::size_t n, std::size_t pattern_len,
                                     std::size_t suite_size, std::size_t max_tape_len, const std::string& prefix) {
  std::vector<TaskSpec> tasks;
  tasks.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::ostringstream id;
    id << prefix << '-';
    id.width(5);
    id.fill('0');
    id << i;
    tasks.push_back(generate_task(derive_seed(seed, split, i), pattern_len, suite_size, max_tape_len, id.str()));
  }
  return tasks;
}

std::string task_statement(const TaskSpec& task) { return "accept iff the tape contains " + task.pattern; }

std::string render_prompt(const TaskSpec& task, const PromptConfig& config) {
  std::ostringstream os;
  os << "TASK write a tape program\n"
     << "PULLER_RB reads [R] or [B] else [EMPTY]\n"
     << "PULLER_YG reads [Y] or [G] else [EMPTY]\n"
     << "NONE is reject and END is accept\n"
     << "accept iff the tape has R at 0\n"
     << "answer with one ``` block\n"
     << "```\nSTART start :\nNEXT s0\n"
     << "PULLER_RB s0 :\n[R] end\n[B] NONE\n[EMPTY] s0_yg\n"
     << "PULLER_YG s0_yg :\n[Y] NONE\n[G] NONE\n[EMPTY] NONE\n"
     << "END end\n```\n"
     << task_statement(task) << '\n'
     << "examples :\n";
  // Balanced: alternate accepting and rejecting cases in suite order.
  std::vector<const TestCase*> pos, neg;
  for (const auto& tc : task.suite) (tc.accept ? pos : neg).push_back(&tc);
  std::size_t shown = 0;
  for (std::size_t i = 0; shown < config.shown_examples && (i < pos.size() || i < neg.size()); ++i) {
    for (const auto* list : {&pos, &neg}) {
      if (i < list->size() && shown < config.shown_examples) {
        const auto* tc = (*list)[i];
        os << show_tape(tc->tape) << ' ' << (tc->accept ? "accept" : "reject") << '\n';
        ++shown;
      }
    }
  }
  os << "answer with one ``` block\n";
  return os.str();
}

std::string prompt_key(const TaskSpec& task) {
  // FNV-1a over the statement.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : task_statement(task)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

void write_tasks(std::ostream& out, const std::vector<TaskSpec>& tasks) {
  out << "# resd tasks v1\n";
  for (const auto& t : tasks) {
    out << "task " << t.id << ' ' << t.pattern << '\n';
    for (const auto& tc : t.suite) out << (tc.tape.empty() ? "-" : tc.tape) << ' ' << (tc.accept ? "accept" : "reject") << '\n';
    out << "end\n";
  }
}

std::vector<TaskSpec> read_tasks(std::istream& in) {
  std::vector<TaskSpec> tasks;
  std::string line;
  int line_no = 0;
  bool open = false;
  auto fail = [&](const std::string& why) {
    throw Error(ErrorCode::kFormat, "task file line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto words = split_words(line);
    if (words.empty() || words[0][0] == '#') continue;
    if (words[0] == "task") {
      if (open) fail("task record not terminated");
      if (words.size() != 3) fail("expected 'task <id> <pattern>'");
      const std::string& pattern = words[2];
      if (pattern.empty() || !std::all_of(pattern.begin(), pattern.end(), is_tape_symbol)) fail("bad pattern");
      tasks.push_back({words[1], pattern, {}});
      open = true;
    } else if (words[0] == "end") {
      if (!open) fail("'end' outside a task record");
      open = false;
    } else {
      if (!open) fail("test case outside a task record");
      if (words.size() != 2 || (words[1] != "accept" && words[1] != "reject")) fail("expected '<tape> accept|reject'");
      Tape tape = words[0] == "-" ? "" : words[0];
      if (!std::all_of(tape.begin(), tape.end(), is_tape_symbol)) fail("bad tape symbol");
      tasks.back().suite.push_back({tape, words[1] == "accept"});
    }
  }
  if (open) fail("task record not terminated at end of file");
  return tasks;
}

void save_tasks(const std::string& path, const std::vector<TaskSpec>& tasks) {
  const auto parent = std::filesystem::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) std::filesystem::create_directories(parent, ec);
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot open for writing: " + path);
  write_tasks(out, tasks);
}

std::vector<TaskSpec> load_tasks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open: " + path);
  return read_tasks(in);
}

}  // namespace resd::env
