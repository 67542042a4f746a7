#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "resd/env.hpp"
#include "resd/error.hpp"
#include "resd/vocab.hpp"
#include "test_util.hpp"

using namespace resd;
using namespace resd::env;

namespace {

Program must_parse(const std::string& text) {
  auto r = parse_program(text);
  if (auto* e = std::get_if<ParseError>(&r)) {
    ADD_FAILURE() << "parse failed: " << e->message << " near " << e->offending;
    return {};
  }
  return std::get<Program>(r);
}

// Every tape over {R,B,G,Y} up to max_len, shortest first.
std::vector<std::string> all_tapes(std::size_t max_len) {
  std::vector<std::string> out{""};
  std::vector<std::string> layer{""};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::string> next;
    for (const auto& t : layer) {
      for (char c : {'R', 'B', 'G', 'Y'}) next.push_back(t + c);
    }
    out.insert(out.end(), next.begin(), next.end());
    layer = std::move(next);
  }
  return out;
}

// Independent containment check: brute force over every pair of cut points
// of the filtered tape.
bool brute_contains(const std::string& tape, const std::string& pattern) {
  std::string rb;
  for (char c : tape) {
    if (c == 'R' || c == 'B') rb += c;
  }
  for (std::size_t i = 0; i + pattern.size() <= rb.size(); ++i) {
    bool ok = true;
    for (std::size_t j = 0; j < pattern.size(); ++j) ok = ok && rb[i + j] == pattern[j];
    if (ok) return true;
  }
  return false;
}

}  // namespace

TEST(Dsl, MinimalProgram) {
  const auto p = must_parse("START start:\n  NEXT s0\nPULLER_RB s0:\n  [R] end\n  [B] NONE\n  [EMPTY] NONE\nEND end\n");
  ASSERT_EQ(p.nodes.size(), 3u);
  EXPECT_EQ(run_program(p, "R").outcome, Outcome::kAccept);
  EXPECT_EQ(run_program(p, "B").outcome, Outcome::kReject);
  EXPECT_EQ(run_program(p, "").outcome, Outcome::kReject);
  EXPECT_EQ(run_program(p, "GR").outcome, Outcome::kReject);
}

TEST(Dsl, SpacedColonAndTokenizedFormParseAlike) {
  const auto a = must_parse("START start :\nNEXT end\nEND end\n");
  const auto b = must_parse("START start:\n    NEXT end\nEND end");
  EXPECT_EQ(a.nodes.size(), b.nodes.size());
  EXPECT_EQ(run_program(a, "RB").outcome, Outcome::kAccept);
}

TEST(Dsl, EmptyBranchDoesNotConsume) {
  // Y at the front of s0 goes to the YG node, which then reads it.
  const auto p = must_parse(
      "START start:\nNEXT s0\nPULLER_RB s0:\n[R] end\n[B] NONE\n[EMPTY] y\n"
      "PULLER_YG y:\n[Y] s0\n[G] NONE\n[EMPTY] NONE\nEND end\n");
  const auto r = run_program(p, "YR");
  EXPECT_EQ(r.outcome, Outcome::kAccept);
  EXPECT_EQ(r.consumed, 2u);
}

TEST(Dsl, SyntaxErrors) {
  auto kind = [](const std::string& text) {
    auto r = parse_program(text);
    return std::holds_alternative<ParseError>(r) ? std::get<ParseError>(r).kind : ParseErrorKind::kNoCodeBlock;
  };
  EXPECT_EQ(kind("START start:\nNEXT end\nFOO x\nEND end\n"), ParseErrorKind::kSyntax);
  EXPECT_EQ(kind("PULLER_RB s0:\n[R] end\n[B] NONE\n[EMPTY] NONE\nEND end\n"), ParseErrorKind::kSyntax);  // no START
  EXPECT_EQ(kind("START start:\nNEXT s0\nPULLER_RB s0:\n[R] end\n[EMPTY] NONE\nEND end\n"), ParseErrorKind::kSyntax);
  EXPECT_EQ(kind("START start:\nNEXT s0\nPULLER_RB s0:\n[Y] end\n[B] NONE\n[EMPTY] NONE\nEND end\n"), ParseErrorKind::kSyntax);
  EXPECT_EQ(kind("START a:\nNEXT a\nEND a\n"), ParseErrorKind::kSyntax);  // duplicate name
  EXPECT_EQ(kind("START start:\nNEXT ghost\nEND end\n"), ParseErrorKind::kUndefinedState);
}

TEST(Dsl, ExtractCode) {
  EXPECT_EQ(extract_code("x ```\nA\n``` y").value(), "\nA\n");
  EXPECT_FALSE(extract_code("```\nA\n").has_value());
  const auto r = parse_response("no block here");
  ASSERT_TRUE(std::holds_alternative<ParseError>(r));
  EXPECT_EQ(std::get<ParseError>(r).kind, ParseErrorKind::kNoCodeBlock);
}

TEST(Dsl, StepLimitReportsCycle) {
  const auto p = must_parse(
      "START start:\nNEXT a\nPULLER_RB a:\n[R] a\n[B] a\n[EMPTY] b\n"
      "PULLER_YG b:\n[Y] a\n[G] a\n[EMPTY] a\nEND end\n");
  const auto r = run_program(p, "R");
  EXPECT_EQ(r.outcome, Outcome::kStepLimitExceeded);
  EXPECT_EQ(r.steps, default_step_limit(1));
  EXPECT_FALSE(r.cycle.empty());
  EXPECT_EQ(default_step_limit(8), 48u);
}

TEST(Oracle, MatchesBruteForceOnAllShortTapes) {
  for (const std::string pattern : {"BRBR", "RR", "BRB", "RBB"}) {
    for (const auto& t : all_tapes(6)) {
      ASSERT_EQ(oracle_contains(t, pattern), brute_contains(t, pattern)) << t << " " << pattern;
    }
  }
  EXPECT_TRUE(oracle_contains("GRBRBRY", "BRBR"));
  EXPECT_FALSE(oracle_contains("BRGBY", "BRBR"));
}

// Golden listings of the four case-study programs.
class Golden : public ::testing::Test {
 protected:
  static std::string listing(int step) { return read_text(data_path("dsl/step" + std::to_string(step) + ".dsl")); }
};

TEST_F(Golden, Step45NamesState0) {
  const auto r = parse_program(listing(45));
  ASSERT_TRUE(std::holds_alternative<ParseError>(r));
  const auto& e = std::get<ParseError>(r);
  EXPECT_EQ(e.kind, ParseErrorKind::kUndefinedState);
  EXPECT_EQ(e.offending, "state0");
  EXPECT_DOUBLE_EQ(evaluate(r, generate_suite(0, "BRBR", 50, 8)).reward, 0.0);
}

TEST_F(Golden, Step46RejectsLeadingForeignSymbol) {
  const auto p = must_parse(listing(46));
  EXPECT_EQ(run_program(p, "GBRBR").outcome, Outcome::kReject);
  EXPECT_EQ(run_program(p, "GGYYYBBRBR").outcome, Outcome::kReject);
  EXPECT_EQ(run_program(p, "BRBR").outcome, Outcome::kAccept);
}

TEST_F(Golden, Step48AgreesWithOracleOnEveryTapeUpTo8) {
  const auto p = must_parse(listing(48));
  const auto tapes = all_tapes(8);
  ASSERT_EQ(tapes.size(), 87381u);
  std::size_t agree = 0;
  for (const auto& t : tapes) {
    agree += (run_program(p, t).outcome == Outcome::kAccept) == oracle_contains(t, "BRBR");
  }
  EXPECT_EQ(agree, tapes.size());
}

TEST_F(Golden, Step47NeverLoopsUnderThisSemantics) {
  // The only [EMPTY] edge out of the YG node goes to NONE, so no cycle can
  // avoid consuming a symbol.
  const auto p = must_parse(listing(47));
  std::size_t loops = 0;
  for (const auto& t : all_tapes(6)) loops += run_program(p, t).outcome == Outcome::kStepLimitExceeded;
  EXPECT_EQ(loops, 0u);
}

TEST_F(Golden, RewardOrderingOnFixedSuite) {
  const auto suite = generate_suite(0, "BRBR", 50, 8);
  double acc[4];
  for (int i = 0; i < 4; ++i) acc[i] = evaluate(parse_program(listing(45 + i)), suite).reward;
  EXPECT_EQ(acc[0], 0.0);
  EXPECT_LT(acc[0], acc[1]);
  EXPECT_LT(acc[1], acc[2]);
  EXPECT_LT(acc[2], acc[3]);
  EXPECT_EQ(acc[3], 1.0);
}

TEST(Evaluate, FlippedLabelsGiveSevenTenths) {
  const auto p = must_parse(read_text(data_path("dsl/step48.dsl")));
  auto suite = generate_suite(3, "BRBR", 10, 8);
  for (int i = 0; i < 3; ++i) suite[i].accept = !suite[i].accept;
  const auto e = evaluate(p, suite);
  EXPECT_DOUBLE_EQ(e.reward, 0.7);
  EXPECT_EQ(e.passed, 7u);
  EXPECT_EQ(e.feedback.kind, FeedbackKind::kFailingCases);
  EXPECT_EQ(e.feedback.failing.size(), kMaxFailingCases);
}

TEST(Evaluate, FeedbackRendering) {
  const auto undeclared = evaluate(parse_program("START start:\nNEXT ghost\nEND end\n"), {{"R", true}});
  EXPECT_EQ(undeclared.feedback.render(), "parse error : target ghost undeclared");
  const auto p = must_parse("START start:\nNEXT end\nEND end\n");
  const auto e = evaluate(p, {{"B", false}, {"R", true}});
  EXPECT_EQ(e.feedback.render(), "failing : B expected reject got accept");
  ASSERT_TRUE(e.feedback.first_wrong_accept.has_value());
  EXPECT_FALSE(e.feedback.first_wrong_reject.has_value());
}

TEST(Generator, SuitesAreBalancedAndLabelledByOracle) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto t = generate_task(s, 3, 20, 10);
    ASSERT_EQ(t.pattern.size(), 3u);
    ASSERT_EQ(t.suite.size(), 20u);
    std::size_t pos = 0;
    for (const auto& tc : t.suite) {
      ASSERT_EQ(tc.accept, oracle_contains(tc.tape, t.pattern));
      ASSERT_LE(tc.tape.size(), 10u);
      pos += tc.accept;
    }
    EXPECT_EQ(pos, 10u);
  }
  EXPECT_EQ(generate_task(7, 4, 10, 8), generate_task(7, 4, 10, 8));
  EXPECT_THROW(generate_task(1, 3, 7, 10), Error);
}

TEST(Prompt, DeterministicNamesPatternAndFitsBudget) {
  const auto& v = Vocab::dsl();
  std::size_t longest = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const auto t = generate_task(s, 3 + s % 2, 20, 10);
    const std::string p = render_prompt(t);
    ASSERT_EQ(p, render_prompt(t));
    ASSERT_NE(p.find("accept iff the tape contains " + t.pattern), std::string::npos);
    const auto ids = v.encode(p);
    for (auto id : ids) ASSERT_NE(id, v.unk()) << p;
    longest = std::max(longest, ids.size());
  }
  EXPECT_LE(longest, 200u);
}

TEST(TaskFile, RoundTrip) {
  std::vector<TaskSpec> tasks;
  for (std::uint64_t s = 0; s < 5; ++s) tasks.push_back(generate_task(s, 3, 6, 6, "t" + std::to_string(s)));
  tasks[0].suite.push_back({"", false});
  std::stringstream ss;
  write_tasks(ss, tasks);
  EXPECT_EQ(read_tasks(ss), tasks);
  std::stringstream bad("task a RBR\nRRQ accept\nend\n");
  EXPECT_THROW(read_tasks(bad), Error);
}
