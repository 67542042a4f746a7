#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "resd/env.hpp"
#include "resd/memory.hpp"

namespace resd::advisor {

enum class FailureCategory {
  kParseErrorUndefinedState,
  kParseErrorSyntax,
  kWrongReject,   // pattern-present tape rejected
  kWrongAccept,   // pattern-absent tape accepted
  kStepLimitLoop,
  kTruncation,    // response hit max_new without a complete program
};

const char* to_string(FailureCategory category);
FailureCategory parse_failure_category(const std::string& name);

// Precedence: parse errors > step limit > wrong accept > wrong reject >
// truncation. AllPassed has no category.
std::optional<FailureCategory> categorize_feedback(const env::EnvFeedback& feedback);

struct Reflection {
  std::string text;
  std::optional<FailureCategory> category;  // none for a successful attempt
  std::vector<mem::Tag> tags;               // one per playbook entry
};

struct ReflectRequest {
  const env::TaskSpec* task = nullptr;
  std::string trajectory;  // decoded response text
  const env::EnvFeedback* feedback = nullptr;
  bool success = false;
  const mem::Playbook* playbook = nullptr;
  // Category of the previous failed attempt on the same prompt key.
  std::optional<FailureCategory> previous_failure;
};

class Advisor {
 public:
  virtual ~Advisor() = default;
  virtual Reflection reflect(const ReflectRequest& request) = 0;
  // Failures only; the reflection must carry a category.
  virtual std::vector<mem::Candidate> curate(const mem::Playbook& playbook,
                                             const Reflection& reflection) = 0;
};

// Deterministic advisor for the tape-FSM task. Reflection text comes from a
// fixed template per category filled with the evidence in the feedback; each
// category has one fixed lesson.
//
// Tagging rule per entry: harmful if its category equals the current failure
// category; helpful if its category equals the previous failure category for
// this prompt and the current attempt no longer shows it; neutral otherwise.
class ScriptedAdvisor final : public Advisor {
 public:
  Reflection reflect(const ReflectRequest& request) override;
  std::vector<mem::Candidate> curate(const mem::Playbook& playbook,
                                     const Reflection& reflection) override;

  static std::string lesson(FailureCategory category);
};

std::vector<mem::Tag> scripted_tags(const mem::Playbook& playbook,
                                    std::optional<FailureCategory> current,
                                    std::optional<FailureCategory> previous);

struct ExternalConfig {
  std::string endpoint;  // e.g. http://127.0.0.1:8000/v1/chat/completions
  std::string model;
  double timeout_seconds = 30.0;
  int max_retries = 3;
  double backoff_seconds = 0.5;  // doubles after every failed attempt
  double temperature = 0.2;
  int max_tokens = 1024;
  // Placeholders: {task} {trajectory} {feedback} {playbook} {reflection}.
  std::string reflect_template;
  std::string curate_template;

  void validate() const;
};

std::string default_reflect_template();
std::string default_curate_template();

std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& values);

// One chat-completion round trip with retries. Throws kAdvisorUnavailable
// once retries are exhausted.
std::string external_request(const ExternalConfig& config, const std::string& rendered_prompt);

// Parses ```REFLECTION, ```TAGS ("<id>: helpful|harmful|neutral") and
// ```LESSONS ("<category> | <text>") blocks. Entries without a tag line are
// neutral; ids not in the playbook are ignored. Throws kAdvisorUnavailable
// when the REFLECTION block is missing.
Reflection parse_reflection_reply(const std::string& reply, const mem::Playbook& playbook);
std::vector<mem::Candidate> parse_lessons(const std::string& reply);

class ExternalAdvisor final : public Advisor {
 public:
  explicit ExternalAdvisor(ExternalConfig config);

  Reflection reflect(const ReflectRequest& request) override;
  std::vector<mem::Candidate> curate(const mem::Playbook& playbook,
                                     const Reflection& reflection) override;

 private:
  ExternalConfig config_;
};

}  // namespace resd::advisor
