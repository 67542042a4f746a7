#include "resd/advisor.hpp"

#include <chrono>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "resd/error.hpp"

namespace resd::advisor {

namespace {

constexpr std::pair<FailureCategory, const char*> kCategoryNames[] = {
    {FailureCategory::kParseErrorUndefinedState, "ParseErrorUndefinedState"},
    {FailureCategory::kParseErrorSyntax, "ParseErrorSyntax"},
    {FailureCategory::kWrongReject, "WrongReject"},
    {FailureCategory::kWrongAccept, "WrongAccept"},
    {FailureCategory::kStepLimitLoop, "StepLimitLoop"},
    {FailureCategory::kTruncation, "Truncation"},
};

std::string show_tape(const std::string& t) { return t.empty() ? "empty" : t; }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

const char* to_string(FailureCategory category) {
  for (const auto& [c, name] : kCategoryNames) {
    if (c == category) return name;
  }
  return "?";
}

FailureCategory parse_failure_category(const std::string& name) {
  for (const auto& [c, n] : kCategoryNames) {
    if (name == n) return c;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown failure category: " + name);
}

std::optional<FailureCategory> categorize_feedback(const env::EnvFeedback& feedback) {
  using env::FeedbackKind;
  using env::ParseErrorKind;
  switch (feedback.kind) {
    case FeedbackKind::kAllPassed:
      return std::nullopt;
    case FeedbackKind::kParseError:
      if (!feedback.parse_error) return FailureCategory::kParseErrorSyntax;
      switch (feedback.parse_error->kind) {
        case ParseErrorKind::kUndefinedState:
          return FailureCategory::kParseErrorUndefinedState;
        case ParseErrorKind::kNoCodeBlock:
          return feedback.truncated ? FailureCategory::kTruncation : FailureCategory::kParseErrorSyntax;
        case ParseErrorKind::kSyntax:
          return FailureCategory::kParseErrorSyntax;
      }
      return FailureCategory::kParseErrorSyntax;
    case FeedbackKind::kStepLimit:
      return FailureCategory::kStepLimitLoop;
    case FeedbackKind::kFailingCases:
      if (feedback.first_wrong_accept) return FailureCategory::kWrongAccept;
      if (feedback.first_wrong_reject) return FailureCategory::kWrongReject;
      if (!feedback.failing.empty()) {
        return feedback.failing.front().expected_accept ? FailureCategory::kWrongReject
                                                        : FailureCategory::kWrongAccept;
      }
      return feedback.truncated ? FailureCategory::kTruncation : FailureCategory::kWrongReject;
  }
  return std::nullopt;
}

std::vector<mem::Tag> scripted_tags(const mem::Playbook& playbook, std::optional<FailureCategory> current,
                                    std::optional<FailureCategory> previous) {
  std::vector<mem::Tag> tags;
  tags.reserve(playbook.entries.size());
  const std::string cur = current ? to_string(*current) : "";
  const std::string prev = previous ? to_string(*previous) : "";
  for (const auto& e : playbook.entries) {
    mem::TagLabel label = mem::TagLabel::kNeutral;
    if (current && e.category == cur) {
      label = mem::TagLabel::kHarmful;
    } else if (previous && e.category == prev && (!current || *current != *previous)) {
      label = mem::TagLabel::kHelpful;
    }
    tags.push_back({e.id, label});
  }
  return tags;
}

Reflection ScriptedAdvisor::reflect(const ReflectRequest& request) {
  if (!request.feedback || !request.playbook) {
    throw Error(ErrorCode::kInvalidArgument, "reflect needs feedback and a playbook");
  }
  const env::EnvFeedback& fb = *request.feedback;
  Reflection r;
  r.category = request.success ? std::nullopt : categorize_feedback(fb);
  r.tags = scripted_tags(*request.playbook, r.category, request.previous_failure);
  if (!r.category) return r;

  const std::string pattern = request.task ? request.task->pattern : std::string();
  std::ostringstream os;
  switch (*r.category) {
    case FailureCategory::kParseErrorUndefinedState: {
      const std::string name = fb.parse_error ? fb.parse_error->offending : "?";
      os << "the target " << name << " is never declared";
      break;
    }
    case FailureCategory::kParseErrorSyntax:
      if (fb.parse_error && fb.parse_error->kind == env::ParseErrorKind::kNoCodeBlock) {
        os << "the response has no program block";
      } else {
        os << "the program is malformed near " << (fb.parse_error ? fb.parse_error->offending : "?");
      }
      break;
    case FailureCategory::kStepLimitLoop:
      os << "the program loops on tape " << (fb.loop ? show_tape(fb.loop->tape) : "?") << " between";
      if (fb.loop) {
        for (const auto& s : fb.loop->cycle) os << ' ' << s;
      }
      break;
    case FailureCategory::kWrongAccept: {
      const auto& c = fb.first_wrong_accept;
      os << "the program got accept on " << (c ? show_tape(c->tape) : "?") << " at " << (c ? c->halt_node : "?")
         << " although the tape never contains " << pattern;
      break;
    }
    case FailureCategory::kWrongReject: {
      const auto& c = fb.first_wrong_reject;
      os << "the program got reject on " << (c ? show_tape(c->tape) : "?") << " at " << (c ? c->halt_node : "?")
         << " although the tape contains " << pattern;
      break;
    }
    case FailureCategory::kTruncation:
      os << "the response is truncated without closing fence";
      break;
  }
  r.text = os.str();
  return r;
}

// Program lines only use the node names of the prompt's example program.
std::string ScriptedAdvisor::lesson(FailureCategory category) {
  switch (category) {
    case FailureCategory::kParseErrorUndefinedState:
      return "every branch target must be a declared node or NONE";
    case FailureCategory::kParseErrorSyntax:
      return "every node is a header line then one branch per line";
    case FailureCategory::kWrongReject:
      return "symbols outside the pattern are skipped not rejected :\n"
             "```\nSTART start :\nNEXT s0\n"
             "PULLER_RB s0 :\n[R] end\n[B] s0\n[EMPTY] s0_yg\n"
             "PULLER_YG s0_yg :\n[Y] s0\n[G] s0\n[EMPTY] NONE\n"
             "END end\n```";
    case FailureCategory::kWrongAccept:
      return "only reach END after the last symbol of the pattern has been read :\n"
             "```\nSTART start :\nNEXT s0\n"
             "PULLER_RB s0 :\n[R] s0\n[B] end\n[EMPTY] s0_yg\n"
             "PULLER_YG s0_yg :\n[Y] s0\n[G] s0\n[EMPTY] NONE\n"
             "END end\n```";
    case FailureCategory::kStepLimitLoop:
      return "when the tape is empty at a state the program must reject";
    case FailureCategory::kTruncation:
      return "answer with one block and stop after the closing fence";
  }
  return {};
}

std::vector<mem::Candidate> ScriptedAdvisor::curate(const mem::Playbook&, const Reflection& reflection) {
  if (!reflection.category) {
    throw Error(ErrorCode::kInvalidArgument, "curate needs a failure reflection");
  }
  return {{lesson(*reflection.category), to_string(*reflection.category)}};
}

// External advisor.

void ExternalConfig::validate() const {
  if (endpoint.empty()) throw Error(ErrorCode::kConfig, "advisor_endpoint: external advisor requires an endpoint");
  if (endpoint.rfind("http://", 0) != 0 && endpoint.rfind("https://", 0) != 0) {
    throw Error(ErrorCode::kConfig, "advisor_endpoint: must start with http:// or https://");
  }
  if (!(timeout_seconds > 0.0)) throw Error(ErrorCode::kConfig, "advisor_timeout: must be positive");
  if (max_retries < 0) throw Error(ErrorCode::kConfig, "advisor_max_retries: must be >= 0");
  if (backoff_seconds < 0.0) throw Error(ErrorCode::kConfig, "advisor_backoff: must be >= 0");
}

std::string default_reflect_template() {
  return R"(You review attempts at a tape-machine programming task.

Task:
{task}

Attempt:
{trajectory}

Environment feedback:
{feedback}

Current playbook (id: text):
{playbook}

Explain which decision in the attempt caused the feedback, then label every
playbook entry by whether it helped or misled this attempt. Reply with three
fenced blocks:

```REFLECTION
<one or two sentences>
```
```TAGS
<entry id>: helpful|harmful|neutral
```
```LESSONS
<category> | <reusable lesson>
```
Categories: ParseErrorUndefinedState, ParseErrorSyntax, WrongReject,
WrongAccept, StepLimitLoop, Truncation.
)";
}

std::string default_curate_template() {
  return R"(You maintain a playbook of short reusable lessons for a tape-machine
programming task.

Current playbook (id: text):
{playbook}

New reflection:
{reflection}

Propose lessons that are not already in the playbook. Reply with one fenced
block, one lesson per line:

```LESSONS
<category> | <lesson>
```
Categories: ParseErrorUndefinedState, ParseErrorSyntax, WrongReject,
WrongAccept, StepLimitLoop, Truncation.
)";
}

std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      if (close != std::string::npos) {
        auto it = values.find(tmpl.substr(i + 1, close - i - 1));
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i++];
  }
  return out;
}

namespace {

struct Url {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

Url split_url(const std::string& endpoint) {
  const auto scheme_end = endpoint.find("://");
  const auto path_start = endpoint.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  if (path_start == std::string::npos) return {endpoint, "/"};
  return {endpoint.substr(0, path_start), endpoint.substr(path_start)};
}

// Body of the first fenced block whose info string is `label`.
std::optional<std::string> fenced_block(const std::string& reply, const std::string& label) {
  std::istringstream in(reply);
  std::string line;
  bool inside = false;
  std::string body;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (!inside) {
      if (t == "```" + label) inside = true;
      continue;
    }
    if (t.rfind("```", 0) == 0) return body;
    body += line;
    body += '\n';
  }
  return inside ? std::optional<std::string>(body) : std::nullopt;
}

std::string playbook_listing(const mem::Playbook& playbook) {
  std::ostringstream os;
  for (const auto& e : playbook.entries) os << e.id << ": [" << e.category << "] " << e.text << '\n';
  return playbook.entries.empty() ? std::string("(empty)\n") : os.str();
}

}  // namespace

std::string external_request(const ExternalConfig& config, const std::string& rendered_prompt) {
  config.validate();
  const Url url = split_url(config.endpoint);
  nlohmann::json body = {
      {"model", config.model},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", rendered_prompt}}})},
      {"temperature", config.temperature},
      {"max_tokens", config.max_tokens},
  };
  const std::string payload = body.dump();
  const auto timeout = std::chrono::duration<double>(config.timeout_seconds);
  const auto secs = std::chrono::duration_cast<std::chrono::microseconds>(timeout);

  std::string last_error;
  double backoff = config.backoff_seconds;
  for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff *= 2.0;
    }
    httplib::Client client(url.origin);
    client.set_connection_timeout(secs.count() / 1000000, secs.count() % 1000000);
    client.set_read_timeout(secs.count() / 1000000, secs.count() % 1000000);
    client.set_write_timeout(secs.count() / 1000000, secs.count() % 1000000);
    auto res = client.Post(url.path, payload, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    try {
      const auto reply = nlohmann::json::parse(res->body);
      for (const auto& choice : reply.at("choices")) {
        const auto& msg = choice.at("message");
        if (msg.value("role", "assistant") == "assistant") return msg.at("content").get<std::string>();
      }
      last_error = "reply has no assistant message";
    } catch (const nlohmann::json::exception& e) {
      last_error = std::string("malformed reply: ") + e.what();
    }
  }
  throw Error(ErrorCode::kAdvisorUnavailable,
              "advisor endpoint failed after " + std::to_string(config.max_retries + 1) + " attempts: " + last_error);
}

Reflection parse_reflection_reply(const std::string& reply, const mem::Playbook& playbook) {
  const auto text = fenced_block(reply, "REFLECTION");
  if (!text) throw Error(ErrorCode::kAdvisorUnavailable, "advisor reply has no REFLECTION block");
  Reflection r;
  r.text = trim(*text);
  std::map<std::uint64_t, mem::TagLabel> labels;
  if (const auto tags = fenced_block(reply, "TAGS")) {
    std::istringstream in(*tags);
    std::string line;
    while (std::getline(in, line)) {
      const auto colon = line.find(':');
      if (colon == std::string::npos) continue;
      try {
        const std::uint64_t id = std::stoull(trim(line.substr(0, colon)));
        labels[id] = mem::parse_tag_label(trim(line.substr(colon + 1)));
      } catch (const std::exception&) {
        // Unparseable tag lines leave the entry neutral.
      }
    }
  }
  for (const auto& e : playbook.entries) {
    auto it = labels.find(e.id);
    r.tags.push_back({e.id, it == labels.end() ? mem::TagLabel::kNeutral : it->second});
  }
  return r;
}

std::vector<mem::Candidate> parse_lessons(const std::string& reply) {
  std::vector<mem::Candidate> out;
  const auto block = fenced_block(reply, "LESSONS");
  if (!block) return out;
  std::istringstream in(*block);
  std::string line;
  while (std::getline(in, line)) {
    const auto bar = line.find('|');
    if (bar == std::string::npos) continue;
    const std::string cat = trim(line.substr(0, bar));
    const std::string text = trim(line.substr(bar + 1));
    if (text.empty()) continue;
    try {
      out.push_back({text, to_string(parse_failure_category(cat))});
    } catch (const Error&) {
    }
  }
  return out;
}

ExternalAdvisor::ExternalAdvisor(ExternalConfig config) : config_(std::move(config)) {
  config_.validate();
  if (config_.reflect_template.empty()) config_.reflect_template = default_reflect_template();
  if (config_.curate_template.empty()) config_.curate_template = default_curate_template();
}

Reflection ExternalAdvisor::reflect(const ReflectRequest& request) {
  if (!request.feedback || !request.playbook) {
    throw Error(ErrorCode::kInvalidArgument, "reflect needs feedback and a playbook");
  }
  const std::string prompt = render_template(
      config_.reflect_template,
      {{"task", request.task ? env::render_prompt(*request.task) : std::string()},
       {"trajectory", request.trajectory},
       {"feedback", request.feedback->render()},
       {"playbook", playbook_listing(*request.playbook)}});
  Reflection r = parse_reflection_reply(external_request(config_, prompt), *request.playbook);
  r.category = request.success ? std::nullopt : categorize_feedback(*request.feedback);
  if (!r.category) r.text.clear();
  return r;
}

std::vector<mem::Candidate> ExternalAdvisor::curate(const mem::Playbook& playbook, const Reflection& reflection) {
  if (!reflection.category) {
    throw Error(ErrorCode::kInvalidArgument, "curate needs a failure reflection");
  }
  const std::string prompt = render_template(
      config_.curate_template,
      {{"playbook", playbook_listing(playbook)},
       {"reflection", std::string(to_string(*reflection.category)) + ": " + reflection.text}});
  return parse_lessons(external_request(config_, prompt));
}

}  // namespace resd::advisor
