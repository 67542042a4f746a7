#include "resd/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "resd/error.hpp"
#include "resd/vocab.hpp"

namespace resd::config {

namespace {

[[noreturn]] void fail(const std::string& key, const std::string& what) {
  throw Error(ErrorCode::kConfig, key + ": " + what);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_count(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) fail(key, "expected a non-negative integer, got '" + v + "'");
  try {
    return static_cast<std::size_t>(std::stoull(v));
  } catch (const std::exception&) {
    fail(key, "integer out of range: '" + v + "'");
  }
}

double to_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    fail(key, "expected a number, got '" + v + "'");
  }
  if (used != v.size() || std::isnan(x)) fail(key, "expected a number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(key, "expected true or false, got '" + v + "'");
}

std::string real(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  // Prefer the shortest text that reads back exactly.
  for (int p = 1; p <= 17; ++p) {
    char s[40];
    std::snprintf(s, sizeof s, "%.*g", p, x);
    if (std::stod(s) == x) return s;
  }
  return buf;
}

std::string boolean(bool b) { return b ? "true" : "false"; }

std::string read_file(const std::string& key, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(key, "cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define COUNT(name, member)                                                                   \
  Field{name, [](RunConfig& c, const std::string& v) { c.member = to_count(name, v); },       \
        [](const RunConfig& c) { return std::to_string(c.member); }}
#define REAL(name, member)                                                                    \
  Field{name, [](RunConfig& c, const std::string& v) { c.member = to_real(name, v); },        \
        [](const RunConfig& c) { return real(c.member); }}
#define BOOL(name, member)                                                                    \
  Field{name, [](RunConfig& c, const std::string& v) { c.member = to_bool(name, v); },        \
        [](const RunConfig& c) { return boolean(c.member); }}
#define TEXT(name, member)                                                                    \
  Field{name, [](RunConfig& c, const std::string& v) { c.member = v; },                       \
        [](const RunConfig& c) { return c.member; }}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      TEXT("train_tasks", train_tasks),
      TEXT("test_tasks", test_tasks),
      TEXT("out_dir", out_dir),
      COUNT("checkpoint_every", checkpoint_every),
      BOOL("log_token_losses", log_token_losses),

      COUNT("hidden_dim", model.hidden_dim),
      COUNT("num_layers", model.num_layers),
      COUNT("mix_window", model.mix_window),
      COUNT("context_window", model.context_window),
      COUNT("copy_min_order", model.copy_min_order),
      COUNT("copy_max_order", model.copy_max_order),
      REAL("copy_gain_init", model.copy_gain_init),
      COUNT("model_seed", model.seed),

      Field{"mode",
            [](RunConfig& c, const std::string& v) { c.train.mode = train::parse_mode(v); },
            [](const RunConfig& c) { return std::string(train::to_string(c.train.mode)); }},
      COUNT("seed", train.seed),
      COUNT("batch_size", train.batch_size),
      COUNT("rollouts_per_prompt", train.rollouts_per_prompt),
      COUNT("inner_iters", train.inner_iters),
      COUNT("max_new_tokens", train.max_new_tokens),
      REAL("temperature", train.sampling.temperature),
      REAL("top_p", train.sampling.top_p),
      Field{"divergence",
            [](RunConfig& c, const std::string& v) {
              try {
                c.train.divergence.kind = div::parse_divergence_kind(v);
              } catch (const Error& e) {
                fail("divergence", e.what());
              }
            },
            [](const RunConfig& c) { return div::to_string(c.train.divergence.kind); }},
      REAL("jsd_alpha", train.divergence.alpha),
      REAL("clip_min", train.clip.eps_min),
      REAL("clip_max", train.clip.eps_max),
      COUNT("top_k", train.top_k),
      BOOL("reweight", train.reweight),
      REAL("weight_alpha", train.weights.alpha),
      REAL("weight_beta", train.weights.beta),
      Field{"success_threshold",
            [](RunConfig& c, const std::string& v) {
              c.train.success_threshold = to_real("success_threshold", v);
              c.train.weights.success_threshold = c.train.success_threshold;
            },
            [](const RunConfig& c) { return real(c.train.success_threshold); }},
      REAL("ema_rate", train.ema_rate),
      COUNT("playbook_max", train.playbook_max),
      Field{"concise_method",
            [](RunConfig& c, const std::string& v) {
              try {
                c.train.concise_method = mem::parse_concise_method(v);
              } catch (const Error& e) {
                fail("concise_method", e.what());
              }
            },
            [](const RunConfig& c) { return std::string(mem::to_string(c.train.concise_method)); }},
      COUNT("concise_frequency", train.concise_frequency),
      COUNT("playbook_char_budget", train.playbook_char_budget),
      BOOL("tag_successes", train.tag_successes),
      BOOL("self_success", train.self_success),

      Field{"advisor",
            [](RunConfig& c, const std::string& v) { c.train.advisor = train::parse_advisor_kind(v); },
            [](const RunConfig& c) { return std::string(train::to_string(c.train.advisor)); }},
      TEXT("advisor_endpoint", train.external.endpoint),
      TEXT("advisor_model", train.external.model),
      REAL("advisor_timeout", train.external.timeout_seconds),
      Field{"advisor_max_retries",
            [](RunConfig& c, const std::string& v) {
              c.train.external.max_retries = static_cast<int>(to_count("advisor_max_retries", v));
            },
            [](const RunConfig& c) { return std::to_string(c.train.external.max_retries); }},
      REAL("advisor_backoff", train.external.backoff_seconds),
      REAL("advisor_temperature", train.external.temperature),
      Field{"advisor_max_tokens",
            [](RunConfig& c, const std::string& v) {
              c.train.external.max_tokens = static_cast<int>(to_count("advisor_max_tokens", v));
            },
            [](const RunConfig& c) { return std::to_string(c.train.external.max_tokens); }},
      Field{"advisor_reflect_template",
            [](RunConfig& c, const std::string& v) {
              c.reflect_template_path = v;
              c.train.external.reflect_template =
                  v.empty() ? advisor::default_reflect_template() : read_file("advisor_reflect_template", v);
            },
            [](const RunConfig& c) { return c.reflect_template_path; }},
      Field{"advisor_curate_template",
            [](RunConfig& c, const std::string& v) {
              c.curate_template_path = v;
              c.train.external.curate_template =
                  v.empty() ? advisor::default_curate_template() : read_file("advisor_curate_template", v);
            },
            [](const RunConfig& c) { return c.curate_template_path; }},

      Field{"optimizer",
            [](RunConfig& c, const std::string& v) {
              if (v == "adam") {
                c.train.optimizer.kind = lm::OptimizerKind::kAdam;
              } else if (v == "sgd") {
                c.train.optimizer.kind = lm::OptimizerKind::kSgd;
              } else {
                fail("optimizer", "unknown value '" + v + "' (adam, sgd)");
              }
            },
            [](const RunConfig& c) {
              return std::string(c.train.optimizer.kind == lm::OptimizerKind::kAdam ? "adam" : "sgd");
            }},
      REAL("lr", train.optimizer.lr),
      COUNT("warmup_steps", train.optimizer.warmup_steps),
      REAL("adam_beta1", train.optimizer.beta1),
      REAL("adam_beta2", train.optimizer.beta2),
      REAL("adam_eps", train.optimizer.eps),
      REAL("max_grad_norm", train.optimizer.max_grad_norm),

      COUNT("group_size", train.group_size),
      REAL("grpo_clip", train.grpo_clip),

      COUNT("validate_every", train.validate_every),
      COUNT("eval_k", train.eval_k),
      REAL("eval_temperature", train.eval_temperature),
      REAL("eval_top_p", train.eval_top_p),
      COUNT("shown_examples", train.prompt.shown_examples),
      COUNT("threads", train.threads),
  };
  return f;
}

#undef COUNT
#undef REAL
#undef BOOL
#undef TEXT

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const Error& e) {
    fail("model", e.what());
  }
  train.validate();
  if (train.threads < 1) fail("threads", "must be >= 1");
  if (train.max_new_tokens >= model.context_window) fail("max_new_tokens", "must be below context_window");
}

RunConfig defaults() {
  RunConfig c;
  c.model.vocab_size = Vocab::dsl().size();
  c.train.external.reflect_template = advisor::default_reflect_template();
  c.train.external.curate_template = advisor::default_curate_template();
  return c;
}

const std::vector<std::string>& keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

void apply(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      try {
        f.set(config, value);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::kConfig) throw;
        fail(key, e.what());
      }
      return;
    }
  }
  fail(key, "unknown key");
}

RunConfig parse(std::istream& in, RunConfig base) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::kConfig, "line " + std::to_string(lineno) + ": expected key = value");
    }
    apply(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfig, "config: cannot read '" + path + "'");
  return parse(in);
}

std::string render(const RunConfig& config) {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << " = " << f.get(config) << '\n';
  return os.str();
}

}  // namespace resd::config
