#include "resd/resd.h"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "resd/config.hpp"
#include "resd/env.hpp"
#include "resd/error.hpp"
#include "resd/memory.hpp"
#include "resd/rng.hpp"
#include "resd/trainer.hpp"

namespace fs = std::filesystem;
using namespace resd;

struct resd_config {
  config::RunConfig value;
};

struct resd_run {
  train::StreamResult result;
};

struct resd_playbook {
  std::vector<mem::PlaybookEntry> entries;
  std::vector<std::string> statuses;
};

namespace {

thread_local std::string g_last_error;

resd_status status_of(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kShapeMismatch:
    case ErrorCode::kDomain:
    case ErrorCode::kUnknownId:
      return RESD_ERR_INVALID_ARGUMENT;
    case ErrorCode::kConfig: return RESD_ERR_CONFIG;
    case ErrorCode::kIo: return RESD_ERR_IO;
    case ErrorCode::kFormat: return RESD_ERR_FORMAT;
    case ErrorCode::kContextOverflow: return RESD_ERR_CONTEXT_OVERFLOW;
    case ErrorCode::kNumeric: return RESD_ERR_NUMERIC;
    case ErrorCode::kLayoutMismatch: return RESD_ERR_LAYOUT_MISMATCH;
    case ErrorCode::kAdvisorUnavailable: return RESD_ERR_ADVISOR_UNAVAILABLE;
    case ErrorCode::kTransport: return RESD_ERR_TRANSPORT;
  }
  return RESD_ERR_INTERNAL;
}

resd_status fail(resd_status s, const std::string& message) {
  g_last_error = message;
  return s;
}

template <typename F>
resd_status guarded(F&& f) {
  try {
    f();
    return RESD_OK;
  } catch (const Error& e) {
    return fail(status_of(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(RESD_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(RESD_ERR_INTERNAL, e.what());
  }
}

char* dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void refuse_existing(const std::string& path, int force) {
  if (!force && fs::exists(path)) {
    throw Error(ErrorCode::kIo, path + " exists (use --force to overwrite)");
  }
}

resd_validation to_c(const train::ValidationBlock& v) {
  resd_validation out{};
  out.step = v.step;
  out.task_mean = v.task_mean;
  out.task_best = v.task_best;
  out.case_mean = v.case_mean;
  out.case_best = v.case_best;
  for (int i = 0; i < 3; ++i) {
    out.task_hist[i] = v.task_hist[i];
    out.case_hist[i] = v.case_hist[i];
  }
  out.parseable = v.parseable;
  return out;
}

}  // namespace

extern "C" {

const char* resd_version(void) { return "0.1.0"; }

const char* resd_last_error(void) { return g_last_error.c_str(); }

const char* resd_status_name(resd_status status) {
  switch (status) {
    case RESD_OK: return "ok";
    case RESD_ERR_INVALID_ARGUMENT: return "invalid-argument";
    case RESD_ERR_CONFIG: return "config";
    case RESD_ERR_IO: return "io";
    case RESD_ERR_FORMAT: return "format";
    case RESD_ERR_CONTEXT_OVERFLOW: return "context-overflow";
    case RESD_ERR_NUMERIC: return "numeric";
    case RESD_ERR_LAYOUT_MISMATCH: return "layout-mismatch";
    case RESD_ERR_ADVISOR_UNAVAILABLE: return "advisor-unavailable";
    case RESD_ERR_TRANSPORT: return "transport";
    case RESD_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

void resd_string_free(char* s) { std::free(s); }

resd_status resd_config_new(resd_config** out) {
  if (!out) return fail(RESD_ERR_INVALID_ARGUMENT, "out is null");
  return guarded([&] { *out = new resd_config{config::defaults()}; });
}

resd_status resd_config_load(const char* path, resd_config** out) {
  if (!path || !out) return fail(RESD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { *out = new resd_config{config::load(path)}; });
}

resd_status resd_config_set(resd_config* c, const char* key, const char* value) {
  if (!c || !key || !value) return fail(RESD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { config::apply(c->value, key, value); });
}

resd_status resd_config_get(const resd_config* c, const char* key, char** value) {
  if (!c || !key || !value) return fail(RESD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    std::istringstream in(config::render(c->value));
    std::string line;
    const std::string prefix = std::string(key) + " = ";
    while (std::getline(in, line)) {
      if (line.rfind(prefix, 0) == 0) {
        *value = dup(line.substr(prefix.size()));
        return;
      }
    }
    throw Error(ErrorCode::kConfig, std::string(key) + ": unknown key");
  });
}

resd_status resd_config_render(const resd_config* c, char** text) {
  if (!c || !text) return fail(RESD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { *text = dup(config::render(c->value)); });
}

resd_status resd_config_validate(const resd_config* c) {
  if (!c) return fail(RESD_ERR_INVALID_ARGUMENT, "config is null");
  return guarded([&] { c->value.validate(); });
}

void resd_config_free(resd_config* c) { delete c; }

resd_status resd_gen_tasks(uint64_t seed, size_t pattern_len, size_t n_train, size_t n_test, size_t suite_size,
                           size_t max_tape_len, const char* train_path, const char* test_path, int force) {
  if (!train_path || !test_path) return fail(RESD_ERR_INVALID_ARGUMENT, "null path");
  return guarded([&] {
    refuse_existing(train_path, force);
    refuse_existing(test_path, force);
    env::save_tasks(train_path, env::generate_tasks(seed, 1, n_train, pattern_len, suite_size, max_tape_len, "train"));
    env::save_tasks(test_path, env::generate_tasks(seed, 2, n_test, pattern_len, suite_size, max_tape_len, "test"));
  });
}

resd_status resd_train(const resd_config* c, resd_run** out) {
  if (!c || !out) return fail(RESD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    const auto& rc = c->value;
    rc.validate();
    if (rc.train_tasks.empty()) throw Error(ErrorCode::kConfig, "train_tasks: required");
    const auto train_tasks = env::load_tasks(rc.train_tasks);
    const auto test_tasks = rc.test_tasks.empty() ? std::vector<env::TaskSpec>{} : env::load_tasks(rc.test_tasks);
    train::StreamOptions opts;
    opts.out_dir = rc.out_dir;
    opts.checkpoint_every = rc.checkpoint_every;
    opts.log_token_losses = rc.log_token_losses;
    opts.config_text = config::render(rc);
    if (!rc.out_dir.empty()) {
      fs::create_directories(rc.out_dir);
      std::ofstream(fs::path(rc.out_dir) / "config.txt") << opts.config_text;
    }
    auto run = std::make_unique<resd_run>();
    run->result = train::run_stream(rc.model, train_tasks, test_tasks, rc.train, opts);
    *out = run.release();
  });
}

size_t resd_run_validation_count(const resd_run* run) { return run ? run->result.validations.size() : 0; }

resd_status resd_run_validation(const resd_run* run, size_t index, resd_validation* out) {
  if (!run || !out) return fail(RESD_ERR_INVALID_ARGUMENT, "null argument");
  if (index >= run->result.validations.size()) return fail(RESD_ERR_INVALID_ARGUMENT, "validation index out of range");
  *out = to_c(run->result.validations[index]);
  return RESD_OK;
}

size_t resd_run_selected(const resd_run* run) { return run ? run->result.selected : 0; }

void resd_run_free(resd_run* run) { delete run; }

resd_status resd_eval(const resd_config* c, const char* checkpoint_dir, const char* tasks_path, size_t k,
                      resd_validation* out) {
  if (!checkpoint_dir || !tasks_path || !out) return fail(RESD_ERR_INVALID_ARGUMENT, "null argument");
  if (k < 1) return fail(RESD_ERR_INVALID_ARGUMENT, "k must be >= 1");
  return guarded([&] {
    config::RunConfig rc = c ? c->value : config::defaults();
    rc.train.eval_k = k;
    const auto state = train::load_checkpoint(checkpoint_dir);
    if (c && !(state.student.config == rc.model)) {
      throw Error(ErrorCode::kLayoutMismatch, "checkpoint model does not match the config's model section");
    }
    const auto tasks = env::load_tasks(tasks_path);
    auto v = train::validate(state.student, tasks, rc.train);
    v.step = state.step;
    *out = to_c(v);
  });
}

resd_status resd_playbook_load(const char* path, resd_playbook** out) {
  if (!path || !out) return fail(RESD_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    auto pb = std::make_unique<resd_playbook>();
    pb->entries = mem::load_playbook(path).entries;
    std::stable_sort(pb->entries.begin(), pb->entries.end(), [](const auto& a, const auto& b) {
      const auto ka = a.last_tagged_step ? static_cast<long long>(*a.last_tagged_step) : -1LL;
      const auto kb = b.last_tagged_step ? static_cast<long long>(*b.last_tagged_step) : -1LL;
      return ka > kb;
    });
    for (const auto& e : pb->entries) pb->statuses.emplace_back(mem::to_string(mem::categorize(e)));
    *out = pb.release();
  });
}

size_t resd_playbook_size(const resd_playbook* pb) { return pb ? pb->entries.size() : 0; }

resd_status resd_playbook_entry_at(const resd_playbook* pb, size_t index, resd_playbook_entry* out) {
  if (!pb || !out) return fail(RESD_ERR_INVALID_ARGUMENT, "null argument");
  if (index >= pb->entries.size()) return fail(RESD_ERR_INVALID_ARGUMENT, "entry index out of range");
  const auto& e = pb->entries[index];
  out->id = e.id;
  out->category = e.category.c_str();
  out->status = pb->statuses[index].c_str();
  out->helpful = e.helpful;
  out->harmful = e.harmful;
  out->tagged = e.last_tagged_step.has_value() ? 1 : 0;
  out->last_tagged_step = e.last_tagged_step.value_or(0);
  out->created_step = e.created_step;
  out->text = e.text.c_str();
  return RESD_OK;
}

void resd_playbook_free(resd_playbook* pb) { delete pb; }

resd_status resd_export_curves(const char* metrics_path, const char* csv_path, int force) {
  if (!metrics_path || !csv_path) return fail(RESD_ERR_INVALID_ARGUMENT, "null path");
  return guarded([&] {
    std::ifstream in(metrics_path);
    if (!in) throw Error(ErrorCode::kIo, std::string("cannot read ") + metrics_path);
    std::vector<train::MetricsRecord> history;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) history.push_back(train::parse_metrics_json(line));
    }
    refuse_existing(csv_path, force);
    std::ofstream out(csv_path);
    if (!out) throw Error(ErrorCode::kIo, std::string("cannot write ") + csv_path);
    out << train::curves_csv(history);
  });
}

}  // extern "C"
