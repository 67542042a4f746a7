// Command-line front end over the C API.
//
//   resd gen-tasks --train-out train.tasks --test-out test.tasks
//   resd train --config run.cfg [--mode grpo] [--set key=value ...]
//   resd eval --checkpoint out/final --tasks test.tasks --k 4
//   resd inspect-playbook out/playbook.txt
//   resd export-curves --metrics out/metrics.jsonl --out curves.csv
//
// RESD_LOG_LEVEL=quiet|info|debug controls how much is printed (default info).

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "resd/resd.h"

namespace {

enum class Level { kQuiet, kInfo, kDebug };

Level log_level() {
  const char* v = std::getenv("RESD_LOG_LEVEL");
  if (!v) return Level::kInfo;
  const std::string s(v);
  if (s == "quiet") return Level::kQuiet;
  if (s == "debug") return Level::kDebug;
  return Level::kInfo;
}

int exit_code(resd_status s) {
  if (s == RESD_OK) return 0;
  std::fprintf(stderr, "error: %s\n", resd_last_error());
  return s == RESD_ERR_CONFIG ? 2 : 1;
}

void print_validation(const resd_validation& v) {
  std::printf("%-10s %8s %8s\n", "metric", "m@k", "b@k");
  std::printf("%-10s %8.4f %8.4f\n", "per-task", v.task_mean, v.task_best);
  std::printf("%-10s %8.4f %8.4f\n", "per-case", v.case_mean, v.case_best);
  std::printf("histogram  %8s %8s %8s\n", "0", "(0,1)", "1");
  std::printf("per-task   %8.4f %8.4f %8.4f\n", v.task_hist[0], v.task_hist[1], v.task_hist[2]);
  std::printf("per-case   %8.4f %8.4f %8.4f\n", v.case_hist[0], v.case_hist[1], v.case_hist[2]);
  std::printf("parseable  %zu\n", v.parseable);
}

struct Config {
  resd_config* p = nullptr;
  ~Config() { resd_config_free(p); }
};

}  // namespace

int main(int argc, char** argv) {
  const Level level = log_level();
  CLI::App app{"reflection-enhanced self-distillation on tape programs"};
  app.require_subcommand(1);

  // gen-tasks
  auto* gen = app.add_subcommand("gen-tasks", "write train and test task files");
  std::uint64_t gen_seed = 0;
  std::size_t pattern_len = 3, n_train = 256, n_test = 32, suite_size = 20, max_tape = 10;
  std::string train_out, test_out;
  bool gen_force = false;
  gen->add_option("--seed", gen_seed);
  gen->add_option("--pattern-len", pattern_len);
  gen->add_option("--n-train", n_train);
  gen->add_option("--n-test", n_test);
  gen->add_option("--suite-size", suite_size);
  gen->add_option("--max-tape-len", max_tape);
  gen->add_option("--train-out", train_out)->required();
  gen->add_option("--test-out", test_out)->required();
  gen->add_flag("--force", gen_force);

  // train
  auto* tr = app.add_subcommand("train", "run one training stream");
  std::string config_path, mode;
  std::vector<std::string> overrides;
  bool train_force = false;
  tr->add_option("--config", config_path)->required();
  tr->add_option("--mode", mode, "resd, sdpo_plain or grpo");
  tr->add_option("--set", overrides, "key=value, applied after the file");
  tr->add_flag("--force", train_force, "reuse an existing out_dir");

  // eval
  auto* ev = app.add_subcommand("eval", "validate a checkpoint");
  std::string ckpt, eval_tasks, eval_config;
  std::size_t k = 4;
  ev->add_option("--checkpoint", ckpt)->required();
  ev->add_option("--tasks", eval_tasks)->required();
  ev->add_option("--k", k);
  ev->add_option("--config", eval_config, "sampling settings and model check");

  // inspect-playbook
  auto* ip = app.add_subcommand("inspect-playbook", "print a playbook snapshot");
  std::string pb_path;
  ip->add_option("snapshot", pb_path)->required();

  // export-curves
  auto* ex = app.add_subcommand("export-curves", "metrics JSONL to CSV");
  std::string metrics_path, csv_path;
  bool ex_force = false;
  ex->add_option("--metrics", metrics_path)->required();
  ex->add_option("--out", csv_path)->required();
  ex->add_flag("--force", ex_force);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (gen->parsed()) {
    const resd_status s = resd_gen_tasks(gen_seed, pattern_len, n_train, n_test, suite_size, max_tape,
                                         train_out.c_str(), test_out.c_str(), gen_force ? 1 : 0);
    if (s != RESD_OK) return exit_code(s);
    if (level != Level::kQuiet) std::printf("train %zu tasks -> %s\ntest %zu tasks -> %s\n", n_train, train_out.c_str(), n_test, test_out.c_str());
    return 0;
  }

  if (tr->parsed()) {
    Config cfg;
    resd_status s = resd_config_load(config_path.c_str(), &cfg.p);
    if (s != RESD_OK) return exit_code(s);
    if (!mode.empty() && (s = resd_config_set(cfg.p, "mode", mode.c_str())) != RESD_OK) return exit_code(s);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) {
        std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
        return 2;
      }
      s = resd_config_set(cfg.p, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
      if (s != RESD_OK) return exit_code(s);
    }
    if ((s = resd_config_validate(cfg.p)) != RESD_OK) return exit_code(s);
    char* out_dir = nullptr;
    if ((s = resd_config_get(cfg.p, "out_dir", &out_dir)) != RESD_OK) return exit_code(s);
    const std::string dir = out_dir;
    resd_string_free(out_dir);
    std::error_code ec;
    if (!dir.empty() && !train_force && std::filesystem::exists(dir) && !std::filesystem::is_empty(dir, ec)) {
      std::fprintf(stderr, "error: %s exists (use --force to overwrite)\n", dir.c_str());
      return 1;
    }
    if (!dir.empty() && train_force) std::filesystem::remove_all(dir, ec);
    if (level == Level::kDebug) {
      char* text = nullptr;
      if (resd_config_render(cfg.p, &text) == RESD_OK) {
        std::printf("%s", text);
        resd_string_free(text);
      }
    }
    resd_run* run = nullptr;
    if ((s = resd_train(cfg.p, &run)) != RESD_OK) return exit_code(s);
    const std::size_t n = resd_run_validation_count(run);
    if (level != Level::kQuiet) {
      for (std::size_t i = 0; i < n; ++i) {
        resd_validation v;
        resd_run_validation(run, i, &v);
        if (level == Level::kDebug || i + 1 == n) {
          std::printf("step %zu  task m@k %.4f b@k %.4f  case m@k %.4f b@k %.4f  all-wrong %.4f\n", v.step,
                      v.task_mean, v.task_best, v.case_mean, v.case_best, v.case_hist[0]);
        }
      }
    }
    if (n > 0) {
      resd_validation v;
      resd_run_validation(run, resd_run_selected(run), &v);
      std::printf("selected step %zu\n", v.step);
      if (level != Level::kQuiet) print_validation(v);
    }
    resd_run_free(run);
    return 0;
  }

  if (ev->parsed()) {
    Config cfg;
    if (!eval_config.empty()) {
      const resd_status s = resd_config_load(eval_config.c_str(), &cfg.p);
      if (s != RESD_OK) return exit_code(s);
    }
    resd_validation v;
    const resd_status s = resd_eval(cfg.p, ckpt.c_str(), eval_tasks.c_str(), k, &v);
    if (s != RESD_OK) return exit_code(s);
    std::printf("checkpoint step %zu, k = %zu\n", v.step, k);
    print_validation(v);
    return 0;
  }

  if (ip->parsed()) {
    resd_playbook* pb = nullptr;
    const resd_status s = resd_playbook_load(pb_path.c_str(), &pb);
    if (s != RESD_OK) return exit_code(s);
    const std::size_t n = resd_playbook_size(pb);
    std::printf("%zu entries\n", n);
    for (std::size_t i = 0; i < n; ++i) {
      resd_playbook_entry e;
      resd_playbook_entry_at(pb, i, &e);
      std::string first(e.text);
      if (const auto nl = first.find('\n'); nl != std::string::npos) first = first.substr(0, nl) + " ...";
      char tagged[24] = "-";
      if (e.tagged) std::snprintf(tagged, sizeof tagged, "%llu", static_cast<unsigned long long>(e.last_tagged_step));
      std::printf("%4llu  %-24s %-8s h=%llu d=%llu  tagged %s  created %llu\n      %s\n",
                  static_cast<unsigned long long>(e.id), e.category, e.status,
                  static_cast<unsigned long long>(e.helpful), static_cast<unsigned long long>(e.harmful), tagged,
                  static_cast<unsigned long long>(e.created_step), first.c_str());
    }
    resd_playbook_free(pb);
    return 0;
  }

  if (ex->parsed()) {
    const resd_status s = resd_export_curves(metrics_path.c_str(), csv_path.c_str(), ex_force ? 1 : 0);
    if (s != RESD_OK) return exit_code(s);
    if (level != Level::kQuiet) std::printf("wrote %s\n", csv_path.c_str());
    return 0;
  }
  return 0;
}
