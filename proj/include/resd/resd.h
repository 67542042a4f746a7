/* C interface to the resd library. Every call returns a status code; the
 * message of the last failure on the calling thread is kept until the next
 * failing call. Strings returned through char** are owned by the caller and
 * released with resd_string_free. */
#ifndef RESD_RESD_H
#define RESD_RESD_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
  RESD_OK = 0,
  RESD_ERR_INVALID_ARGUMENT = 1,
  RESD_ERR_CONFIG = 2,
  RESD_ERR_IO = 3,
  RESD_ERR_FORMAT = 4,
  RESD_ERR_CONTEXT_OVERFLOW = 5,
  RESD_ERR_NUMERIC = 6,
  RESD_ERR_LAYOUT_MISMATCH = 7,
  RESD_ERR_ADVISOR_UNAVAILABLE = 8,
  RESD_ERR_TRANSPORT = 9,
  RESD_ERR_INTERNAL = 10
} resd_status;

typedef struct resd_config resd_config;
typedef struct resd_run resd_run;
typedef struct resd_playbook resd_playbook;

typedef struct {
  size_t step;
  double task_mean;
  double task_best;
  double case_mean;
  double case_best;
  double task_hist[3]; /* bins {0, (0,1), 1} */
  double case_hist[3];
  size_t parseable;
} resd_validation;

typedef struct {
  uint64_t id;
  const char* category;
  const char* status; /* Unused, Harmful or Helpful */
  uint64_t helpful;
  uint64_t harmful;
  int tagged; /* 0: never tagged, last_tagged_step is then 0 */
  uint64_t last_tagged_step;
  uint64_t created_step;
  const char* text;
} resd_playbook_entry;

const char* resd_version(void);
const char* resd_last_error(void);
const char* resd_status_name(resd_status status);
void resd_string_free(char* s);

/* Run configuration. */
resd_status resd_config_new(resd_config** out);
resd_status resd_config_load(const char* path, resd_config** out);
resd_status resd_config_set(resd_config* config, const char* key, const char* value);
resd_status resd_config_get(const resd_config* config, const char* key, char** value);
resd_status resd_config_render(const resd_config* config, char** text);
resd_status resd_config_validate(const resd_config* config);
void resd_config_free(resd_config* config);

/* Writes disjoint train and test task files. Refuses to overwrite unless
 * force is non-zero. */
resd_status resd_gen_tasks(uint64_t seed, size_t pattern_len, size_t n_train, size_t n_test,
                           size_t suite_size, size_t max_tape_len, const char* train_path,
                           const char* test_path, int force);

/* Trains per the config's task files and out_dir. */
resd_status resd_train(const resd_config* config, resd_run** out);
size_t resd_run_validation_count(const resd_run* run);
resd_status resd_run_validation(const resd_run* run, size_t index, resd_validation* out);
size_t resd_run_selected(const resd_run* run); /* index into validations */
void resd_run_free(resd_run* run);

/* Validates the student of a checkpoint directory on a task file with k
 * samples per task. Sampling settings come from config (NULL: defaults). */
resd_status resd_eval(const resd_config* config, const char* checkpoint_dir, const char* tasks_path,
                      size_t k, resd_validation* out);

resd_status resd_playbook_load(const char* path, resd_playbook** out);
size_t resd_playbook_size(const resd_playbook* playbook);
/* Entries ordered by last tagged step, most recent first. Pointers stay
 * valid until the playbook is freed. */
resd_status resd_playbook_entry_at(const resd_playbook* playbook, size_t index, resd_playbook_entry* out);
void resd_playbook_free(resd_playbook* playbook);

/* metrics.jsonl to step,metric,value CSV rows. */
resd_status resd_export_curves(const char* metrics_path, const char* csv_path, int force);

#ifdef __cplusplus
}
#endif

#endif
