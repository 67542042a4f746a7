#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "resd/advisor.hpp"
#include "resd/divergence.hpp"
#include "resd/env.hpp"
#include "resd/memory.hpp"
#include "resd/toylm.hpp"

namespace resd::train {

enum class Mode { kResd, kSdpoPlain, kGrpo };
enum class AdvisorKind { kScripted, kExternal };

const char* to_string(Mode mode);
Mode parse_mode(const std::string& name);
const char* to_string(AdvisorKind kind);
AdvisorKind parse_advisor_kind(const std::string& name);

struct TrainConfig {
  Mode mode = Mode::kResd;
  std::size_t batch_size = 32;         // B
  std::size_t rollouts_per_prompt = 1;  // N
  std::size_t inner_iters = 4;          // K
  std::size_t max_new_tokens = 128;
  lm::SamplingConfig sampling;

  div::Divergence divergence = div::Divergence::reverse_kl();
  div::ClipRange clip{0.2, 5.0};
  std::size_t top_k = div::kDefaultTopK;
  div::WeightConfig weights;
  bool reweight = false;
  double ema_rate = 1e-4;  // eta
  double success_threshold = 1.0;

  std::size_t playbook_max = 200;  // M_max
  mem::ConciseMethod concise_method = mem::ConciseMethod::kPrioritized;
  std::size_t concise_frequency = 4;  // F
  std::size_t playbook_char_budget = 1200;
  bool tag_successes = true;
  bool self_success = false;  // sdpo_plain only: distill on successful samples too

  AdvisorKind advisor = AdvisorKind::kScripted;
  advisor::ExternalConfig external;

  lm::OptimizerConfig optimizer;

  std::size_t group_size = 8;  // G, grpo only
  double grpo_clip = 0.2;

  std::uint64_t seed = 0;
  std::size_t validate_every = 1;  // outer steps; 0 validates only at the end
  std::size_t eval_k = 4;
  double eval_temperature = 1.0;
  double eval_top_p = 0.95;

  env::PromptConfig prompt;
  std::size_t threads = 1;  // results never depend on this

  void validate() const;
};

// Last failure category per prompt key.
using AttemptHistory = std::map<std::string, advisor::FailureCategory>;

struct ValidationBlock {
  std::size_t step = 0;
  double task_mean = 0.0;  // per-task (pass-all) m@k
  double task_best = 0.0;  // per-task b@k
  double case_mean = 0.0;  // per-test-case m@k
  double case_best = 0.0;  // per-test-case b@k
  // Fraction of prompts whose mean accuracy over the k samples is 0, in
  // (0, 1), or 1; per task and per test case.
  std::array<double, 3> task_hist{};
  std::array<double, 3> case_hist{};
  std::size_t parseable = 0;  // samples that parsed into a program

  bool operator==(const ValidationBlock&) const = default;
};

struct MetricsRecord {
  std::size_t step = 0;
  std::size_t rollouts = 0;  // cumulative rollouts consumed after this step
  double reward_mean = 0.0;
  double success_rate = 0.0;
  double loss_raw = 0.0;       // mean sequence loss over distilled samples, first inner iteration
  double loss_weighted = 0.0;  // weighted batch loss, first inner iteration
  double weight_min = 1.0;
  double weight_max = 1.0;
  std::size_t playbook_size = 0;
  std::array<std::size_t, 3> playbook_status{};  // unused, harmful, helpful
  std::size_t reflections = 0;
  std::size_t added_entries = 0;
  std::size_t removed_entries = 0;
  std::size_t advisor_failures = 0;
  std::size_t context_drops = 0;
  std::size_t buffer_size = 0;
  std::optional<ValidationBlock> validation;
};

struct RunState {
  lm::ToyPolicyParams student;
  lm::ToyPolicyParams teacher;
  lm::OptimizerState optimizer;
  mem::Playbook playbook;
  mem::SolutionBuffer buffer;
  AttemptHistory attempts;
  std::size_t step = 0;
  std::size_t steps_since_concise = 0;
  std::size_t rollouts = 0;
  std::vector<MetricsRecord> history;

  static RunState fresh(const lm::ModelConfig& model, const TrainConfig& config);
};

// Prompt rendering and tokenization shared by every mode.
lm::TokenSequence prompt_tokens(const env::TaskSpec& task, const env::PromptConfig& config);

struct EnrichedContext {
  std::string playbook;
  std::string reflection;
  std::string previous;
  std::string feedback;
  std::string solution;

  std::string render() const;  // fixed order, empty sections omitted
};

struct TeacherInput {
  EnrichedContext context;
  lm::TokenSequence sequence;  // [bos, context, prompt, response]
  std::size_t drops = 0;       // sections dropped to fit the window
};

// Teacher sequence for `response` under `context`; drops the previous trial,
// then the feedback, until the sequence fits the window. Throws
// kContextOverflow if it still does not fit.
TeacherInput build_teacher_input(EnrichedContext context, const lm::TokenSequence& prompt,
                                 const std::vector<TokenId>& response, std::size_t window);

void ema_sync(lm::ToyPolicyParams& teacher, const lm::ToyPolicyParams& student, double eta);

struct Rollout {
  std::vector<TokenId> response;
  std::string text;
  bool truncated = false;
  env::Evaluation evaluation;
};

Rollout rollout(const lm::ToyPolicyParams& params, const env::TaskSpec& task, const lm::TokenSequence& prompt,
                std::size_t max_new, const lm::SamplingConfig& sampling, std::uint64_t seed);

// Per-position truncated pairs of one aligned student/teacher sample, and
// the per-token losses.
struct TokenLossRecord {
  std::vector<std::string> tokens;
  std::vector<double> losses;
};

TokenLossRecord token_losses(const lm::ToyPolicyParams& student, const lm::ToyPolicyParams& teacher,
                             const lm::TokenSequence& student_seq, const lm::TokenSequence& teacher_seq,
                             const TrainConfig& config);

// Teacher distributions at each response position of `seq`.
std::vector<std::vector<double>> teacher_distributions(const lm::ToyPolicyParams& teacher,
                                                       const lm::TokenSequence& seq);

struct DistillSample {
  lm::TokenSequence student_seq;
  std::vector<std::vector<double>> teacher_probs;  // one per response position
  double weight = 1.0;
};

// Weighted batch loss (sum_i w_i L_i / n). When `grad` is non-empty its
// gradient w.r.t. the student params is accumulated into it.
double batch_loss(const lm::ToyPolicyParams& student, const std::vector<DistillSample>& samples,
                  const TrainConfig& config, std::span<double> grad = {});

// (task id, per-token losses) for every sample of a step.
using TokenLog = std::vector<std::pair<std::string, TokenLossRecord>>;

// One RESD (or sdpo_plain) outer step. `advisor` may be null for sdpo_plain.
// When `token_log` is given, per-token losses of the first inner iteration
// are appended to it.
MetricsRecord resd_step(RunState& state, const std::vector<env::TaskSpec>& batch, const TrainConfig& config,
                        advisor::Advisor* advisor, TokenLog* token_log = nullptr);

MetricsRecord grpo_step(RunState& state, const std::vector<env::TaskSpec>& batch, const TrainConfig& config);

// Population-std group advantages; all-equal groups give zeros.
std::vector<double> group_advantages(const std::vector<double>& rewards);

struct SampleOutcome {
  double reward = 0.0;
  bool passed_all = false;
};

// Aggregation of per-task sample outcomes ([task][sample]).
ValidationBlock aggregate_validation(const std::vector<std::vector<SampleOutcome>>& outcomes);

ValidationBlock validate(const lm::ToyPolicyParams& params, const std::vector<env::TaskSpec>& tasks,
                         const TrainConfig& config);

// Average-rank sums over the four validation metrics; earliest step wins
// ties. Returns an index into `history`.
std::size_t select_checkpoint(const std::vector<ValidationBlock>& history);
std::vector<double> rank_sums(const std::vector<ValidationBlock>& history);

struct StreamResult {
  RunState state;
  std::vector<ValidationBlock> validations;
  std::size_t selected = 0;  // index into validations
};

struct StreamOptions {
  std::string out_dir;              // empty: no files
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  bool log_token_losses = false;
  std::string config_text;  // copied into every checkpoint as config.txt
};

StreamResult run_stream(const lm::ModelConfig& model, const std::vector<env::TaskSpec>& train,
                        const std::vector<env::TaskSpec>& test, const TrainConfig& config,
                        const StreamOptions& options = {});

// Metrics JSONL, schema "resd.metrics.v1".
std::string metrics_json(const MetricsRecord& record, Mode mode);
MetricsRecord parse_metrics_json(const std::string& line);
// step,metric,value rows for every validation block.
std::string validation_csv(const std::vector<ValidationBlock>& validations);
// Training metrics plus validation rows, same layout.
std::string curves_csv(const std::vector<MetricsRecord>& history);

void save_checkpoint(const std::string& dir, const RunState& state, Mode mode = Mode::kResd);
RunState load_checkpoint(const std::string& dir);

}  // namespace resd::train
