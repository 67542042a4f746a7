#include "resd/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "resd/error.hpp"
#include "resd/rng.hpp"

namespace resd::train {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kRolloutStream = 0x726f6c6cULL;
constexpr std::uint64_t kConciseStream = 0x636f6e63ULL;
constexpr std::uint64_t kEvalStream = 0x6576616cULL;

// Runs fn(i) for i in [0, n) on up to `threads` workers. Every index writes
// only its own slot, so results do not depend on the thread count.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<double> softmax(std::span<const double> z) { return lm::next_distribution(z, 1.0); }

}  // namespace

const char* to_string(Mode mode) {
  switch (mode) {
    case Mode::kResd: return "resd";
    case Mode::kSdpoPlain: return "sdpo_plain";
    case Mode::kGrpo: return "grpo";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  for (Mode m : {Mode::kResd, Mode::kSdpoPlain, Mode::kGrpo}) {
    if (name == to_string(m)) return m;
  }
  throw Error(ErrorCode::kConfig, "mode: unknown value '" + name + "' (resd, sdpo_plain, grpo)");
}

const char* to_string(AdvisorKind kind) {
  return kind == AdvisorKind::kScripted ? "scripted" : "external";
}

AdvisorKind parse_advisor_kind(const std::string& name) {
  if (name == "scripted") return AdvisorKind::kScripted;
  if (name == "external") return AdvisorKind::kExternal;
  throw Error(ErrorCode::kConfig, "advisor: unknown value '" + name + "' (scripted, external)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& what) {
    throw Error(ErrorCode::kConfig, key + ": " + what);
  };
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (rollouts_per_prompt < 1) fail("rollouts_per_prompt", "must be >= 1");
  if (inner_iters < 1) fail("inner_iters", "must be >= 1");
  if (max_new_tokens < 1) fail("max_new_tokens", "must be >= 1");
  if (!(ema_rate >= 0.0 && ema_rate <= 1.0)) fail("ema_rate", "must lie in [0, 1]");
  if (top_k < 1) fail("top_k", "must be >= 1");
  if (group_size < 1) fail("group_size", "must be >= 1");
  if (!(grpo_clip > 0.0)) fail("grpo_clip", "must be positive");
  if (eval_k < 1) fail("eval_k", "must be >= 1");
  if (!(optimizer.lr >= 0.0)) fail("lr", "must be >= 0");
  if (sampling.temperature < 0.0) fail("temperature", "must be >= 0");
  if (!(sampling.top_p > 0.0 && sampling.top_p <= 1.0)) fail("top_p", "must lie in (0, 1]");
  if (eval_temperature < 0.0) fail("eval_temperature", "must be >= 0");
  if (!(eval_top_p > 0.0 && eval_top_p <= 1.0)) fail("eval_top_p", "must lie in (0, 1]");
  if (playbook_max < 1) fail("playbook_max", "must be >= 1");
  if (concise_frequency < 1) fail("concise_frequency", "must be >= 1");
  try {
    divergence.validate();
  } catch (const Error& e) {
    fail("divergence", e.what());
  }
  try {
    clip.validate();
  } catch (const Error& e) {
    fail("clip", e.what());
  }
  try {
    weights.validate();
  } catch (const Error& e) {
    fail("weights", e.what());
  }
  if (advisor == AdvisorKind::kExternal) external.validate();
}

RunState RunState::fresh(const lm::ModelConfig& model, const TrainConfig& config) {
  RunState s;
  s.student = lm::ToyPolicyParams::init(model);
  s.teacher = s.student;
  s.playbook.m_max = config.playbook_max;
  s.playbook.method = config.concise_method;
  s.playbook.frequency = config.concise_frequency;
  return s;
}

lm::TokenSequence prompt_tokens(const env::TaskSpec& task, const env::PromptConfig& config) {
  const Vocab& vocab = Vocab::dsl();
  lm::TokenSequence seq;
  seq.ids.push_back(vocab.bos());
  const auto body = vocab.encode(env::render_prompt(task, config));
  seq.ids.insert(seq.ids.end(), body.begin(), body.end());
  seq.response_start = seq.ids.size();
  return seq;
}

std::string EnrichedContext::render() const {
  std::string out;
  if (!playbook.empty()) out += "PLAYBOOK\n" + playbook + (playbook.back() == '\n' ? "" : "\n");
  if (!reflection.empty()) out += "REFLECTION " + reflection + "\n";
  if (!previous.empty()) out += "PREVIOUS\n" + previous + "\n";
  if (!feedback.empty()) out += "FEEDBACK " + feedback + "\n";
  if (!solution.empty()) out += "SOLUTION\n" + solution + "\n";
  return out;
}

TeacherInput build_teacher_input(EnrichedContext context, const lm::TokenSequence& prompt,
                                 const std::vector<TokenId>& response, std::size_t window) {
  const Vocab& vocab = Vocab::dsl();
  TeacherInput in;
  auto assemble = [&] {
    in.sequence.ids.clear();
    in.sequence.ids.push_back(vocab.bos());
    const auto ctx = vocab.encode(context.render());
    in.sequence.ids.insert(in.sequence.ids.end(), ctx.begin(), ctx.end());
    // The prompt keeps its own layout after its leading bos.
    const std::size_t skip = !prompt.ids.empty() && prompt.ids.front() == vocab.bos() ? 1 : 0;
    in.sequence.ids.insert(in.sequence.ids.end(), prompt.ids.begin() + static_cast<std::ptrdiff_t>(skip),
                           prompt.ids.begin() + static_cast<std::ptrdiff_t>(prompt.response_start));
    in.sequence.response_start = in.sequence.ids.size();
    in.sequence.ids.insert(in.sequence.ids.end(), response.begin(), response.end());
    return in.sequence.size() <= window;
  };
  if (!assemble() && !context.previous.empty()) {
    context.previous.clear();
    ++in.drops;
  }
  if (!assemble() && !context.feedback.empty()) {
    context.feedback.clear();
    ++in.drops;
  }
  if (!assemble()) {
    throw Error(ErrorCode::kContextOverflow,
                "teacher context of " + std::to_string(in.sequence.size()) + " tokens exceeds window of " +
                    std::to_string(window) + " after dropping sections");
  }
  in.context = std::move(context);
  return in;
}

void ema_sync(lm::ToyPolicyParams& teacher, const lm::ToyPolicyParams& student, double eta) {
  if (!teacher.same_layout(student)) {
    throw Error(ErrorCode::kLayoutMismatch, "teacher and student layouts differ");
  }
  if (!(eta >= 0.0 && eta <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "ema rate must lie in [0, 1]");
  if (eta == 0.0) return;
  if (eta == 1.0) {
    teacher.values = student.values;
    return;
  }
  for (std::size_t i = 0; i < teacher.values.size(); ++i) {
    const double t = teacher.values[i], s = student.values[i];
    teacher.values[i] = static_cast<float>((1.0 - eta) * t + eta * s);
  }
}

Rollout rollout(const lm::ToyPolicyParams& params, const env::TaskSpec& task, const lm::TokenSequence& prompt,
                std::size_t max_new, const lm::SamplingConfig& sampling, std::uint64_t seed) {
  const Vocab& vocab = Vocab::dsl();
  lm::SamplingConfig s = sampling;
  s.eos = vocab.eos();
  const auto seq = lm::sample_sequence(params, prompt, max_new, s, seed);
  Rollout r;
  r.response.assign(seq.ids.begin() + static_cast<std::ptrdiff_t>(seq.response_start), seq.ids.end());
  r.truncated = r.response.empty() || r.response.back() != vocab.eos();
  r.text = vocab.decode(r.response);
  r.evaluation = env::evaluate(env::parse_response(r.text), task.suite);
  r.evaluation.feedback.truncated = r.truncated;
  return r;
}

std::vector<std::vector<double>> teacher_distributions(const lm::ToyPolicyParams& teacher,
                                                       const lm::TokenSequence& seq) {
  lm::ForwardPass pass(teacher);
  std::vector<std::vector<double>> out;
  out.reserve(seq.response_length());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto z = pass.push(seq.ids[i]);
    if (i + 1 >= seq.response_start && i + 1 < seq.size()) out.push_back(softmax(z));
  }
  return out;
}

namespace {

struct DistillResult {
  double loss = 0.0;
  std::vector<double> token_losses;
};

// Sequence loss of one sample; when `grad` is non-empty, accumulates
// scale * dloss/dtheta into it.
DistillResult distill_sample(const lm::ToyPolicyParams& student, const lm::TokenSequence& seq,
                             const std::vector<std::vector<double>>& teacher, const TrainConfig& config,
                             double scale, std::span<double> grad) {
  const std::size_t v = student.config.vocab_size;
  lm::ForwardPass pass(student);
  for (TokenId id : seq.ids) pass.push(id);
  lm::Logits upstream{seq.size(), v, std::vector<double>(seq.size() * v, 0.0)};
  DistillResult r;
  for (std::size_t j = 0; j < seq.response_length(); ++j) {
    const std::size_t row = seq.response_start + j - 1;
    const auto p = softmax(pass.logits(row));
    const auto pair = div::truncate_top_k(p, teacher[j], config.top_k);
    const double l = div::per_token_loss(pair, config.divergence, config.clip);
    r.token_losses.push_back(l);
    r.loss += l;
    if (!grad.empty() && scale != 0.0) {
      const auto dz = div::loss_gradient_wrt_student_logits(pair, p, config.divergence, config.clip);
      auto out = upstream.row(row);
      for (std::size_t k = 0; k < v; ++k) out[k] = scale * dz[k];
    }
  }
  if (!grad.empty() && scale != 0.0) pass.backward(upstream, grad);
  return r;
}

void check_sizes(const std::vector<env::TaskSpec>& batch) {
  if (batch.empty()) throw Error(ErrorCode::kInvalidArgument, "empty batch");
}

std::array<std::size_t, 3> status_counts(const mem::Playbook& playbook) {
  std::array<std::size_t, 3> c{};
  for (const auto& e : playbook.entries) ++c[static_cast<std::size_t>(mem::categorize(e))];
  return c;
}

}  // namespace

TokenLossRecord token_losses(const lm::ToyPolicyParams& student, const lm::ToyPolicyParams& teacher,
                             const lm::TokenSequence& student_seq, const lm::TokenSequence& teacher_seq,
                             const TrainConfig& config) {
  if (student_seq.response_length() != teacher_seq.response_length()) {
    throw Error(ErrorCode::kShapeMismatch, "student and teacher responses differ in length");
  }
  const auto q = teacher_distributions(teacher, teacher_seq);
  const auto r = distill_sample(student, student_seq, q, config, 0.0, {});
  TokenLossRecord rec;
  const Vocab& vocab = Vocab::dsl();
  for (std::size_t j = 0; j < student_seq.response_length(); ++j) {
    rec.tokens.push_back(vocab.symbol(student_seq.ids[student_seq.response_start + j]));
  }
  rec.losses = r.token_losses;
  return rec;
}

double batch_loss(const lm::ToyPolicyParams& student, const std::vector<DistillSample>& samples,
                  const TrainConfig& config, std::span<double> grad) {
  if (!grad.empty() && grad.size() != student.param_count()) {
    throw Error(ErrorCode::kShapeMismatch, "gradient layout does not match params");
  }
  std::vector<double> losses, weights;
  const double n = static_cast<double>(samples.size());
  for (const auto& s : samples) {
    if (s.teacher_probs.size() != s.student_seq.response_length()) {
      throw Error(ErrorCode::kShapeMismatch, "teacher targets do not cover the response");
    }
    losses.push_back(distill_sample(student, s.student_seq, s.teacher_probs, config, s.weight / n, grad).loss);
    weights.push_back(s.weight);
  }
  return div::weighted_batch_loss(losses, weights);
}

namespace {

struct Sample {
  const env::TaskSpec* task = nullptr;
  lm::TokenSequence prompt;
  lm::TokenSequence student_seq;
  Rollout roll;
  bool success = false;
  std::string key;
  advisor::Reflection reflection;
  TeacherInput teacher;
  std::vector<std::vector<double>> teacher_probs;
  double weight = 1.0;
};

std::string response_text(const std::vector<TokenId>& response) { return Vocab::dsl().decode(response); }

}  // namespace

namespace {

// The answer part of a response: everything up to the first closing fence.
std::string previous_trial(const std::string& text) {
  const auto open = text.find("```");
  if (open == std::string::npos) return text;
  const auto close = text.find("```", open + 3);
  if (close == std::string::npos) return text;
  return text.substr(0, close + 3);
}

}  // namespace

MetricsRecord resd_step(RunState& state, const std::vector<env::TaskSpec>& batch, const TrainConfig& config,
                        advisor::Advisor* advisor, TokenLog* token_log) {
  check_sizes(batch);
  const bool plain = config.mode == Mode::kSdpoPlain;
  if (!plain && advisor == nullptr) throw Error(ErrorCode::kInvalidArgument, "resd mode needs an advisor");
  const std::size_t n = batch.size() * config.rollouts_per_prompt;
  const auto step = static_cast<mem::Step>(state.step);
  MetricsRecord rec;
  rec.step = state.step + 1;

  // Rollout and reward.
  std::vector<Sample> samples(n);
  parallel_for(n, config.threads, [&](std::size_t i) {
    Sample& s = samples[i];
    s.task = &batch[i / config.rollouts_per_prompt];
    s.prompt = prompt_tokens(*s.task, config.prompt);
    s.roll = rollout(state.student, *s.task, s.prompt, config.max_new_tokens, config.sampling,
                     derive_seed(config.seed, kRolloutStream, state.step, i));
    s.success = s.roll.evaluation.reward >= config.success_threshold;
    s.key = env::prompt_key(*s.task);
    s.student_seq = s.prompt;
    s.student_seq.ids.insert(s.student_seq.ids.end(), s.roll.response.begin(), s.roll.response.end());
  });
  state.rollouts += n;

  // Context update.
  if (!plain) {
    const auto trigger = mem::concise_trigger(state.playbook, step, static_cast<mem::Step>(state.steps_since_concise));
    if (trigger != mem::ConciseTrigger::kNone) {
      Rng rng(derive_seed(config.seed, kConciseStream, state.step));
      rec.removed_entries = mem::concise(state.playbook, trigger, step, rng);
      state.steps_since_concise = 0;
    } else {
      ++state.steps_since_concise;
    }
    for (auto& s : samples) {
      if (s.success) {
        state.buffer.put(s.key, {s.roll.response, s.roll.text});
        if (!config.tag_successes) continue;
      }
      const auto prev = state.attempts.find(s.key);
      advisor::ReflectRequest req;
      req.task = s.task;
      req.trajectory = s.roll.text;
      req.feedback = &s.roll.evaluation.feedback;
      req.success = s.success;
      req.playbook = &state.playbook;
      if (prev != state.attempts.end()) req.previous_failure = prev->second;
      try {
        advisor::Reflection r = advisor->reflect(req);
        mem::apply_tags(state.playbook, r.tags, step);
        if (!s.success) {
          ++rec.reflections;
          const auto candidates = advisor->curate(state.playbook, r);
          rec.added_entries += mem::add_entries(state.playbook, candidates, step);
          if (r.category) state.attempts[s.key] = *r.category;
          s.reflection = std::move(r);
        }
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kAdvisorUnavailable) throw;
        ++rec.advisor_failures;
        if (!s.success) {
          if (const auto cat = advisor::categorize_feedback(s.roll.evaluation.feedback)) state.attempts[s.key] = *cat;
        }
      }
    }
  }

  // Enriched contexts and teacher targets under the post-update playbook.
  const std::string playbook_text = plain ? std::string() : mem::render_playbook(state.playbook, config.playbook_char_budget);
  for (auto& s : samples) {
    EnrichedContext ctx;
    ctx.previous = previous_trial(s.roll.text);
    ctx.feedback = s.roll.evaluation.feedback.render();
    if (!plain) {
      ctx.playbook = playbook_text;
      ctx.reflection = s.reflection.text;
      if (auto sol = state.buffer.get(s.key)) ctx.solution = response_text(sol->response);
    }
    s.teacher = build_teacher_input(std::move(ctx), s.prompt, s.roll.response, state.student.config.context_window);
    rec.context_drops += s.teacher.drops;
  }
  parallel_for(n, config.threads, [&](std::size_t i) {
    samples[i].teacher_probs = teacher_distributions(state.teacher, samples[i].teacher.sequence);
  });

  // Weights.
  std::vector<double> rewards;
  for (const auto& s : samples) rewards.push_back(s.roll.evaluation.reward);
  rec.reward_mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(n);
  rec.success_rate = div::success_rate(rewards, config.success_threshold);
  std::vector<double> weights(n, 1.0);
  if (config.reweight) {
    div::WeightConfig wc = config.weights;
    wc.success_threshold = config.success_threshold;
    weights = div::sample_weights(rewards, wc);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (plain && samples[i].success && !config.self_success) weights[i] = 0.0;
    samples[i].weight = weights[i];
  }
  rec.weight_min = *std::min_element(weights.begin(), weights.end());
  rec.weight_max = *std::max_element(weights.begin(), weights.end());

  // Policy update: K iterations over the same rollouts and contexts.
  const std::size_t p = state.student.param_count();
  for (std::size_t k = 0; k < config.inner_iters; ++k) {
    std::vector<std::vector<double>> grads(n);
    std::vector<DistillResult> results(n);
    parallel_for(n, config.threads, [&](std::size_t i) {
      const Sample& s = samples[i];
      if (s.weight == 0.0 && k > 0) return;
      grads[i].assign(p, 0.0);
      results[i] = distill_sample(state.student, s.student_seq, s.teacher_probs, config,
                                  s.weight / static_cast<double>(n), grads[i]);
    });
    if (k == 0) {
      std::vector<double> losses;
      std::size_t distilled = 0;
      double raw = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        losses.push_back(results[i].loss);
        if (samples[i].weight != 0.0) {
          raw += results[i].loss;
          ++distilled;
        }
        if (token_log) {
          TokenLossRecord tl;
          const auto& seq = samples[i].student_seq;
          for (std::size_t j = 0; j < seq.response_length(); ++j) {
            tl.tokens.push_back(Vocab::dsl().symbol(seq.ids[seq.response_start + j]));
          }
          tl.losses = results[i].token_losses;
          token_log->emplace_back(samples[i].task->id, std::move(tl));
        }
      }
      rec.loss_raw = distilled ? raw / static_cast<double>(distilled) : 0.0;
      rec.loss_weighted = div::weighted_batch_loss(losses, weights);
    }
    std::vector<double> total(p, 0.0);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (grads[i].empty()) continue;
      any = true;
      for (std::size_t j = 0; j < p; ++j) total[j] += grads[i][j];
    }
    if (!any) break;
    lm::optimizer_step(state.student, total, state.optimizer.updates + 1, config.optimizer, state.optimizer);
  }
  ema_sync(state.teacher, state.student, config.ema_rate);

  ++state.step;
  rec.rollouts = state.rollouts;
  rec.playbook_size = state.playbook.size();
  rec.playbook_status = status_counts(state.playbook);
  rec.buffer_size = state.buffer.size();
  return rec;
}

std::vector<double> group_advantages(const std::vector<double>& rewards) {
  std::vector<double> a(rewards.size(), 0.0);
  if (rewards.empty()) return a;
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
  double var = 0.0;
  bool equal = true;
  for (double r : rewards) {
    var += (r - mean) * (r - mean);
    equal = equal && r == rewards.front();
  }
  if (equal) return a;
  const double sd = std::sqrt(var / static_cast<double>(rewards.size()));
  for (std::size_t i = 0; i < rewards.size(); ++i) a[i] = (rewards[i] - mean) / (sd + 1e-8);
  return a;
}

namespace {

struct GrpoSample {
  lm::TokenSequence seq;
  std::vector<double> behavior;  // pi_old(y_t) at rollout time
  double advantage = 0.0;
  double reward = 0.0;
};

// Clipped surrogate of one sample; accumulates scale * gradient of the
// negated objective into grad when non-empty.
double grpo_sample(const lm::ToyPolicyParams& params, const GrpoSample& s, double clip, double scale,
                   std::span<double> grad) {
  const std::size_t v = params.config.vocab_size;
  lm::ForwardPass pass(params);
  for (TokenId id : s.seq.ids) pass.push(id);
  lm::Logits upstream{s.seq.size(), v, std::vector<double>(s.seq.size() * v, 0.0)};
  double objective = 0.0;
  const double a = s.advantage;
  for (std::size_t j = 0; j < s.seq.response_length(); ++j) {
    const std::size_t row = s.seq.response_start + j - 1;
    const auto y = static_cast<std::size_t>(s.seq.ids[s.seq.response_start + j]);
    const auto p = softmax(pass.logits(row));
    const double rho = p[y] / s.behavior[j];
    const double unclipped = rho * a;
    const double clipped = std::clamp(rho, 1.0 - clip, 1.0 + clip) * a;
    objective += std::min(unclipped, clipped);
    if (!grad.empty() && unclipped <= clipped && a != 0.0) {
      // d(-scale * rho * A)/dz_k = -scale * A * rho * (1[k=y] - p_k)
      auto out = upstream.row(row);
      for (std::size_t k = 0; k < v; ++k) out[k] = scale * a * rho * p[k];
      out[y] -= scale * a * rho;
    }
  }
  if (!grad.empty()) pass.backward(upstream, grad);
  return objective;
}

}  // namespace

MetricsRecord grpo_step(RunState& state, const std::vector<env::TaskSpec>& batch, const TrainConfig& config) {
  check_sizes(batch);
  const std::size_t g = config.group_size;
  const std::size_t n = batch.size() * g;
  MetricsRecord rec;
  rec.step = state.step + 1;

  std::vector<GrpoSample> samples(n);
  std::vector<double> rewards(n);
  parallel_for(n, config.threads, [&](std::size_t i) {
    const auto& task = batch[i / g];
    const auto prompt = prompt_tokens(task, config.prompt);
    const auto r = rollout(state.student, task, prompt, config.max_new_tokens, config.sampling,
                           derive_seed(config.seed, kRolloutStream, state.step, i));
    GrpoSample& s = samples[i];
    s.seq = prompt;
    s.seq.ids.insert(s.seq.ids.end(), r.response.begin(), r.response.end());
    s.reward = r.evaluation.reward;
    rewards[i] = s.reward;
    const auto logits = lm::forward_logits(state.student, s.seq);
    for (std::size_t j = 0; j < s.seq.response_length(); ++j) {
      const auto p = softmax(logits.row(s.seq.response_start + j - 1));
      s.behavior.push_back(p[static_cast<std::size_t>(s.seq.ids[s.seq.response_start + j])]);
    }
  });
  state.rollouts += n;
  std::size_t total_tokens = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::vector<double> group(rewards.begin() + static_cast<std::ptrdiff_t>(b * g),
                                    rewards.begin() + static_cast<std::ptrdiff_t>((b + 1) * g));
    const auto adv = group_advantages(group);
    for (std::size_t j = 0; j < g; ++j) samples[b * g + j].advantage = adv[j];
  }
  for (const auto& s : samples) total_tokens += s.seq.response_length();
  rec.reward_mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(n);
  rec.success_rate = div::success_rate(rewards, config.success_threshold);

  const bool any_signal = std::any_of(samples.begin(), samples.end(), [](const GrpoSample& s) { return s.advantage != 0.0; });
  const double scale = total_tokens ? 1.0 / static_cast<double>(total_tokens) : 0.0;
  const std::size_t p = state.student.param_count();
  for (std::size_t k = 0; k < config.inner_iters && any_signal; ++k) {
    std::vector<std::vector<double>> grads(n);
    std::vector<double> objectives(n, 0.0);
    parallel_for(n, config.threads, [&](std::size_t i) {
      if (samples[i].advantage == 0.0) return;
      grads[i].assign(p, 0.0);
      objectives[i] = grpo_sample(state.student, samples[i], config.grpo_clip, scale, grads[i]);
    });
    if (k == 0) {
      const double obj = std::accumulate(objectives.begin(), objectives.end(), 0.0);
      rec.loss_raw = rec.loss_weighted = -obj * scale;
    }
    std::vector<double> total(p, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (grads[i].empty()) continue;
      for (std::size_t j = 0; j < p; ++j) total[j] += grads[i][j];
    }
    lm::optimizer_step(state.student, total, state.optimizer.updates + 1, config.optimizer, state.optimizer);
  }

  ++state.step;
  rec.rollouts = state.rollouts;
  rec.buffer_size = state.buffer.size();
  return rec;
}

ValidationBlock aggregate_validation(const std::vector<std::vector<SampleOutcome>>& outcomes) {
  ValidationBlock v;
  if (outcomes.empty()) return v;
  auto bin = [](double a) { return a == 0.0 ? 0 : (a == 1.0 ? 2 : 1); };
  for (const auto& task : outcomes) {
    if (task.empty()) throw Error(ErrorCode::kInvalidArgument, "validation task without samples");
    double pass_sum = 0.0, pass_max = 0.0, reward_sum = 0.0, reward_max = 0.0;
    for (const auto& s : task) {
      const double pass = s.passed_all ? 1.0 : 0.0;
      pass_sum += pass;
      pass_max = std::max(pass_max, pass);
      reward_sum += s.reward;
      reward_max = std::max(reward_max, s.reward);
    }
    const double k = static_cast<double>(task.size());
    v.task_mean += pass_sum / k;
    v.task_best += pass_max;
    v.case_mean += reward_sum / k;
    v.case_best += reward_max;
    v.task_hist[bin(pass_sum / k)] += 1.0;
    v.case_hist[bin(reward_sum / k)] += 1.0;
  }
  const double t = static_cast<double>(outcomes.size());
  v.task_mean /= t;
  v.task_best /= t;
  v.case_mean /= t;
  v.case_best /= t;
  for (auto& h : v.task_hist) h /= t;
  for (auto& h : v.case_hist) h /= t;
  return v;
}

ValidationBlock validate(const lm::ToyPolicyParams& params, const std::vector<env::TaskSpec>& tasks,
                         const TrainConfig& config) {
  if (config.eval_k < 1) throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");
  const std::size_t k = config.eval_k;
  std::vector<std::vector<SampleOutcome>> outcomes(tasks.size(), std::vector<SampleOutcome>(k));
  std::vector<char> parsed(tasks.size() * k, 0);
  lm::SamplingConfig sampling{config.eval_temperature, config.eval_top_p, -1};
  parallel_for(tasks.size() * k, config.threads, [&](std::size_t i) {
    const std::size_t t = i / k, j = i % k;
    const auto prompt = prompt_tokens(tasks[t], config.prompt);
    const auto r = rollout(params, tasks[t], prompt, config.max_new_tokens, sampling,
                           derive_seed(config.seed, kEvalStream, t, j));
    outcomes[t][j] = {r.evaluation.reward, r.evaluation.reward >= 1.0};
    parsed[i] = r.evaluation.feedback.kind != env::FeedbackKind::kParseError;
  });
  ValidationBlock v = aggregate_validation(outcomes);
  v.parseable = static_cast<std::size_t>(std::count(parsed.begin(), parsed.end(), 1));
  return v;
}

std::vector<double> rank_sums(const std::vector<ValidationBlock>& history) {
  const std::size_t n = history.size();
  std::vector<double> sums(n, 0.0);
  const std::array<double ValidationBlock::*, 4> metrics = {&ValidationBlock::task_mean, &ValidationBlock::task_best,
                                                            &ValidationBlock::case_mean, &ValidationBlock::case_best};
  for (auto m : metrics) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return history[a].*m < history[b].*m; });
    // Ascending ranks 1..n; tied values share their average rank.
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && history[order[j + 1]].*m == history[order[i]].*m) ++j;
      const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
      for (std::size_t r = i; r <= j; ++r) sums[order[r]] += avg;
      i = j + 1;
    }
  }
  return sums;
}

std::size_t select_checkpoint(const std::vector<ValidationBlock>& history) {
  if (history.empty()) throw Error(ErrorCode::kInvalidArgument, "no validation history to select from");
  const auto sums = rank_sums(history);
  std::size_t best = 0;
  for (std::size_t i = 1; i < sums.size(); ++i) {
    const bool better = sums[i] > sums[best] ||
                        (sums[i] == sums[best] && history[i].step < history[best].step);
    if (better) best = i;
  }
  return best;
}

// Serialization.

namespace {

json validation_to_json(const ValidationBlock& v) {
  return json{{"step", v.step},
              {"task_mean", v.task_mean},
              {"task_best", v.task_best},
              {"case_mean", v.case_mean},
              {"case_best", v.case_best},
              {"task_hist", v.task_hist},
              {"case_hist", v.case_hist},
              {"parseable", v.parseable}};
}

ValidationBlock validation_from_json(const json& j) {
  ValidationBlock v;
  v.step = j.at("step").get<std::size_t>();
  v.task_mean = j.at("task_mean").get<double>();
  v.task_best = j.at("task_best").get<double>();
  v.case_mean = j.at("case_mean").get<double>();
  v.case_best = j.at("case_best").get<double>();
  v.task_hist = j.at("task_hist").get<std::array<double, 3>>();
  v.case_hist = j.at("case_hist").get<std::array<double, 3>>();
  v.parseable = j.at("parseable").get<std::size_t>();
  return v;
}

}  // namespace

std::string metrics_json(const MetricsRecord& r, Mode mode) {
  json j{{"schema", "resd.metrics.v1"},
         {"mode", to_string(mode)},
         {"step", r.step},
         {"rollouts", r.rollouts},
         {"reward_mean", r.reward_mean},
         {"success_rate", r.success_rate},
         {"loss_raw", r.loss_raw},
         {"loss_weighted", r.loss_weighted},
         {"weight_min", r.weight_min},
         {"weight_max", r.weight_max},
         {"playbook_size", r.playbook_size},
         {"playbook_status", {{"unused", r.playbook_status[0]}, {"harmful", r.playbook_status[1]}, {"helpful", r.playbook_status[2]}}},
         {"reflections", r.reflections},
         {"added_entries", r.added_entries},
         {"removed_entries", r.removed_entries},
         {"advisor_failures", r.advisor_failures},
         {"context_drops", r.context_drops},
         {"buffer_size", r.buffer_size}};
  j["validation"] = r.validation ? validation_to_json(*r.validation) : json(nullptr);
  return j.dump();
}

MetricsRecord parse_metrics_json(const std::string& line) {
  try {
    const auto j = json::parse(line);
    if (j.at("schema") != "resd.metrics.v1") throw Error(ErrorCode::kFormat, "unsupported metrics schema");
    MetricsRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.rollouts = j.at("rollouts").get<std::size_t>();
    r.reward_mean = j.at("reward_mean").get<double>();
    r.success_rate = j.at("success_rate").get<double>();
    r.loss_raw = j.at("loss_raw").get<double>();
    r.loss_weighted = j.at("loss_weighted").get<double>();
    r.weight_min = j.at("weight_min").get<double>();
    r.weight_max = j.at("weight_max").get<double>();
    r.playbook_size = j.at("playbook_size").get<std::size_t>();
    const auto& st = j.at("playbook_status");
    r.playbook_status = {st.at("unused").get<std::size_t>(), st.at("harmful").get<std::size_t>(),
                         st.at("helpful").get<std::size_t>()};
    r.reflections = j.at("reflections").get<std::size_t>();
    r.added_entries = j.at("added_entries").get<std::size_t>();
    r.removed_entries = j.at("removed_entries").get<std::size_t>();
    r.advisor_failures = j.at("advisor_failures").get<std::size_t>();
    r.context_drops = j.at("context_drops").get<std::size_t>();
    r.buffer_size = j.at("buffer_size").get<std::size_t>();
    if (!j.at("validation").is_null()) r.validation = validation_from_json(j.at("validation"));
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormat, std::string("bad metrics record: ") + e.what());
  }
}

std::string validation_csv(const std::vector<ValidationBlock>& validations) {
  std::ostringstream os;
  os.precision(17);
  os << "step,metric,value\n";
  for (const auto& v : validations) {
    os << v.step << ",task_mean," << v.task_mean << '\n'
       << v.step << ",task_best," << v.task_best << '\n'
       << v.step << ",case_mean," << v.case_mean << '\n'
       << v.step << ",case_best," << v.case_best << '\n'
       << v.step << ",case_hist_0," << v.case_hist[0] << '\n'
       << v.step << ",case_hist_mid," << v.case_hist[1] << '\n'
       << v.step << ",case_hist_1," << v.case_hist[2] << '\n'
       << v.step << ",task_hist_0," << v.task_hist[0] << '\n'
       << v.step << ",task_hist_mid," << v.task_hist[1] << '\n'
       << v.step << ",task_hist_1," << v.task_hist[2] << '\n';
  }
  return os.str();
}

std::string curves_csv(const std::vector<MetricsRecord>& history) {
  std::ostringstream os;
  os.precision(17);
  os << "step,metric,value\n";
  for (const auto& r : history) {
    os << r.step << ",rollouts," << r.rollouts << '\n'
       << r.step << ",reward_mean," << r.reward_mean << '\n'
       << r.step << ",success_rate," << r.success_rate << '\n'
       << r.step << ",loss_raw," << r.loss_raw << '\n'
       << r.step << ",loss_weighted," << r.loss_weighted << '\n'
       << r.step << ",playbook_size," << r.playbook_size << '\n';
    if (r.validation) {
      const std::string rows = validation_csv({*r.validation});
      os << rows.substr(rows.find('\n') + 1);
    }
  }
  return os.str();
}

namespace {

void write_doubles(std::ostream& out, const std::vector<double>& xs) {
  for (double x : xs) {
    const auto bits = std::bit_cast<std::uint64_t>(x);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(bits >> (8 * i));
    out.write(b, 8);
  }
}

std::vector<double> read_doubles(std::istream& in, std::size_t n) {
  std::vector<double> xs(n);
  for (auto& x : xs) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw Error(ErrorCode::kFormat, "truncated optimizer snapshot");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    x = std::bit_cast<double>(bits);
  }
  return xs;
}

std::ofstream open_out(const fs::path& p, bool binary = false) {
  std::ofstream out(p, binary ? std::ios::binary : std::ios::out);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + p.string());
  return out;
}

std::ifstream open_in(const fs::path& p, bool binary = false) {
  std::ifstream in(p, binary ? std::ios::binary : std::ios::in);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + p.string());
  return in;
}

}  // namespace

void save_checkpoint(const std::string& dir, const RunState& state, Mode mode) {
  const fs::path d(dir);
  fs::create_directories(d);
  lm::save_params((d / "student.params").string(), state.student);
  lm::save_params((d / "teacher.params").string(), state.teacher);
  {
    auto out = open_out(d / "optimizer.bin", true);
    out << "resd-optimizer 1\n" << state.optimizer.updates << ' ' << state.optimizer.m.size() << '\n';
    write_doubles(out, state.optimizer.m);
    write_doubles(out, state.optimizer.v);
  }
  mem::save_playbook((d / "playbook.txt").string(), state.playbook);
  {
    auto out = open_out(d / "buffer.txt");
    mem::write_buffer(out, state.buffer);
  }
  {
    auto out = open_out(d / "state.txt");
    out << "resd-state 1\n"
        << "step " << state.step << '\n'
        << "steps_since_concise " << state.steps_since_concise << '\n'
        << "rollouts " << state.rollouts << '\n';
    for (const auto& [key, cat] : state.attempts) out << "attempt " << key << ' ' << advisor::to_string(cat) << '\n';
    out << "end\n";
  }
  {
    auto out = open_out(d / "history.jsonl");
    for (const auto& r : state.history) out << metrics_json(r, mode) << '\n';
  }
  auto marker = open_out(d / "STEP");
  marker << state.step << '\n';
}

RunState load_checkpoint(const std::string& dir) {
  const fs::path d(dir);
  if (!fs::exists(d / "STEP")) throw Error(ErrorCode::kIo, "not a checkpoint directory: " + dir);
  RunState s;
  s.student = lm::load_params((d / "student.params").string());
  s.teacher = lm::load_params((d / "teacher.params").string());
  if (!s.student.same_layout(s.teacher)) throw Error(ErrorCode::kLayoutMismatch, "checkpoint teacher/student layouts differ");
  {
    auto in = open_in(d / "optimizer.bin", true);
    std::string magic;
    std::getline(in, magic);
    if (magic != "resd-optimizer 1") throw Error(ErrorCode::kFormat, "bad optimizer snapshot magic");
    std::size_t n = 0;
    in >> s.optimizer.updates >> n;
    in.get();
    s.optimizer.m = read_doubles(in, n);
    s.optimizer.v = read_doubles(in, n);
  }
  s.playbook = mem::load_playbook((d / "playbook.txt").string());
  {
    auto in = open_in(d / "buffer.txt");
    s.buffer = mem::read_buffer(in);
  }
  {
    auto in = open_in(d / "state.txt");
    std::string line;
    int line_no = 1;
    if (!std::getline(in, line) || line != "resd-state 1") throw Error(ErrorCode::kFormat, "state.txt line 1: bad magic");
    bool ended = false;
    while (std::getline(in, line)) {
      ++line_no;
      std::istringstream ls(line);
      std::string key;
      ls >> key;
      if (key == "end") {
        ended = true;
        break;
      }
      bool ok = true;
      if (key == "step") ok = static_cast<bool>(ls >> s.step);
      else if (key == "steps_since_concise") ok = static_cast<bool>(ls >> s.steps_since_concise);
      else if (key == "rollouts") ok = static_cast<bool>(ls >> s.rollouts);
      else if (key == "attempt") {
        std::string k, cat;
        ok = static_cast<bool>(ls >> k >> cat);
        if (ok) {
          try {
            s.attempts[k] = advisor::parse_failure_category(cat);
          } catch (const Error&) {
            ok = false;
          }
        }
      } else {
        ok = false;
      }
      if (!ok) throw Error(ErrorCode::kFormat, "state.txt line " + std::to_string(line_no) + ": malformed");
    }
    if (!ended) throw Error(ErrorCode::kFormat, "state.txt: missing end line");
  }
  {
    auto in = open_in(d / "history.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) s.history.push_back(parse_metrics_json(line));
    }
  }
  return s;
}

namespace {

std::unique_ptr<advisor::Advisor> make_advisor(const TrainConfig& config) {
  if (config.mode != Mode::kResd) return nullptr;
  if (config.advisor == AdvisorKind::kExternal) return std::make_unique<advisor::ExternalAdvisor>(config.external);
  return std::make_unique<advisor::ScriptedAdvisor>();
}

std::string step_dir(const std::string& out, std::size_t step) {
  std::ostringstream os;
  os << "step-";
  os.width(5);
  os.fill('0');
  os << step;
  return (fs::path(out) / "checkpoints" / os.str()).string();
}

}  // namespace

StreamResult run_stream(const lm::ModelConfig& model, const std::vector<env::TaskSpec>& train,
                        const std::vector<env::TaskSpec>& test, const TrainConfig& config,
                        const StreamOptions& options) {
  config.validate();
  model.validate();
  StreamResult result;
  result.state = RunState::fresh(model, config);
  RunState& state = result.state;
  auto advisor = make_advisor(config);
  const bool files = !options.out_dir.empty();

  std::ofstream metrics, timing, token_log;
  if (files) {
    fs::create_directories(options.out_dir);
    metrics = open_out(fs::path(options.out_dir) / "metrics.jsonl");
    timing = open_out(fs::path(options.out_dir) / "timing.jsonl");
    if (options.log_token_losses) token_log = open_out(fs::path(options.out_dir) / "token_losses.jsonl");
  }
  const auto started = std::chrono::steady_clock::now();

  auto checkpoint = [&](const std::string& dir) {
    save_checkpoint(dir, state, config.mode);
    if (!options.config_text.empty()) open_out(fs::path(dir) / "config.txt") << options.config_text;
  };
  auto run_validation = [&](MetricsRecord& rec) {
    if (test.empty()) return;
    ValidationBlock v = validate(state.student, test, config);
    v.step = state.step;
    rec.validation = v;
    result.validations.push_back(v);
    if (files) checkpoint(step_dir(options.out_dir, state.step));
  };
  auto emit = [&](const MetricsRecord& rec) {
    state.history.push_back(rec);
    if (!files) return;
    metrics << metrics_json(rec, config.mode) << '\n';
    metrics.flush();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    timing << json{{"step", rec.step}, {"wall_seconds", secs}}.dump() << '\n';
  };

  // Step 0 validates the initial policy.
  MetricsRecord initial;
  initial.playbook_size = 0;
  run_validation(initial);
  emit(initial);

  const std::size_t b = config.batch_size;
  const std::size_t steps = (train.size() + b - 1) / b;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::vector<env::TaskSpec> batch(train.begin() + static_cast<std::ptrdiff_t>(s * b),
                                           train.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), (s + 1) * b)));
    TokenLog tokens;
    MetricsRecord rec = config.mode == Mode::kGrpo
                            ? grpo_step(state, batch, config)
                            : resd_step(state, batch, config, advisor.get(), options.log_token_losses ? &tokens : nullptr);
    if (files && options.log_token_losses) {
      for (const auto& [id, tl] : tokens) {
        token_log << json{{"step", rec.step}, {"task", id}, {"tokens", tl.tokens}, {"losses", tl.losses}}.dump() << '\n';
      }
    }
    const bool last = s + 1 == steps;
    if (last || (config.validate_every > 0 && state.step % config.validate_every == 0)) {
      run_validation(rec);
    } else if (files && options.checkpoint_every > 0 && state.step % options.checkpoint_every == 0) {
      checkpoint(step_dir(options.out_dir, state.step));
    }
    emit(rec);
  }

  if (!result.validations.empty()) result.selected = select_checkpoint(result.validations);
  if (files) {
    checkpoint((fs::path(options.out_dir) / "final").string());
    mem::save_playbook((fs::path(options.out_dir) / "playbook.txt").string(), state.playbook);
    auto csv = open_out(fs::path(options.out_dir) / "validation.csv");
    csv << validation_csv(result.validations);
    if (!result.validations.empty()) {
      auto sel = open_out(fs::path(options.out_dir) / "selected.txt");
      sel << "step " << result.validations[result.selected].step << '\n';
    }
  }
  return result;
}

}  // namespace resd::train
