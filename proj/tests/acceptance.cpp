// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any
// selected criterion fails. Arguments select criteria by number (default all).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "resd/divergence.hpp"
#include "resd/env.hpp"
#include "resd/memory.hpp"
#include "resd/rng.hpp"
#include "resd/toylm.hpp"
#include "resd/trainer.hpp"

#ifndef RESD_DATA_DIR
#error "RESD_DATA_DIR must point at the repository data directory"
#endif

using namespace resd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::vector<double> random_dist(Rng& rng, std::size_t n, double floor) {
  std::vector<double> p(n);
  double z = 0.0;
  for (auto& x : p) z += (x = floor + rng.uniform());
  for (auto& x : p) x /= z;
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// 1. f(1) = 0, ReverseKL against the closed form, JSD(0.5) bounds.
Outcome divergence_correctness() {
  const std::vector<div::Divergence> kinds{div::Divergence::forward_kl(), div::Divergence::reverse_kl(),
                                           div::Divergence::jsd(0.5), div::Divergence::jsd(0.2)};
  for (const auto& d : kinds) {
    if (div::f_value(d, 1.0) != 0.0) return {false, "f(1) != 0 for " + div::to_string(d.kind)};
  }
  Rng rng(11);
  const div::ClipRange open{1e-12, std::numeric_limits<double>::infinity()};
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + rng.below(30);
    const auto p = random_dist(rng, n, 0.05);
    const auto q = random_dist(rng, n, 0.05);
    const auto pair = div::truncate_top_k(p, q, n);
    double kl = 0.0;
    for (std::size_t v = 0; v < n; ++v) kl += p[v] * std::log(p[v] / q[v]);
    worst = std::max(worst, std::abs(div::per_token_loss(pair, div::Divergence::reverse_kl(), open) - kl));
  }
  if (worst > 1e-9) return {false, "ReverseKL off closed form by " + fmt("%.3g", worst)};
  double lo = 1.0, hi = -1.0;
  for (int a = 1; a < 20; ++a) {
    for (int b = 1; b < 20; ++b) {
      const double pa = a / 20.0, qb = b / 20.0;
      const std::vector<double> p{pa, 1 - pa}, q{qb, 1 - qb};
      const double l = div::per_token_loss(div::truncate_top_k(p, q, 2), div::Divergence::jsd(0.5), open);
      lo = std::min(lo, l);
      hi = std::max(hi, l);
    }
  }
  const bool bounded = lo >= -1e-15 && hi <= std::log(2.0);
  return {bounded, "max |KL - closed form| " + fmt("%.2g", worst) + ", JSD grid in [" + fmt("%.3g", lo) + ", " +
                       fmt("%.4f", hi) + "]"};
}

// 2. Full weighted batch loss gradient against central differences.
Outcome gradient_fidelity() {
  const std::vector<div::Divergence> kinds{div::Divergence::reverse_kl(), div::Divergence::forward_kl(),
                                           div::Divergence::jsd(0.5)};
  double worst = 0.0;
  std::size_t instances = 0, max_params = 0, redraws = 0;
  Rng rng(23);
  for (std::uint64_t seed = 0; instances < 24; ++seed) {
    lm::ModelConfig mc;
    mc.vocab_size = 16;
    mc.context_window = 64;
    mc.hidden_dim = 5;
    mc.num_layers = 2;
    mc.mix_window = 2;
    mc.seed = seed;
    const auto student = lm::ToyPolicyParams::init(mc);
    auto tc = mc;
    tc.seed = seed + 1000;
    const auto teacher = lm::ToyPolicyParams::init(tc);
    train::TrainConfig cfg;
    cfg.divergence = kinds[seed % kinds.size()];

    std::vector<train::DistillSample> samples;
    std::vector<double> rewards;
    auto tok = [&] { return static_cast<TokenId>(rng.below(mc.vocab_size)); };
    for (int s = 0; s < 3; ++s) {
      lm::TokenSequence stu, tea;
      for (int j = 0; j < 4; ++j) tea.ids.push_back(tok());
      for (int j = 0; j < 6; ++j) {
        const TokenId t = tok();
        stu.ids.push_back(t);
        tea.ids.push_back(t);
      }
      stu.response_start = stu.ids.size();
      tea.response_start = tea.ids.size();
      for (int j = 0; j < 5; ++j) {
        const TokenId t = tok();
        stu.ids.push_back(t);
        tea.ids.push_back(t);
      }
      samples.push_back({stu, train::teacher_distributions(teacher, tea), 1.0});
      rewards.push_back(s == 0 ? 1.0 : rng.uniform() * 0.9);
    }
    const auto w = div::sample_weights(rewards, {});
    for (std::size_t s = 0; s < samples.size(); ++s) samples[s].weight = w[s];

    // Clipping makes the loss piecewise; redraw instances with a ratio
    // within 1% of a clip edge.
    bool near_edge = false;
    for (const auto& s : samples) {
      const auto z = lm::forward_logits(student, s.student_seq);
      for (std::size_t j = 0; j < s.student_seq.response_length(); ++j) {
        const auto p = lm::next_distribution(z.row(s.student_seq.response_start + j - 1), 1.0);
        for (std::size_t v = 0; v < p.size(); ++v) {
          const double tau = s.teacher_probs[j][v] / std::max(p[v], div::kStudentProbFloor);
          for (double edge : {cfg.clip.eps_min, cfg.clip.eps_max}) {
            if (std::abs(tau / edge - 1.0) < 1e-2) near_edge = true;
          }
        }
      }
    }
    if (near_edge) {
      ++redraws;
      continue;
    }

    std::vector<double> grad(student.param_count(), 0.0);
    train::batch_loss(student, samples, cfg, grad);
    max_params = std::max(max_params, student.param_count());
    double num2 = 0.0, den2 = 0.0;
    std::set<std::size_t> coords;
    while (coords.size() < 40) coords.insert(rng.below(student.param_count()));
    for (std::size_t c : coords) {
      auto plus = student, minus = student;
      const float x = student.values[c];
      const float h = 1e-3f * std::max(1.0f, std::abs(x));
      plus.values[c] = x + h;
      minus.values[c] = x - h;
      const double step = static_cast<double>(plus.values[c]) - static_cast<double>(minus.values[c]);
      const double fd = (train::batch_loss(plus, samples, cfg) - train::batch_loss(minus, samples, cfg)) / step;
      num2 += (fd - grad[c]) * (fd - grad[c]);
      den2 += fd * fd;
    }
    worst = std::max(worst, std::sqrt(num2) / std::max(std::sqrt(den2), 1e-12));
    ++instances;
  }
  return {worst < 1e-4 && max_params <= 2000,
          std::to_string(instances) + " instances, " + std::to_string(max_params) + " params, max rel err " +
              fmt("%.2g", worst) + ", " + std::to_string(redraws) + " redrawn near clip edges"};
}

// 3. Sample weights.
Outcome weighting_contract() {
  Rng rng(5);
  const div::WeightConfig wc;
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t n = 2 + rng.below(63);
    std::vector<double> r(n);
    for (auto& x : r) x = rng.uniform() < 0.3 ? 1.0 : rng.uniform() * 0.99;
    r[0] = 1.0;
    r[1] = 0.5;
    const auto w = div::sample_weights(r, wc);
    worst = std::max(worst, std::abs(std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(n) - 1.0));
  }
  bool degenerate = true;
  for (const auto& r : {std::vector<double>{1, 1, 1}, std::vector<double>{0, 0.2, 0.7, 0.9}}) {
    for (double x : div::sample_weights(r, wc)) degenerate = degenerate && x == 1.0;
  }
  const auto ex = div::sample_weights(std::vector<double>{1, 0, 0, 0}, wc);
  const bool example = std::abs(ex[0] - 2.0) < 1e-12 && std::abs(ex[1] - 2.0 / 3) < 1e-12 &&
                       std::abs(ex[2] - 2.0 / 3) < 1e-12 && std::abs(ex[3] - 2.0 / 3) < 1e-12;
  return {worst <= 1e-12 && degenerate && example,
          "max |mean - 1| " + fmt("%.2g", worst) + (degenerate ? ", degenerate ones" : ", degenerate NOT ones") +
              (example ? ", (1,0,0,0) -> (2, 2/3, 2/3, 2/3)" : ", worked example wrong")};
}

// 4. Random tag/add/concise sequences.
Outcome playbook_lifecycle() {
  Rng rng(7);
  std::size_t sequences = 0, budget_checks = 0, grace_checks = 0;
  std::string failure;
  const std::vector<std::string> categories{"WrongAccept", "WrongReject", "StepLimitLoop", "Truncation"};
  for (; sequences < 10000 && failure.empty(); ++sequences) {
    mem::Playbook pb;
    pb.m_max = 2 + rng.below(8);
    pb.frequency = 1 + rng.below(4);
    pb.method = rng.below(2) ? mem::ConciseMethod::kStaleness : mem::ConciseMethod::kPrioritized;
    std::map<std::uint64_t, std::pair<std::uint64_t, std::uint64_t>> counters;
    mem::Step since = 0;
    const std::size_t ops = 5 + rng.below(40);
    for (mem::Step step = 0; step < static_cast<mem::Step>(ops) && failure.empty(); ++step) {
      // Concise, then tag and add, as in one context-update step.
      const auto trigger = mem::concise_trigger(pb, step, since);
      const auto before = pb.entries;
      mem::concise(pb, trigger, step, rng);
      since = trigger == mem::ConciseTrigger::kNone ? since + 1 : 0;
      if (trigger != mem::ConciseTrigger::kNone) {
        for (const auto& e : pb.entries) {
          if (mem::categorize(e) == mem::EntryStatus::kHarmful) failure = "harmful entry survived concise";
        }
        if (trigger == mem::ConciseTrigger::kLimit) {
          ++budget_checks;
          if (pb.size() > pb.m_max) failure = "size above m_max after budget concise";
        }
        if (pb.method == mem::ConciseMethod::kStaleness) {
          for (const auto& e : before) {
            const bool kept = pb.find(e.id) != nullptr;
            if (mem::categorize(e) != mem::EntryStatus::kUnused) continue;
            ++grace_checks;
            const bool stale = step - e.created_step > 1;
            if (stale && kept) failure = "stale unused entry survived";
            if (!stale && !kept && trigger == mem::ConciseTrigger::kFrequency) {
              failure = "unused entry removed within its grace step";
            }
          }
        }
      }
      std::vector<mem::Tag> tags;
      for (const auto& e : pb.entries) {
        if (rng.below(2)) tags.push_back({e.id, static_cast<mem::TagLabel>(rng.below(3))});
      }
      mem::apply_tags(pb, tags, step);
      std::vector<mem::Candidate> cands;
      for (std::size_t k = rng.below(4); k > 0; --k) {
        cands.push_back({"lesson " + std::to_string(rng.below(12)), categories[rng.below(categories.size())]});
      }
      mem::add_entries(pb, cands, step);
      for (const auto& e : pb.entries) {
        auto [it, fresh] = counters.try_emplace(e.id, e.helpful, e.harmful);
        if (!fresh) {
          if (e.helpful < it->second.first || e.harmful < it->second.second) failure = "counter decreased";
          it->second = {e.helpful, e.harmful};
        }
      }
    }
  }
  return {failure.empty(), failure.empty() ? std::to_string(sequences) + " sequences, " +
                                                 std::to_string(budget_checks) + " budget checks, " +
                                                 std::to_string(grace_checks) + " grace checks"
                                           : failure + " in sequence " + std::to_string(sequences)};
}

// 5. Golden listings.
Outcome dsl_golden() {
  auto listing = [](int step) {
    return slurp(std::string(RESD_DATA_DIR) + "/dsl/step" + std::to_string(step) + ".dsl");
  };
  std::vector<std::string> notes;
  bool ok = true;
  auto check = [&](bool cond, const std::string& what) {
    notes.push_back(what + (cond ? " ok" : " FAILED"));
    ok = ok && cond;
  };
  const auto p45 = env::parse_program(listing(45));
  const auto* e45 = std::get_if<env::ParseError>(&p45);
  check(e45 && e45->offending == "state0", "45 names state0");
  const auto p46 = env::parse_program(listing(46));
  const auto p47 = env::parse_program(listing(47));
  const auto p48 = env::parse_program(listing(48));
  if (!std::holds_alternative<env::Program>(p46) || !std::holds_alternative<env::Program>(p47) ||
      !std::holds_alternative<env::Program>(p48)) {
    return {false, "a golden listing failed to parse"};
  }
  const auto& g46 = std::get<env::Program>(p46);
  const auto& g47 = std::get<env::Program>(p47);
  const auto& g48 = std::get<env::Program>(p48);
  check(env::run_program(g46, "GBRBR").outcome == env::Outcome::kReject, "46 rejects GBRBR");

  std::vector<std::string> tapes{""}, layer{""};
  for (int len = 1; len <= 8; ++len) {
    std::vector<std::string> next;
    for (const auto& t : layer) {
      for (char c : {'R', 'B', 'G', 'Y'}) next.push_back(t + c);
    }
    tapes.insert(tapes.end(), next.begin(), next.end());
    layer = std::move(next);
  }
  std::size_t loops = 0, agree = 0;
  for (const auto& t : tapes) {
    loops += env::run_program(g47, t).outcome == env::Outcome::kStepLimitExceeded;
    agree += (env::run_program(g48, t).outcome == env::Outcome::kAccept) == env::oracle_contains(t, "BRBR");
  }
  check(loops > 0, "47 step limit on " + std::to_string(loops) + " tapes");
  check(agree == tapes.size() && tapes.size() == 87381,
        "48 agrees on " + std::to_string(agree) + "/" + std::to_string(tapes.size()));
  const auto suite = env::generate_suite(0, "BRBR", 50, 8);
  double acc[4];
  acc[0] = env::evaluate(p45, suite).reward;
  acc[1] = env::evaluate(p46, suite).reward;
  acc[2] = env::evaluate(p47, suite).reward;
  acc[3] = env::evaluate(p48, suite).reward;
  check(acc[0] == 0.0 && acc[0] < acc[1] && acc[1] < acc[2] && acc[2] < acc[3] && acc[3] == 1.0,
        "rewards " + fmt("%.2f", acc[0]) + "<" + fmt("%.2f", acc[1]) + "<" + fmt("%.2f", acc[2]) + "<" +
            fmt("%.2f", acc[3]));
  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  return {ok, detail};
}

// Shared end-to-end runs for criteria 6 and 7.
struct EndToEnd {
  struct Seed {
    train::StreamResult resd, sdpo, grpo;
  };
  std::map<std::uint64_t, Seed> seeds;
  std::size_t param_count = 0;

  static train::TrainConfig config(train::Mode mode, std::uint64_t seed) {
    train::TrainConfig c;
    c.mode = mode;
    c.batch_size = 16;
    c.inner_iters = 4;
    c.rollouts_per_prompt = 1;
    c.group_size = 8;
    c.validate_every = 4;
    c.seed = seed;
    return c;
  }

  const Seed& run(std::uint64_t seed, bool with_grpo) {
    auto& s = seeds[seed];
    if (s.resd.validations.empty()) {
      const auto train_tasks = env::generate_tasks(seed, 1, 256, 3, 20, 10, "train");
      const auto test_tasks = env::generate_tasks(seed, 2, 32, 3, 20, 10, "test");
      lm::ModelConfig mc;
      mc.vocab_size = Vocab::dsl().size();
      mc.seed = seed;
      param_count = lm::ToyPolicyParams::init(mc).param_count();
      s.resd = train::run_stream(mc, train_tasks, test_tasks, config(train::Mode::kResd, seed));
      s.sdpo = train::run_stream(mc, train_tasks, test_tasks, config(train::Mode::kSdpoPlain, seed));
    }
    if (with_grpo && s.grpo.validations.empty()) {
      const auto train_tasks = env::generate_tasks(seed, 1, 256, 3, 20, 10, "train");
      const auto test_tasks = env::generate_tasks(seed, 2, 32, 3, 20, 10, "test");
      lm::ModelConfig mc;
      mc.vocab_size = Vocab::dsl().size();
      mc.seed = seed;
      s.grpo = train::run_stream(mc, train_tasks, test_tasks, config(train::Mode::kGrpo, seed));
    }
    return s;
  }
};

EndToEnd& e2e() {
  static EndToEnd runs;
  return runs;
}

// 6. RESD vs sdpo_plain, selected checkpoints.
Outcome end_to_end_trend() {
  std::size_t higher = 0, bin0 = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto& s = e2e().run(seed, false);
    const auto& r = s.resd.validations[s.resd.selected];
    const auto& p = s.sdpo.validations[s.sdpo.selected];
    const double dr = s.resd.validations.front().case_hist[0] - r.case_hist[0];
    const double dp = s.sdpo.validations.front().case_hist[0] - p.case_hist[0];
    higher += r.case_mean > p.case_mean;
    bin0 += dr > dp;
    detail += "seed " + std::to_string(seed) + " m@4 " + fmt("%.3f", r.case_mean) + " vs " + fmt("%.3f", p.case_mean) +
              ", bin0 drop " + fmt("%.3f", dr) + " vs " + fmt("%.3f", dp) + "; ";
  }
  detail += std::to_string(e2e().param_count) + " params";
  return {higher >= 2 && bin0 >= 2 && e2e().param_count <= 200000, detail};
}

// 7. Rollouts RESD needs to reach sdpo_plain's reported m@4, against GRPO's.
// The target is the selected checkpoint; a target already met before
// training does not count.
Outcome interaction_efficiency() {
  std::size_t wins = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto& s = e2e().run(seed, true);
    const double target = s.sdpo.validations[s.sdpo.selected].case_mean;
    const bool trivial = target <= s.resd.validations.front().case_mean;
    std::optional<std::size_t> reached;
    for (const auto& v : s.resd.validations) {
      if (v.case_mean >= target) {
        reached = v.step == 0 ? 0 : s.resd.state.history[v.step].rollouts;
        break;
      }
    }
    const std::size_t grpo = s.grpo.state.rollouts;
    const bool ok = !trivial && reached && *reached * 4 <= grpo;
    wins += ok;
    detail += "seed " + std::to_string(seed) + " target " + fmt("%.3f", target) + " reached at " +
              (reached ? std::to_string(*reached) : std::string("never")) + " of GRPO " + std::to_string(grpo) +
              (trivial ? " (trivial)" : "") + "; ";
  }
  detail.resize(detail.size() - 2);
  return {wins >= 2, detail};
}

// 8. Byte-identical logs and playbooks.
Outcome determinism() {
  const auto train_tasks = env::generate_tasks(9, 1, 48, 3, 20, 10, "train");
  const auto test_tasks = env::generate_tasks(9, 2, 4, 3, 20, 10, "test");
  lm::ModelConfig mc;
  mc.vocab_size = Vocab::dsl().size();
  mc.seed = 9;
  auto cfg = EndToEnd::config(train::Mode::kResd, 9);
  cfg.batch_size = 8;
  cfg.validate_every = 2;
  const fs::path root = fs::temp_directory_path() / ("resd-accept-" + std::to_string(::getpid()));
  fs::remove_all(root);
  std::string files[2][2];
  for (int i = 0; i < 2; ++i) {
    const fs::path dir = root / std::to_string(i);
    train::run_stream(mc, train_tasks, test_tasks, cfg, {dir.string(), 2, false, ""});
    files[i][0] = slurp(dir / "metrics.jsonl");
    files[i][1] = slurp(dir / "playbook.txt");
  }
  fs::remove_all(root);
  const bool same = !files[0][0].empty() && files[0][0] == files[1][0] && files[0][1] == files[1][1];
  return {same, std::to_string(files[0][0].size()) + " bytes of metrics, " + std::to_string(files[0][1].size()) +
                    " bytes of playbook" + (same ? ", identical" : ", DIFFER")};
}

// 9. Rank-sum tables.
Outcome checkpoint_rule() {
  auto b = [](double a, double c, double d, double e) {
    train::ValidationBlock v;
    v.task_mean = a;
    v.task_best = c;
    v.case_mean = d;
    v.case_best = e;
    return v;
  };
  struct Table {
    std::vector<train::ValidationBlock> blocks;
    std::vector<double> sums;
    std::size_t pick;
  };
  const std::vector<Table> tables{
      {{b(.1, .1, .1, .1)}, {4}, 0},
      {{b(.1, .2, .3, .4), b(.5, .6, .7, .8), b(.2, .3, .4, .5)}, {4, 12, 8}, 1},
      {{b(.2, .4, .6, .8), b(.3, .3, .7, .7)}, {6, 6}, 0},
      {{b(.5, .5, .5, .5), b(.5, .5, .5, .5), b(.1, .9, .1, .9)}, {8, 8, 8}, 0},
      {{b(0, .5, .2, .9), b(.1, .4, .3, .8), b(.1, .6, .1, .7), b(.3, .2, .2, .6)}, {10.5, 11.5, 9.5, 8.5}, 1},
  };
  std::size_t ok = 0;
  for (auto t : tables) {
    for (std::size_t i = 0; i < t.blocks.size(); ++i) t.blocks[i].step = 4 * i;
    ok += train::rank_sums(t.blocks) == t.sums && train::select_checkpoint(t.blocks) == t.pick;
  }
  return {ok == tables.size(), std::to_string(ok) + "/" + std::to_string(tables.size()) + " tables match"};
}

struct Criterion {
  int number;
  const char* name;
  double limit_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "divergence correctness", 5, divergence_correctness},
      {2, "gradient fidelity", 120, gradient_fidelity},
      {3, "weighting contract", 5, weighting_contract},
      {4, "playbook lifecycle", 30, playbook_lifecycle},
      {5, "DSL golden tests", 30, dsl_golden},
      {6, "end-to-end trend", 45 * 60, end_to_end_trend},
      {7, "interaction efficiency", 60 * 60, interaction_efficiency},
      {8, "determinism", 10 * 60, determinism},
      {9, "checkpoint rule", 1, checkpoint_rule},
  };
  std::set<int> chosen;
  for (int i = 1; i < argc; ++i) chosen.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!chosen.empty() && !chosen.count(c.number)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.limit_seconds;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("criterion %d %s: %s (%s) %.1fs%s\n", c.number, c.name, pass ? "PASS" : "FAIL", o.detail.c_str(), secs,
                in_time ? "" : " over time limit");
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
