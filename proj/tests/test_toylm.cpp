#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "resd/error.hpp"
#include "resd/toylm.hpp"

using namespace resd;
using namespace resd::lm;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 11;
  c.context_window = 64;
  c.hidden_dim = 5;
  c.num_layers = 2;
  c.mix_window = 3;
  c.copy_min_order = 1;
  c.copy_max_order = 3;
  c.copy_gain_init = 2.0;
  c.seed = 17;
  return c;
}

TokenSequence random_seq(std::mt19937_64& g, std::size_t n, std::size_t vocab) {
  TokenSequence s;
  // Small alphabet so n-grams repeat and the copy channel fires.
  for (std::size_t i = 0; i < n; ++i) s.ids.push_back(static_cast<TokenId>(g() % std::min<std::size_t>(vocab, 4)));
  s.response_start = n / 2;
  return s;
}

// Recomputes every position from scratch, reading weights by layout offset.
std::vector<std::vector<double>> naive_logits(const ToyPolicyParams& p, const std::vector<TokenId>& ids) {
  const auto& c = p.config;
  const ParamLayout lay(c);
  const std::size_t h = c.hidden_dim, v = c.vocab_size, T = ids.size();
  auto w = [&](std::size_t i) { return static_cast<double>(p.values[i]); };
  std::vector<std::vector<double>> x(T, std::vector<double>(h));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < h; ++i) x[t][i] = w(lay.embed + ids[t] * h + i);
  }
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    auto y = x;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < h; ++i) {
        double pre = w(lay.mix_bias[l] + i);
        for (std::size_t o = 0; o < c.mix_window && o <= t; ++o) {
          for (std::size_t j = 0; j < h; ++j) pre += w(lay.mix[l] + o * h * h + i * h + j) * x[t - o][j];
        }
        y[t][i] = x[t][i] + std::tanh(pre);
      }
    }
    x = y;
  }
  std::vector<std::vector<double>> z(T, std::vector<double>(v));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < v; ++k) {
      z[t][k] = w(lay.out_bias + k);
      for (std::size_t i = 0; i < h; ++i) z[t][k] += w(lay.out_weight + k * h + i) * x[t][i];
    }
    for (std::size_t n = c.copy_min_order; n <= c.copy_max_order; ++n) {
      if (t + 1 < n) continue;
      std::map<TokenId, double> counts;
      double total = 0;
      for (std::size_t e = n - 1; e < t; ++e) {
        bool match = true;
        for (std::size_t k = 0; k < n; ++k) match = match && ids[e - k] == ids[t - k];
        if (match) {
          counts[ids[e + 1]] += 1;
          total += 1;
        }
      }
      for (const auto& [tok, cnt] : counts) z[t][tok] += w(lay.copy_gain + n - c.copy_min_order) * cnt / total;
    }
  }
  return z;
}

}  // namespace

TEST(Layout, CountsEveryBlock) {
  const auto c = small_config();
  const ParamLayout lay(c);
  EXPECT_EQ(lay.total, 11u * 5 + 2 * (3 * 5 * 5 + 5) + 11 * 5 + 11 + 3);
  const auto p = ToyPolicyParams::init(c);
  EXPECT_EQ(p.param_count(), lay.total);
  EXPECT_EQ(p.values[lay.copy_gain], 2.0f);
  EXPECT_EQ(p.values[lay.out_bias], 0.0f);
  EXPECT_EQ(p.values, ToyPolicyParams::init(c).values);
}

TEST(Forward, MatchesNaiveOracle) {
  std::mt19937_64 g(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = small_config();
    c.seed = trial;
    c.copy_min_order = 1 + trial % 2;
    const auto p = ToyPolicyParams::init(c);
    const auto seq = random_seq(g, 5 + g() % 30, c.vocab_size);
    const auto got = forward_logits(p, seq);
    const auto want = naive_logits(p, seq.ids);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      for (std::size_t k = 0; k < c.vocab_size; ++k) ASSERT_NEAR(got.row(t)[k], want[t][k], 1e-10);
    }
  }
}

TEST(Forward, ContextOverflowAndBadToken) {
  auto c = small_config();
  c.context_window = 4;
  const auto p = ToyPolicyParams::init(c);
  TokenSequence s{{1, 2, 3, 4, 5}, 0};
  EXPECT_THROW(forward_logits(p, s), Error);
  ForwardPass pass(p);
  EXPECT_THROW(pass.push(11), Error);
}

// Central differences on sum_t <U_t, logits_t>. Parameters are float32, so
// the step actually taken is measured after rounding.
TEST(Backward, MatchesFiniteDifferences) {
  std::mt19937_64 g(9);
  const auto c = small_config();
  auto p = ToyPolicyParams::init(c);
  const auto seq = random_seq(g, 24, c.vocab_size);
  Logits up{seq.size(), c.vocab_size, std::vector<double>(seq.size() * c.vocab_size)};
  std::normal_distribution<double> nd;
  for (double& u : up.data) u = nd(g);
  for (std::size_t k = 0; k < c.vocab_size; ++k) up.row(3)[k] = 0.0;  // skipped row
  const auto grad = logit_gradient_pullback(p, seq, up);
  auto objective = [&] {
    const auto z = forward_logits(p, seq);
    double s = 0.0;
    for (std::size_t i = 0; i < z.data.size(); ++i) s += up.data[i] * z.data[i];
    return s;
  };
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < 300; ++i) idx.push_back(g() % p.param_count());
  const ParamLayout lay(c);
  for (std::size_t n = 0; n < c.copy_orders(); ++n) idx.push_back(lay.copy_gain + n);
  for (std::size_t i : idx) {
    const float x = p.values[i];
    p.values[i] = x + 1e-2f;
    const double hi = objective();
    const double xp = p.values[i];
    p.values[i] = x - 1e-2f;
    const double lo = objective();
    const double xm = p.values[i];
    p.values[i] = x;
    const double fd = (hi - lo) / (xp - xm);
    ASSERT_NEAR(grad[i], fd, 1e-3 + 1e-3 * std::abs(fd)) << "param " << i;
  }
}

TEST(Sampling, DeterministicPerSeed) {
  const auto c = small_config();
  const auto p = ToyPolicyParams::init(c);
  const TokenSequence prompt{{1, 2, 3}, 3};
  SamplingConfig s{1.0, 0.9, 0};
  const auto a = sample_sequence(p, prompt, 20, s, 42);
  EXPECT_EQ(a.ids, sample_sequence(p, prompt, 20, s, 42).ids);
  EXPECT_EQ(a.response_start, 3u);
  EXPECT_LE(a.response_length(), 20u);
  bool differs = false;
  for (std::uint64_t seed = 0; seed < 10 && !differs; ++seed) differs = sample_sequence(p, prompt, 20, s, seed).ids != a.ids;
  EXPECT_TRUE(differs);
  EXPECT_THROW(sample_sequence(p, prompt, 62, s, 1), Error);
}

TEST(Sampling, GreedyFollowsArgmax) {
  const auto c = small_config();
  const auto p = ToyPolicyParams::init(c);
  const TokenSequence prompt{{4, 1}, 2};
  const auto out = sample_sequence(p, prompt, 8, {0.0, 1.0, -1}, 0);
  ASSERT_EQ(out.response_length(), 8u);
  const auto z = forward_logits(p, out);
  for (std::size_t t = 1; t + 1 < out.size(); ++t) {
    const auto row = z.row(t);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    EXPECT_EQ(out.ids[t + 1], best);
  }
}

TEST(Sampling, NucleusKeepsSmallestPrefix) {
  const std::vector<double> p{0.1, 0.5, 0.3, 0.1};
  EXPECT_EQ(sample_nucleus(p, 0.5, 0.99), 1u);
  EXPECT_EQ(sample_nucleus(p, 0.8, 0.99), 2u);
  EXPECT_EQ(sample_nucleus(p, 0.8, 0.0), 1u);
  const auto d = next_distribution(std::vector<double>{0.0, std::log(3.0)}, 1.0);
  EXPECT_NEAR(d[1], 0.75, 1e-12);
  EXPECT_THROW(next_distribution(std::vector<double>{0.0}, 0.0), Error);
}

TEST(Optimizer, WarmupStartsAtZero) {
  OptimizerConfig oc;
  oc.lr = 0.01;
  oc.warmup_steps = 4;
  EXPECT_EQ(effective_lr(oc, 0), 0.0);
  EXPECT_DOUBLE_EQ(effective_lr(oc, 2), 0.005);
  EXPECT_DOUBLE_EQ(effective_lr(oc, 9), 0.01);
  auto p = ToyPolicyParams::init(small_config());
  const auto before = p.values;
  OptimizerState st;
  std::vector<double> grad(p.param_count(), 1.0);
  optimizer_step(p, grad, 0, oc, st);
  EXPECT_EQ(p.values, before);
  EXPECT_EQ(st.updates, 1u);
  optimizer_step(p, grad, 4, oc, st);
  EXPECT_NEAR(p.values[0], before[0] - 0.01, 1e-6);
  grad[0] = NAN;
  EXPECT_THROW(optimizer_step(p, grad, 5, oc, st), Error);
}

TEST(Optimizer, SgdWithClipping) {
  auto p = ToyPolicyParams::zeros(small_config());
  OptimizerConfig oc{OptimizerKind::kSgd, 0.5, 0, 0.9, 0.999, 1e-8, 1.0};
  std::vector<double> grad(p.param_count(), 0.0);
  grad[0] = 3.0;
  grad[1] = 4.0;
  OptimizerState st;
  optimizer_step(p, grad, 0, oc, st);
  EXPECT_FLOAT_EQ(p.values[0], -0.3f);
  EXPECT_FLOAT_EQ(p.values[1], -0.4f);
}

TEST(Snapshot, RoundTripAndErrors) {
  const auto p = ToyPolicyParams::init(small_config());
  std::stringstream ss;
  write_params(ss, p);
  const auto q = read_params(ss);
  EXPECT_EQ(q.config, p.config);
  EXPECT_EQ(q.values, p.values);

  std::stringstream bad("resd-params 2\n");
  EXPECT_THROW(read_params(bad), Error);
  std::stringstream whole;
  write_params(whole, p);
  std::string text = whole.str();
  text.resize(text.size() - 3);
  std::stringstream cut(text);
  try {
    read_params(cut);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kFormat);
  }
  std::string wrong = whole.str();
  const auto at = wrong.find("param_count=");
  wrong.replace(at, wrong.find('\n', at) - at, "param_count=7");
  std::stringstream mismatched(wrong);
  try {
    read_params(mismatched);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kLayoutMismatch);
  }
}
