#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "resd/vocab.hpp"

namespace resd::lm {

// Shape of the toy policy. Student and teacher always share one config.
struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t context_window = 1024;  // W: longest sequence forward accepts
  std::size_t hidden_dim = 32;
  std::size_t num_layers = 2;
  std::size_t mix_window = 8;      // causal aggregation width per layer
  // Suffix-match orders copy_min_order..copy_max_order; max < min disables.
  std::size_t copy_min_order = 1;
  std::size_t copy_max_order = 3;
  double copy_gain_init = 8.0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t copy_orders() const {
    return copy_max_order >= copy_min_order ? copy_max_order - copy_min_order + 1 : 0;
  }
  bool operator==(const ModelConfig&) const = default;
};

// Offsets into the flat parameter vector. The layout depends only on the
// config, so element-wise arithmetic between two parameter sets of the same
// config is well defined.
struct ParamLayout {
  explicit ParamLayout(const ModelConfig& config);

  std::size_t embed = 0;                 // [V x H]
  std::vector<std::size_t> mix;          // per layer [window x H x H], (offset, out, in)
  std::vector<std::size_t> mix_bias;     // per layer [H]
  std::size_t out_weight = 0;            // [V x H]
  std::size_t out_bias = 0;              // [V]
  std::size_t copy_gain = 0;             // [orders]
  std::size_t total = 0;
};

struct ToyPolicyParams {
  ModelConfig config;
  std::vector<float> values;

  // Scaled-uniform init from config.seed; biases zero, copy gains at
  // copy_gain_init.
  static ToyPolicyParams init(const ModelConfig& config);
  static ToyPolicyParams zeros(const ModelConfig& config);

  std::size_t param_count() const { return values.size(); }
  bool same_layout(const ToyPolicyParams& other) const {
    return config == other.config && values.size() == other.values.size();
  }
};

// Token ids plus the prompt/response split. The response is always a
// contiguous suffix starting at response_start.
struct TokenSequence {
  std::vector<TokenId> ids;
  std::size_t response_start = 0;

  std::size_t size() const { return ids.size(); }
  std::size_t response_length() const { return ids.size() - response_start; }
  bool is_response(std::size_t i) const { return i >= response_start; }
};

// Row-major [positions x vocab]. Row t predicts token t+1.
struct Logits {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  std::span<const double> row(std::size_t t) const { return {data.data() + t * cols, cols}; }
  std::span<double> row(std::size_t t) { return {data.data() + t * cols, cols}; }
};

// Incremental causal evaluation. Keeps every activation so the same object
// serves sampling (push one token at a time) and backpropagation.
class ForwardPass {
 public:
  explicit ForwardPass(const ToyPolicyParams& params);

  // Appends a token and returns the logits predicting the next one.
  std::span<const double> push(TokenId token);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<TokenId>& tokens() const { return tokens_; }
  std::span<const double> logits(std::size_t t) const;

  // Reverse-mode gradient of sum_t <upstream_t, logits_t>. Rows of
  // `upstream` that are entirely zero are skipped. Accumulates into grad.
  void backward(const Logits& upstream, std::span<double> grad) const;

 private:
  struct CopyFeature {
    TokenId token;
    double weight;
  };

  double param(std::size_t i) const { return static_cast<double>(params_->values[i]); }
  std::span<const double> hidden(std::size_t layer, std::size_t t) const;

  const ToyPolicyParams* params_;
  ParamLayout layout_;
  std::size_t h_;
  std::vector<TokenId> tokens_;
  // hidden_[l] holds [T x H] activations after layer l (l = 0 is the embedding).
  std::vector<std::vector<double>> hidden_;
  // tanh outputs per layer, [T x H].
  std::vector<std::vector<double>> act_;
  std::vector<double> logits_;
  // copy_[t * orders + n] holds normalized continuation counts for order
  // copy_min_order + n.
  std::vector<std::vector<CopyFeature>> copy_;
  // Per order: packed n-gram -> (continuation token, count), sorted by token.
  using Continuations = std::vector<std::pair<TokenId, std::uint32_t>>;
  std::vector<std::unordered_map<std::uint64_t, Continuations>> index_;
};

// Logits at every position. Throws kContextOverflow when |seq| > W.
Logits forward_logits(const ToyPolicyParams& params, const TokenSequence& seq);

// softmax(logits / temperature); temperature must be positive.
std::vector<double> next_distribution(std::span<const double> logits, double temperature);

struct SamplingConfig {
  double temperature = 1.0;  // 0 selects greedy argmax decoding
  double top_p = 0.95;
  TokenId eos = -1;
};

// Index sampled from `probs` restricted to its nucleus of mass >= top_p.
std::size_t sample_nucleus(std::span<const double> probs, double top_p, double u);

// Autoregressive continuation of `prompt` until eos or max_new tokens.
TokenSequence sample_sequence(const ToyPolicyParams& params, const TokenSequence& prompt,
                              std::size_t max_new, const SamplingConfig& sampling,
                              std::uint64_t seed);

// Gradient of sum_t <upstream_t, logits_t> w.r.t. every parameter.
std::vector<double> logit_gradient_pullback(const ToyPolicyParams& params,
                                            const TokenSequence& seq, const Logits& upstream);

enum class OptimizerKind { kAdam, kSgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-3;
  std::size_t warmup_steps = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables clipping
};

// Adam moments live here, never inside ToyPolicyParams.
struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t updates = 0;

  bool operator==(const OptimizerState&) const = default;
};

double effective_lr(const OptimizerConfig& config, std::size_t step_index);

void optimizer_step(ToyPolicyParams& params, std::span<const double> grad,
                    std::size_t step_index, const OptimizerConfig& config,
                    OptimizerState& state);

// Snapshot: key=value header terminated by "end", then param_count
// little-endian float32 values.
void write_params(std::ostream& out, const ToyPolicyParams& params);
ToyPolicyParams read_params(std::istream& in);
void save_params(const std::string& path, const ToyPolicyParams& params);
ToyPolicyParams load_params(const std::string& path);

}  // namespace resd::lm
