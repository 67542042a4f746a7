#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "resd/vocab.hpp"

namespace resd::div {

enum class DivergenceKind { kForwardKl, kReverseKl, kGeneralizedJsd };

struct Divergence {
  DivergenceKind kind = DivergenceKind::kReverseKl;
  double alpha = 0.5;  // mixture weight, GeneralizedJsd only; 0.5 is symmetric JSD

  static Divergence forward_kl() { return {DivergenceKind::kForwardKl, 0.5}; }
  static Divergence reverse_kl() { return {DivergenceKind::kReverseKl, 0.5}; }
  static Divergence jsd(double alpha = 0.5) { return {DivergenceKind::kGeneralizedJsd, alpha}; }

  void validate() const;
};

// "forward_kl", "reverse_kl", "jsd" (alpha given separately).
std::string to_string(DivergenceKind kind);
DivergenceKind parse_divergence_kind(const std::string& name);

struct ClipRange {
  double eps_min = 0.2;
  double eps_max = std::numeric_limits<double>::infinity();

  void validate() const;
};

// Student top-k ids with the teacher's mass gathered at the same ids.
struct TruncatedPair {
  std::vector<TokenId> token_ids;
  std::vector<double> student_probs;
  std::vector<double> teacher_probs;

  std::size_t size() const { return token_ids.size(); }
};

constexpr double kStudentProbFloor = 1e-12;
constexpr std::size_t kDefaultTopK = 100;

// Generator f(tau). f(1) = 0 for every kind.
double f_value(const Divergence& d, double tau);
// df/dtau.
double f_derivative(const Divergence& d, double tau);

double clip_ratio(double tau, const ClipRange& clip);

// Builds the pair at one position from full-vocabulary distributions.
// Ties in student probability are broken by lower id.
TruncatedPair truncate_top_k(std::span<const double> student, std::span<const double> teacher,
                             std::size_t k);

// sum_i p_i * f(clip(q_i / max(p_i, floor))) over the retained ids; the
// truncated tail is not renormalized.
double per_token_loss(const TruncatedPair& pair, const Divergence& d, const ClipRange& clip);

double sequence_loss(std::span<const TruncatedPair> pairs, const Divergence& d, const ClipRange& clip);

// dL/dp_i for each retained id, teacher probabilities held constant. Where
// the ratio is clipped (or the floor is active) the ratio is treated as a
// constant, leaving only the outer p_i weight.
std::vector<double> loss_gradient_wrt_student_probs(const TruncatedPair& pair, const Divergence& d,
                                                    const ClipRange& clip);

// Chains the probability gradient through softmax over the full vocabulary.
// `student_probs` is the full distribution the pair was truncated from.
// Returns dL/dz for every logit; entries outside the retained ids are
// nonzero only through softmax normalization.
std::vector<double> loss_gradient_wrt_student_logits(const TruncatedPair& pair,
                                                     std::span<const double> student_probs,
                                                     const Divergence& d, const ClipRange& clip);

struct WeightConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double success_threshold = 1.0;

  void validate() const;
};

double success_rate(std::span<const double> rewards, double threshold);

// (1-s)^alpha for successes, s^beta for failures, normalized to mean one.
// All-success or all-failure batches get all-ones.
std::vector<double> sample_weights(std::span<const double> rewards, const WeightConfig& config);

// (1/B) * sum_i w_i * loss_i
double weighted_batch_loss(std::span<const double> losses, std::span<const double> weights);

}  // namespace resd::div
