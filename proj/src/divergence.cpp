#include "resd/divergence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "resd/error.hpp"

namespace resd::div {

void Divergence::validate() const {
  if (kind == DivergenceKind::kGeneralizedJsd && !(alpha >= 0.0 && alpha <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "jsd alpha must lie in [0, 1]");
  }
}

std::string to_string(DivergenceKind kind) {
  switch (kind) {
    case DivergenceKind::kForwardKl: return "forward_kl";
    case DivergenceKind::kReverseKl: return "reverse_kl";
    case DivergenceKind::kGeneralizedJsd: return "jsd";
  }
  return "?";
}

DivergenceKind parse_divergence_kind(const std::string& name) {
  if (name == "forward_kl") return DivergenceKind::kForwardKl;
  if (name == "reverse_kl") return DivergenceKind::kReverseKl;
  if (name == "jsd") return DivergenceKind::kGeneralizedJsd;
  throw Error(ErrorCode::kConfig, "unknown divergence '" + name + "' (expected forward_kl, reverse_kl or jsd)");
}

void ClipRange::validate() const {
  if (!(eps_min > 0.0 && eps_min <= 1.0 && eps_max >= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "clip range must satisfy 0 < eps_min <= 1 <= eps_max");
  }
}

void WeightConfig::validate() const {
  if (!(alpha > 0.0) || !(beta > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "weight exponents must be positive");
  }
  if (!(success_threshold > 0.0 && success_threshold <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "success threshold must lie in (0, 1]");
  }
}

double f_value(const Divergence& d, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorCode::kDomain, "f-divergence generator needs tau > 0");
  switch (d.kind) {
    case DivergenceKind::kForwardKl:
      return tau * std::log(tau);
    case DivergenceKind::kReverseKl:
      return -std::log(tau);
    case DivergenceKind::kGeneralizedJsd: {
      // alpha*KL(q||m) + (1-alpha)*KL(p||m) with m = alpha*q + (1-alpha)*p.
      const double a = d.alpha;
      const double mix = a * tau + (1.0 - a);
      return a * tau * std::log(tau) - mix * std::log(mix);
    }
  }
  return 0.0;
}

double f_derivative(const Divergence& d, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorCode::kDomain, "f-divergence generator needs tau > 0");
  switch (d.kind) {
    case DivergenceKind::kForwardKl:
      return std::log(tau) + 1.0;
    case DivergenceKind::kReverseKl:
      return -1.0 / tau;
    case DivergenceKind::kGeneralizedJsd: {
      const double a = d.alpha;
      const double mix = a * tau + (1.0 - a);
      return a * std::log(tau) + a - a * (std::log(mix) + 1.0);
    }
  }
  return 0.0;
}

double clip_ratio(double tau, const ClipRange& clip) {
  return std::min(std::max(tau, clip.eps_min), clip.eps_max);
}

TruncatedPair truncate_top_k(std::span<const double> student, std::span<const double> teacher,
                             std::size_t k) {
  if (student.size() != teacher.size()) {
    throw Error(ErrorCode::kShapeMismatch, "student and teacher distributions differ in size");
  }
  k = std::min(k, student.size());
  std::vector<TokenId> ids(student.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](TokenId a, TokenId b) {
                      return student[a] > student[b] || (student[a] == student[b] && a < b);
                    });
  ids.resize(k);
  TruncatedPair pair;
  pair.token_ids = ids;
  for (TokenId id : ids) {
    pair.student_probs.push_back(student[id]);
    pair.teacher_probs.push_back(teacher[id]);
  }
  return pair;
}

namespace {

void check_pair(const TruncatedPair& pair) {
  if (pair.token_ids.empty()) throw Error(ErrorCode::kInvalidArgument, "empty truncated pair");
  if (pair.student_probs.size() != pair.size() || pair.teacher_probs.size() != pair.size()) {
    throw Error(ErrorCode::kShapeMismatch, "truncated pair lists differ in length");
  }
}

}  // namespace

double per_token_loss(const TruncatedPair& pair, const Divergence& d, const ClipRange& clip) {
  check_pair(pair);
  double loss = 0.0;
  for (std::size_t i = 0; i < pair.size(); ++i) {
    const double p = pair.student_probs[i];
    const double tau = pair.teacher_probs[i] / std::max(p, kStudentProbFloor);
    // A zero teacher mass gives tau = 0, outside every generator's domain;
    // eps_min > 0 keeps the clipped ratio valid.
    loss += p * f_value(d, clip_ratio(tau, clip));
  }
  return loss;
}

double sequence_loss(std::span<const TruncatedPair> pairs, const Divergence& d, const ClipRange& clip) {
  double total = 0.0;
  for (const auto& pair : pairs) total += per_token_loss(pair, d, clip);
  return total;
}

std::vector<double> loss_gradient_wrt_student_probs(const TruncatedPair& pair, const Divergence& d,
                                                    const ClipRange& clip) {
  check_pair(pair);
  std::vector<double> g(pair.size());
  for (std::size_t i = 0; i < pair.size(); ++i) {
    const double p = pair.student_probs[i];
    const double q = pair.teacher_probs[i];
    const double tau = q / std::max(p, kStudentProbFloor);
    const double clipped = clip_ratio(tau, clip);
    if (clipped != tau || p < kStudentProbFloor) {
      g[i] = f_value(d, clipped);
    } else {
      // d/dp [p f(q/p)] = f(tau) - tau f'(tau)
      g[i] = f_value(d, tau) - tau * f_derivative(d, tau);
    }
  }
  return g;
}

std::vector<double> loss_gradient_wrt_student_logits(const TruncatedPair& pair,
                                                     std::span<const double> student_probs,
                                                     const Divergence& d, const ClipRange& clip) {
  const auto gp = loss_gradient_wrt_student_probs(pair, d, clip);
  // dL/dz_j = p_j * (g_j - sum_i g_i p_i), with g_j = 0 off the retained set.
  double dot = 0.0;
  std::vector<double> dense(student_probs.size(), 0.0);
  for (std::size_t i = 0; i < pair.size(); ++i) {
    const auto id = static_cast<std::size_t>(pair.token_ids[i]);
    if (id >= student_probs.size()) throw Error(ErrorCode::kShapeMismatch, "pair id outside distribution");
    dense[id] = gp[i];
    dot += gp[i] * student_probs[id];
  }
  std::vector<double> dz(student_probs.size());
  for (std::size_t j = 0; j < dz.size(); ++j) dz[j] = student_probs[j] * (dense[j] - dot);
  return dz;
}

double success_rate(std::span<const double> rewards, double threshold) {
  if (rewards.empty()) throw Error(ErrorCode::kInvalidArgument, "success rate of an empty batch");
  const auto hits = std::count_if(rewards.begin(), rewards.end(), [&](double r) { return r >= threshold; });
  return static_cast<double>(hits) / static_cast<double>(rewards.size());
}

std::vector<double> sample_weights(std::span<const double> rewards, const WeightConfig& config) {
  const double s = success_rate(rewards, config.success_threshold);
  std::vector<double> w(rewards.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    w[i] = rewards[i] >= config.success_threshold ? std::pow(1.0 - s, config.alpha)
                                                   : std::pow(s, config.beta);
    sum += w[i];
  }
  if (!(sum > 0.0)) return std::vector<double>(rewards.size(), 1.0);
  const double mean = sum / static_cast<double>(rewards.size());
  for (double& x : w) x /= mean;
  return w;
}

double weighted_batch_loss(std::span<const double> losses, std::span<const double> weights) {
  if (losses.size() != weights.size()) {
    throw Error(ErrorCode::kShapeMismatch, "losses and weights differ in length");
  }
  if (losses.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) total += weights[i] * losses[i];
  return total / static_cast<double>(losses.size());
}

}  // namespace resd::div
