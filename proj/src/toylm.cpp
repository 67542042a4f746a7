#include "resd/toylm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "resd/error.hpp"
#include "resd/rng.hpp"

namespace resd::lm {

void ModelConfig::validate() const {
  if (vocab_size < 1 || vocab_size > Vocab::kMaxSize) {
    throw Error(ErrorCode::kInvalidArgument, "vocab_size must be in [1, 512]");
  }
  if (context_window < 1 || hidden_dim < 1 || num_layers < 1 || mix_window < 1) {
    throw Error(ErrorCode::kInvalidArgument, "model dimensions must be >= 1");
  }
  if (copy_min_order < 1 || copy_max_order > 6) {
    throw Error(ErrorCode::kInvalidArgument, "copy orders must lie in [1, 6]");
  }
  if (!std::isfinite(copy_gain_init)) {
    throw Error(ErrorCode::kInvalidArgument, "copy_gain_init must be finite");
  }
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  const std::size_t v = c.vocab_size, h = c.hidden_dim;
  std::size_t at = 0;
  embed = at;
  at += v * h;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    mix.push_back(at);
    at += c.mix_window * h * h;
    mix_bias.push_back(at);
    at += h;
  }
  out_weight = at;
  at += v * h;
  out_bias = at;
  at += v;
  copy_gain = at;
  at += c.copy_orders();
  total = at;
}

ToyPolicyParams ToyPolicyParams::zeros(const ModelConfig& config) {
  config.validate();
  return {config, std::vector<float>(ParamLayout(config).total, 0.0f)};
}

ToyPolicyParams ToyPolicyParams::init(const ModelConfig& config) {
  ToyPolicyParams p = zeros(config);
  const ParamLayout lay(config);
  const std::size_t v = config.vocab_size, h = config.hidden_dim;
  Rng rng(derive_seed(config.seed, 0x746f796c6dULL));
  auto fill = [&](std::size_t at, std::size_t n, double scale) {
    for (std::size_t i = 0; i < n; ++i) {
      p.values[at + i] = static_cast<float>(rng.uniform(-scale, scale));
    }
  };
  fill(lay.embed, v * h, 1.0);
  const double mix_scale = 1.0 / std::sqrt(static_cast<double>(config.mix_window * h));
  for (std::size_t l = 0; l < config.num_layers; ++l) fill(lay.mix[l], config.mix_window * h * h, mix_scale);
  fill(lay.out_weight, v * h, 1.0 / std::sqrt(static_cast<double>(h)));
  for (std::size_t n = 0; n < config.copy_orders(); ++n) {
    p.values[lay.copy_gain + n] = static_cast<float>(config.copy_gain_init);
  }
  return p;
}

namespace {

std::uint64_t pack_ngram(const std::vector<TokenId>& tokens, std::size_t end, std::size_t order) {
  // Ten bits per token; each order has its own index.
  std::uint64_t key = 0;
  for (std::size_t k = 0; k < order; ++k) {
    key = (key << 10) | static_cast<std::uint64_t>(tokens[end + 1 - order + k]);
  }
  return key;
}

}  // namespace

ForwardPass::ForwardPass(const ToyPolicyParams& params)
    : params_(&params),
      layout_(params.config),
      h_(params.config.hidden_dim),
      hidden_(params.config.num_layers + 1),
      act_(params.config.num_layers),
      index_(params.config.copy_orders()) {
  if (params.values.size() != layout_.total) {
    throw Error(ErrorCode::kLayoutMismatch, "parameter vector does not match its config");
  }
}

std::span<const double> ForwardPass::hidden(std::size_t layer, std::size_t t) const {
  return {hidden_[layer].data() + t * h_, h_};
}

std::span<const double> ForwardPass::logits(std::size_t t) const {
  const std::size_t v = params_->config.vocab_size;
  return {logits_.data() + t * v, v};
}

std::span<const double> ForwardPass::push(TokenId token) {
  const ModelConfig& c = params_->config;
  const std::size_t v = c.vocab_size, h = h_;
  if (tokens_.size() >= c.context_window) {
    throw Error(ErrorCode::kContextOverflow,
                "sequence exceeds context window of " + std::to_string(c.context_window));
  }
  if (token < 0 || static_cast<std::size_t>(token) >= v) {
    throw Error(ErrorCode::kInvalidArgument, "token id out of range: " + std::to_string(token));
  }
  const std::size_t t = tokens_.size();
  tokens_.push_back(token);

  // Embedding.
  auto& h0 = hidden_[0];
  h0.resize((t + 1) * h);
  for (std::size_t i = 0; i < h; ++i) h0[t * h + i] = param(layout_.embed + token * h + i);

  // Causal mixing layers with residual connections.
  std::vector<double> pre(h);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const auto& in = hidden_[l];
    auto& out = hidden_[l + 1];
    auto& act = act_[l];
    out.resize((t + 1) * h);
    act.resize((t + 1) * h);
    for (std::size_t i = 0; i < h; ++i) pre[i] = param(layout_.mix_bias[l] + i);
    const std::size_t span = std::min(c.mix_window, t + 1);
    for (std::size_t o = 0; o < span; ++o) {
      const double* src = in.data() + (t - o) * h;
      const std::size_t base = layout_.mix[l] + o * h * h;
      for (std::size_t i = 0; i < h; ++i) {
        const float* w = params_->values.data() + base + i * h;
        double acc = 0.0;
        for (std::size_t j = 0; j < h; ++j) acc += static_cast<double>(w[j]) * src[j];
        pre[i] += acc;
      }
    }
    for (std::size_t i = 0; i < h; ++i) {
      const double a = std::tanh(pre[i]);
      act[t * h + i] = a;
      out[t * h + i] = in[t * h + i] + a;
    }
  }

  // Suffix-match continuation features. The n-gram ending at t-1 becomes
  // visible together with its continuation (the token just pushed).
  const std::size_t orders = c.copy_orders();
  for (std::size_t n = 0; n < orders; ++n) {
    const std::size_t order = c.copy_min_order + n;
    if (t >= order) {
      auto& conts = index_[n][pack_ngram(tokens_, t - 1, order)];
      auto it = std::lower_bound(conts.begin(), conts.end(), token,
                                 [](const auto& e, TokenId k) { return e.first < k; });
      if (it != conts.end() && it->first == token) {
        ++it->second;
      } else {
        conts.insert(it, {token, 1u});
      }
    }
    std::vector<CopyFeature> feat;
    if (t + 1 >= order) {
      auto found = index_[n].find(pack_ngram(tokens_, t, order));
      if (found != index_[n].end()) {
        double total = 0.0;
        for (const auto& [tok, cnt] : found->second) total += cnt;
        for (const auto& [tok, cnt] : found->second) feat.push_back({tok, cnt / total});
      }
    }
    copy_.push_back(std::move(feat));
  }

  // Output projection.
  logits_.resize((t + 1) * v);
  double* z = logits_.data() + t * v;
  const double* top = hidden_[c.num_layers].data() + t * h;
  for (std::size_t k = 0; k < v; ++k) {
    const float* w = params_->values.data() + layout_.out_weight + k * h;
    double acc = param(layout_.out_bias + k);
    for (std::size_t i = 0; i < h; ++i) acc += static_cast<double>(w[i]) * top[i];
    z[k] = acc;
  }
  for (std::size_t n = 0; n < orders; ++n) {
    const double gain = param(layout_.copy_gain + n);
    for (const auto& f : copy_[t * orders + n]) z[f.token] += gain * f.weight;
  }
  return {z, v};
}

void ForwardPass::backward(const Logits& upstream, std::span<double> grad) const {
  const ModelConfig& c = params_->config;
  const std::size_t v = c.vocab_size, h = h_, T = tokens_.size();
  if (upstream.rows != T || upstream.cols != v) {
    throw Error(ErrorCode::kShapeMismatch, "upstream gradient shape does not match logits");
  }
  if (grad.size() != layout_.total) {
    throw Error(ErrorCode::kShapeMismatch, "gradient buffer does not match parameter count");
  }
  const std::size_t orders = c.copy_orders();
  const auto& values = params_->values;

  // Output layer.
  std::vector<double> d_hidden(T * h, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const auto dz = upstream.row(t);
    if (std::all_of(dz.begin(), dz.end(), [](double x) { return x == 0.0; })) continue;
    const double* top = hidden_[c.num_layers].data() + t * h;
    double* dtop = d_hidden.data() + t * h;
    for (std::size_t k = 0; k < v; ++k) {
      const double g = dz[k];
      if (g == 0.0) continue;
      grad[layout_.out_bias + k] += g;
      double* gw = grad.data() + layout_.out_weight + k * h;
      const float* w = values.data() + layout_.out_weight + k * h;
      for (std::size_t i = 0; i < h; ++i) {
        gw[i] += g * top[i];
        dtop[i] += g * static_cast<double>(w[i]);
      }
    }
    for (std::size_t n = 0; n < orders; ++n) {
      double acc = 0.0;
      for (const auto& f : copy_[t * orders + n]) acc += dz[f.token] * f.weight;
      grad[layout_.copy_gain + n] += acc;
    }
  }

  // Mixing layers, top to bottom. d_hidden holds d/d(hidden_[l+1]).
  std::vector<double> d_below(T * h);
  std::vector<double> da(h);
  for (std::size_t l = c.num_layers; l-- > 0;) {
    d_below = d_hidden;  // residual path
    const auto& in = hidden_[l];
    const auto& act = act_[l];
    for (std::size_t t = 0; t < T; ++t) {
      bool any = false;
      for (std::size_t i = 0; i < h; ++i) {
        const double a = act[t * h + i];
        da[i] = d_hidden[t * h + i] * (1.0 - a * a);
        any = any || da[i] != 0.0;
      }
      if (!any) continue;
      for (std::size_t i = 0; i < h; ++i) grad[layout_.mix_bias[l] + i] += da[i];
      const std::size_t span = std::min(c.mix_window, t + 1);
      for (std::size_t o = 0; o < span; ++o) {
        const double* src = in.data() + (t - o) * h;
        double* dsrc = d_below.data() + (t - o) * h;
        const std::size_t base = layout_.mix[l] + o * h * h;
        for (std::size_t i = 0; i < h; ++i) {
          const double g = da[i];
          if (g == 0.0) continue;
          double* gw = grad.data() + base + i * h;
          const float* w = values.data() + base + i * h;
          for (std::size_t j = 0; j < h; ++j) {
            gw[j] += g * src[j];
            dsrc[j] += g * static_cast<double>(w[j]);
          }
        }
      }
    }
    d_hidden.swap(d_below);
  }

  // Embedding.
  for (std::size_t t = 0; t < T; ++t) {
    double* ge = grad.data() + layout_.embed + static_cast<std::size_t>(tokens_[t]) * h;
    for (std::size_t i = 0; i < h; ++i) ge[i] += d_hidden[t * h + i];
  }
}

Logits forward_logits(const ToyPolicyParams& params, const TokenSequence& seq) {
  if (seq.size() > params.config.context_window) {
    throw Error(ErrorCode::kContextOverflow,
                "sequence of " + std::to_string(seq.size()) + " tokens exceeds context window of " +
                    std::to_string(params.config.context_window));
  }
  ForwardPass pass(params);
  Logits out{seq.size(), params.config.vocab_size, {}};
  out.data.reserve(out.rows * out.cols);
  for (TokenId id : seq.ids) {
    const auto z = pass.push(id);
    out.data.insert(out.data.end(), z.begin(), z.end());
  }
  return out;
}

std::vector<double> next_distribution(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "temperature must be positive");
  }
  std::vector<double> p(logits.size());
  double max = -INFINITY;
  for (double z : logits) {
    if (!std::isfinite(z)) throw Error(ErrorCode::kNumeric, "non-finite logit");
    max = std::max(max, z);
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((logits[i] - max) / temperature);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

std::size_t sample_nucleus(std::span<const double> probs, double top_p, double u) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += probs[order[keep]];
    ++keep;
    if (mass >= top_p) break;
  }
  double target = u * mass;
  for (std::size_t i = 0; i < keep; ++i) {
    target -= probs[order[i]];
    if (target < 0.0) return order[i];
  }
  return order[keep - 1];
}

namespace {

std::size_t argmax(std::span<const double> z) {
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

}  // namespace

TokenSequence sample_sequence(const ToyPolicyParams& params, const TokenSequence& prompt,
                              std::size_t max_new, const SamplingConfig& sampling,
                              std::uint64_t seed) {
  if (prompt.size() + max_new > params.config.context_window) {
    throw Error(ErrorCode::kContextOverflow,
                "prompt plus max_new exceeds context window of " +
                    std::to_string(params.config.context_window));
  }
  if (prompt.ids.empty()) throw Error(ErrorCode::kInvalidArgument, "prompt must be non-empty");
  if (sampling.temperature < 0.0 || !(sampling.top_p > 0.0) || sampling.top_p > 1.0) {
    throw Error(ErrorCode::kInvalidArgument, "invalid sampling parameters");
  }
  Rng rng(seed);
  ForwardPass pass(params);
  std::span<const double> z;
  for (TokenId id : prompt.ids) z = pass.push(id);

  TokenSequence out{prompt.ids, prompt.size()};
  for (std::size_t k = 0; k < max_new; ++k) {
    TokenId next;
    if (sampling.temperature == 0.0) {
      next = static_cast<TokenId>(argmax(z));
    } else {
      const auto p = next_distribution(z, sampling.temperature);
      next = static_cast<TokenId>(sample_nucleus(p, sampling.top_p, rng.uniform()));
    }
    out.ids.push_back(next);
    if (next == sampling.eos) break;
    if (k + 1 < max_new) z = pass.push(next);
  }
  return out;
}

std::vector<double> logit_gradient_pullback(const ToyPolicyParams& params,
                                            const TokenSequence& seq, const Logits& upstream) {
  if (upstream.rows != seq.size() || upstream.cols != params.config.vocab_size ||
      upstream.data.size() != upstream.rows * upstream.cols) {
    throw Error(ErrorCode::kShapeMismatch, "upstream gradient shape does not match logits");
  }
  ForwardPass pass(params);
  for (TokenId id : seq.ids) pass.push(id);
  std::vector<double> grad(params.values.size(), 0.0);
  pass.backward(upstream, grad);
  return grad;
}

double effective_lr(const OptimizerConfig& config, std::size_t step_index) {
  if (config.warmup_steps == 0 || step_index >= config.warmup_steps) return config.lr;
  return config.lr * static_cast<double>(step_index) / static_cast<double>(config.warmup_steps);
}

void optimizer_step(ToyPolicyParams& params, std::span<const double> grad,
                    std::size_t step_index, const OptimizerConfig& config,
                    OptimizerState& state) {
  const std::size_t n = params.values.size();
  if (grad.size() != n) throw Error(ErrorCode::kShapeMismatch, "gradient layout does not match params");
  double norm2 = 0.0;
  for (double g : grad) {
    if (!std::isfinite(g)) throw Error(ErrorCode::kNumeric, "non-finite gradient; step rejected");
    norm2 += g * g;
  }
  double scale = 1.0;
  if (config.max_grad_norm > 0.0 && norm2 > config.max_grad_norm * config.max_grad_norm) {
    scale = config.max_grad_norm / std::sqrt(norm2);
  }
  const double lr = effective_lr(config, step_index);

  if (config.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < n; ++i) {
      params.values[i] = static_cast<float>(static_cast<double>(params.values[i]) - lr * scale * grad[i]);
    }
    return;
  }
  if (state.m.size() != n) {
    state.m.assign(n, 0.0);
    state.v.assign(n, 0.0);
    state.updates = 0;
  }
  ++state.updates;
  const double t = static_cast<double>(state.updates);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i] * scale;
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    if (lr == 0.0) continue;
    const double step = lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + config.eps);
    params.values[i] = static_cast<float>(static_cast<double>(params.values[i]) - step);
  }
}

namespace {

constexpr const char* kParamsMagic = "resd-params 1";

std::string format_double(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

}  // namespace

void write_params(std::ostream& out, const ToyPolicyParams& params) {
  const ModelConfig& c = params.config;
  out << kParamsMagic << '\n'
      << "vocab_size=" << c.vocab_size << '\n'
      << "context_window=" << c.context_window << '\n'
      << "hidden_dim=" << c.hidden_dim << '\n'
      << "num_layers=" << c.num_layers << '\n'
      << "mix_window=" << c.mix_window << '\n'
      << "copy_min_order=" << c.copy_min_order << '\n'
      << "copy_max_order=" << c.copy_max_order << '\n'
      << "copy_gain_init=" << format_double(c.copy_gain_init) << '\n'
      << "seed=" << c.seed << '\n'
      << "param_count=" << params.values.size() << '\n'
      << "end\n";
  std::vector<unsigned char> block(params.values.size() * 4);
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(params.values[i]);
    for (int b = 0; b < 4; ++b) block[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(block.data()), static_cast<std::streamsize>(block.size()));
  if (!out) throw Error(ErrorCode::kIo, "failed writing parameter snapshot");
}

ToyPolicyParams read_params(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kParamsMagic) {
    throw Error(ErrorCode::kFormat, "not a parameter snapshot (bad magic line)");
  }
  ModelConfig c;
  std::size_t count = 0;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::kFormat, "bad snapshot header line: " + line);
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "vocab_size") c.vocab_size = std::stoull(val);
      else if (key == "context_window") c.context_window = std::stoull(val);
      else if (key == "hidden_dim") c.hidden_dim = std::stoull(val);
      else if (key == "num_layers") c.num_layers = std::stoull(val);
      else if (key == "mix_window") c.mix_window = std::stoull(val);
      else if (key == "copy_min_order") c.copy_min_order = std::stoull(val);
      else if (key == "copy_max_order") c.copy_max_order = std::stoull(val);
      else if (key == "copy_gain_init") c.copy_gain_init = std::stod(val);
      else if (key == "seed") c.seed = std::stoull(val);
      else if (key == "param_count") count = std::stoull(val);
      else throw Error(ErrorCode::kFormat, "unknown snapshot header key: " + key);
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kFormat, "bad value for snapshot key " + key);
    }
  }
  if (!ended) throw Error(ErrorCode::kFormat, "snapshot header not terminated");
  c.validate();
  if (count != ParamLayout(c).total) {
    throw Error(ErrorCode::kLayoutMismatch, "param_count does not match the layout of the header config");
  }
  std::vector<unsigned char> block(count * 4);
  in.read(reinterpret_cast<char*>(block.data()), static_cast<std::streamsize>(block.size()));
  if (static_cast<std::size_t>(in.gcount()) != block.size()) {
    throw Error(ErrorCode::kFormat, "truncated parameter block");
  }
  ToyPolicyParams p{c, std::vector<float>(count)};
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(block[i * 4 + b]) << (8 * b);
    p.values[i] = std::bit_cast<float>(bits);
    if (!std::isfinite(p.values[i])) throw Error(ErrorCode::kNumeric, "non-finite parameter in snapshot");
  }
  return p;
}

void save_params(const std::string& path, const ToyPolicyParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open for writing: " + path);
  write_params(out, params);
}

ToyPolicyParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open: " + path);
  return read_params(in);
}

}  // namespace resd::lm
