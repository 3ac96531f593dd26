#pragma once

// Minimal conditional autoregressive model pi(y | x, v):
//
//   h_t    = tanh(A * emb(y_{t-1}) + B * v + b),   y_0 = BOS (or last prompt token)
//   logits = U * h_t + c
//   P(y_t) = softmax(logits)
//
// with hand-written backpropagation, gradient-descent training for the
// generation NLL (stage 1) and the DPO objective (stage 2), greedy decoding,
// finite-difference gradient checking, and a little-endian checkpoint format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <functional>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "absteer/common.hpp"
#include "absteer/cot.hpp"
#include "absteer/dpo.hpp"

namespace absteer {

struct ModelDims {
  size_t vocab_size = 0;
  size_t d_e = 16;
  size_t d_h = 32;
  size_t d_f = 32;

  bool operator==(const ModelDims&) const = default;

  size_t parameter_count() const {
    return vocab_size * d_e + d_h * (d_e + d_f + 1) + vocab_size * (d_h + 1);
  }
};

/// All parameters live in one flat buffer in declared field order:
/// embedding (V x d_e), A (d_h x d_e), B (d_h x d_f), b (d_h), U (V x d_h), c (V).
class ToyModel {
 public:
  ToyModel() = default;

  /// All-zero parameters.
  explicit ToyModel(ModelDims dims, std::uint64_t seed = 0) : dims_(dims), seed_(seed) {
    if (dims.vocab_size < 1 || dims.d_e < 1 || dims.d_h < 1 || dims.d_f < 1)
      throw Error(ErrorKind::config, "model dimensions must all be >= 1");
    params_.assign(dims.parameter_count(), 0.0);
  }

  const ModelDims& dims() const { return dims_; }
  std::uint64_t seed() const { return seed_; }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  size_t emb_offset() const { return 0; }
  size_t a_offset() const { return dims_.vocab_size * dims_.d_e; }
  size_t b_offset() const { return a_offset() + dims_.d_h * dims_.d_e; }
  size_t bias_offset() const { return b_offset() + dims_.d_h * dims_.d_f; }
  size_t u_offset() const { return bias_offset() + dims_.d_h; }
  size_t c_offset() const { return u_offset() + dims_.vocab_size * dims_.d_h; }

  const double* emb(TokenId t) const { return params_.data() + emb_offset() + t * dims_.d_e; }
  const double* A() const { return params_.data() + a_offset(); }
  const double* B() const { return params_.data() + b_offset(); }
  const double* bias() const { return params_.data() + bias_offset(); }
  const double* U() const { return params_.data() + u_offset(); }
  const double* c() const { return params_.data() + c_offset(); }

  bool operator==(const ToyModel& o) const { return dims_ == o.dims_ && params_ == o.params_; }

 private:
  ModelDims dims_;
  std::uint64_t seed_ = 0;
  std::vector<double> params_;
};

inline ToyModel init_model(size_t vocab_size, size_t d_e, size_t d_h, size_t d_f, std::uint64_t seed) {
  ToyModel m(ModelDims{vocab_size, d_e, d_h, d_f}, seed);
  Rng rng(seed);
  for (double& p : m.params()) p = rng.uniform(-0.08, 0.08);
  return m;
}

namespace detail {

inline void check_feature(const ToyModel& m, std::span<const double> feature) {
  if (feature.size() != m.dims().d_f)
    throw Error(ErrorKind::shape, "feature length " + std::to_string(feature.size()) + " != d_f " +
                                      std::to_string(m.dims().d_f));
}

inline void check_token(const ToyModel& m, TokenId t) {
  if (t >= m.dims().vocab_size)
    throw Error(ErrorKind::shape, "token id " + std::to_string(t) + " out of range for vocab of " +
                                      std::to_string(m.dims().vocab_size));
}

/// B * v + b; constant across the steps of one sequence.
inline std::vector<double> conditioning(const ToyModel& m, std::span<const double> feature) {
  const auto& d = m.dims();
  std::vector<double> out(m.bias(), m.bias() + d.d_h);
  const double* B = m.B();
  for (size_t i = 0; i < d.d_h; ++i) {
    double s = 0.0;
    for (size_t j = 0; j < d.d_f; ++j) s += B[i * d.d_f + j] * feature[j];
    out[i] += s;
  }
  return out;
}

/// Hidden state and log-probabilities for one step given the previous token.
inline void step(const ToyModel& m, std::span<const double> cond, TokenId prev, std::vector<double>& h,
                 std::vector<double>& logp) {
  const auto& d = m.dims();
  h.resize(d.d_h);
  logp.resize(d.vocab_size);
  const double* e = m.emb(prev);
  const double* A = m.A();
  for (size_t i = 0; i < d.d_h; ++i) {
    double z = cond[i];
    for (size_t j = 0; j < d.d_e; ++j) z += A[i * d.d_e + j] * e[j];
    h[i] = std::tanh(z);
  }
  const double* U = m.U();
  const double* c = m.c();
  double mx = -INFINITY;
  for (size_t k = 0; k < d.vocab_size; ++k) {
    double s = c[k];
    for (size_t i = 0; i < d.d_h; ++i) s += U[k * d.d_h + i] * h[i];
    logp[k] = s;
    mx = std::max(mx, s);
  }
  double sum = 0.0;
  for (size_t k = 0; k < d.vocab_size; ++k) sum += std::exp(logp[k] - mx);
  const double lse = mx + std::log(sum);
  for (double& v : logp) v -= lse;
}

}  // namespace detail

/// Log-probabilities of the next token after `prefix_ids`. Only the last
/// prefix token enters the recurrence; an empty prefix means BOS.
inline std::vector<double> forward(const ToyModel& m, std::span<const double> feature,
                                   std::span<const TokenId> prefix_ids) {
  detail::check_feature(m, feature);
  for (TokenId t : prefix_ids) detail::check_token(m, t);
  const TokenId prev = prefix_ids.empty() ? kBos : prefix_ids.back();
  const auto cond = detail::conditioning(m, feature);
  std::vector<double> h, logp;
  detail::step(m, cond, prev, h, logp);
  return logp;
}

/// Teacher-forced sum of log P(target_t | context), context = prefix ++ target_<t
/// (BOS when the prefix is empty).
inline double sequence_logprob(const ToyModel& m, std::span<const double> feature, std::span<const TokenId> target_ids,
                               std::span<const TokenId> prefix_ids = {}) {
  if (target_ids.empty()) return 0.0;
  detail::check_feature(m, feature);
  for (TokenId t : prefix_ids) detail::check_token(m, t);
  for (TokenId t : target_ids) detail::check_token(m, t);
  const auto cond = detail::conditioning(m, feature);
  std::vector<double> h, logp;
  TokenId prev = prefix_ids.empty() ? kBos : prefix_ids.back();
  double total = 0.0;
  for (TokenId t : target_ids) {
    detail::step(m, cond, prev, h, logp);
    total += logp[t];
    prev = t;
  }
  return total;
}

/// Greedy decoding; ties go to the lowest token id. EOS, when produced, is
/// the last element of the result.
inline std::vector<TokenId> generate(const ToyModel& m, std::span<const double> feature,
                                     std::span<const TokenId> prompt_ids, size_t max_len) {
  if (max_len < 1) throw Error(ErrorKind::config, "max_len must be >= 1");
  detail::check_feature(m, feature);
  for (TokenId t : prompt_ids) detail::check_token(m, t);
  const auto cond = detail::conditioning(m, feature);
  std::vector<double> h, logp;
  TokenId prev = prompt_ids.empty() ? kBos : prompt_ids.back();
  std::vector<TokenId> out;
  while (out.size() < max_len) {
    detail::step(m, cond, prev, h, logp);
    TokenId best = 0;
    for (TokenId k = 1; k < logp.size(); ++k)
      if (logp[k] > logp[best]) best = k;
    out.push_back(best);
    if (best == kEos) break;
    prev = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weighted transition sets and their gradient

/// Because the hidden state depends only on (previous token, feature), all
/// steps sharing a previous token within one sequence share a softmax. A
/// TransitionSet stores, per previous token, weighted next-token targets so
/// that sum_k w_k * log P(next_k | prev, v) and its gradient are computed
/// with one forward/backward per distinct previous token.
struct TransitionSet {
  std::span<const double> feature;
  std::map<TokenId, std::map<TokenId, double>> groups;

  void add_sequence(std::span<const TokenId> prefix, std::span<const TokenId> target,
                    std::span<const std::uint8_t> mask, double weight) {
    TokenId prev = prefix.empty() ? kBos : prefix.back();
    for (size_t t = 0; t < target.size(); ++t) {
      if (mask.empty() || mask[t]) groups[prev][target[t]] += weight;
      prev = target[t];
    }
  }
};

/// Returns sum of weighted log-probabilities and, when `grad` is non-empty,
/// adds `scale` times its gradient into `grad`.
inline double accumulate_transitions(const ToyModel& m, const TransitionSet& set, double scale,
                                     std::span<double> grad) {
  const auto& d = m.dims();
  detail::check_feature(m, set.feature);
  const auto cond = detail::conditioning(m, set.feature);
  std::vector<double> h, logp, dlogits(d.vocab_size), dh(d.d_h), dz(d.d_h), dcond(d.d_h, 0.0);
  const bool want_grad = !grad.empty();
  double value = 0.0;
  const double* U = m.U();
  const double* A = m.A();
  for (const auto& [prev, targets] : set.groups) {
    detail::check_token(m, prev);
    detail::step(m, cond, prev, h, logp);
    double total_weight = 0.0;
    for (const auto& [t, w] : targets) {
      detail::check_token(m, t);
      value += w * logp[t];
      total_weight += w;
    }
    if (!want_grad) continue;
    // d value / d logits_k = w_k - W * p_k
    for (size_t k = 0; k < d.vocab_size; ++k) dlogits[k] = -total_weight * std::exp(logp[k]);
    for (const auto& [t, w] : targets) dlogits[t] += w;
    for (size_t k = 0; k < d.vocab_size; ++k) dlogits[k] *= scale;

    std::fill(dh.begin(), dh.end(), 0.0);
    double* gU = grad.data() + m.u_offset();
    double* gc = grad.data() + m.c_offset();
    for (size_t k = 0; k < d.vocab_size; ++k) {
      const double g = dlogits[k];
      if (g == 0.0) continue;
      gc[k] += g;
      const double* urow = U + k * d.d_h;
      double* gurow = gU + k * d.d_h;
      for (size_t i = 0; i < d.d_h; ++i) {
        gurow[i] += g * h[i];
        dh[i] += g * urow[i];
      }
    }
    for (size_t i = 0; i < d.d_h; ++i) dz[i] = dh[i] * (1.0 - h[i] * h[i]);
    const double* e = m.emb(prev);
    double* gA = grad.data() + m.a_offset();
    double* gemb = grad.data() + m.emb_offset() + prev * d.d_e;
    for (size_t i = 0; i < d.d_h; ++i) {
      dcond[i] += dz[i];
      for (size_t j = 0; j < d.d_e; ++j) {
        gA[i * d.d_e + j] += dz[i] * e[j];
        gemb[j] += dz[i] * A[i * d.d_e + j];
      }
    }
  }
  if (want_grad) {
    double* gB = grad.data() + m.b_offset();
    double* gb = grad.data() + m.bias_offset();
    for (size_t i = 0; i < d.d_h; ++i) {
      gb[i] += dcond[i];
      for (size_t j = 0; j < d.d_f; ++j) gB[i * d.d_f + j] += dcond[i] * set.feature[j];
    }
  }
  return value;
}

// ---------------------------------------------------------------------------
// Losses

/// Decoding context for a target: the prompt, then BOS. The target's first
/// token is predicted from BOS; the prompt reaches the model only through
/// this prefix.
inline std::vector<TokenId> decoder_prefix(std::span<const TokenId> prompt) {
  std::vector<TokenId> p(prompt.begin(), prompt.end());
  p.push_back(kBos);
  return p;
}

inline TransitionSet stage1_transitions(const CoTSample& s) {
  TransitionSet set;
  set.feature = s.feature;
  set.add_sequence(decoder_prefix(s.input_ids), s.target_ids, s.loss_mask, 1.0);
  return set;
}

inline size_t supervised_tokens(std::span<const CoTSample> samples) {
  size_t n = 0;
  for (const auto& s : samples)
    for (auto m : s.loss_mask) n += m ? 1 : 0;
  return n;
}

/// Mean masked NLL per supervised token; gradient added into `grad` if given.
inline double stage1_loss(const ToyModel& m, std::span<const CoTSample> samples, std::span<double> grad = {}) {
  const size_t n = supervised_tokens(samples);
  if (n == 0) return 0.0;
  const double scale = -1.0 / static_cast<double>(n);
  double total = 0.0;
  for (const auto& s : samples) total += accumulate_transitions(m, stage1_transitions(s), scale, grad);
  return -total / static_cast<double>(n);
}

namespace detail {

/// log P(target | prev) recomputed from the raw parameters in extended
/// precision. Finite differences of sequence sums near -100 lose about
/// 1e-9 of gradient accuracy in double; this keeps the oracle well below
/// the check tolerance.
inline long double token_logprob_extended(const ToyModel& m, std::span<const double> feature, TokenId prev,
                                          TokenId target) {
  const auto& d = m.dims();
  std::vector<long double> h(d.d_h);
  const double* e = m.emb(prev);
  for (size_t i = 0; i < d.d_h; ++i) {
    long double z = m.bias()[i];
    for (size_t j = 0; j < d.d_f; ++j) z += static_cast<long double>(m.B()[i * d.d_f + j]) * feature[j];
    for (size_t j = 0; j < d.d_e; ++j) z += static_cast<long double>(m.A()[i * d.d_e + j]) * e[j];
    h[i] = std::tanh(z);
  }
  std::vector<long double> logits(d.vocab_size);
  long double mx = -INFINITY;
  for (size_t k = 0; k < d.vocab_size; ++k) {
    long double s = m.c()[k];
    for (size_t i = 0; i < d.d_h; ++i) s += m.U()[k * d.d_h + i] * h[i];
    logits[k] = s;
    mx = std::max(mx, s);
  }
  long double sum = 0.0L;
  for (long double l : logits) sum += std::exp(l - mx);
  return logits[target] - mx - std::log(sum);
}

/// lp(chosen) - lp(rejected) in extended precision. Transitions common to
/// both sequences cancel exactly, so the difference is summed over the
/// multiset difference only.
inline long double logprob_difference_extended(const ToyModel& m, std::span<const double> feature,
                                               std::span<const TokenId> chosen, std::span<const TokenId> rejected) {
  using Transition = std::pair<TokenId, TokenId>;
  const auto transitions = [](std::span<const TokenId> ids) {
    std::vector<Transition> out;
    TokenId prev = kBos;
    for (TokenId t : ids) {
      out.emplace_back(prev, t);
      prev = t;
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  const auto w = transitions(chosen), l = transitions(rejected);
  std::vector<Transition> w_only, l_only;
  std::set_difference(w.begin(), w.end(), l.begin(), l.end(), std::back_inserter(w_only));
  std::set_difference(l.begin(), l.end(), w.begin(), w.end(), std::back_inserter(l_only));
  long double total = 0.0L;
  for (const auto& [prev, t] : w_only) total += token_logprob_extended(m, feature, prev, t);
  for (const auto& [prev, t] : l_only) total -= token_logprob_extended(m, feature, prev, t);
  return total;
}

}  // namespace detail

/// Stage 1 loss evaluated token by token from the parameters, without the
/// grouped transition path.
inline long double stage1_loss_reference(const ToyModel& m, std::span<const CoTSample> samples) {
  long double total = 0.0L;
  size_t n = 0;
  for (const auto& s : samples) {
    detail::check_feature(m, s.feature);
    TokenId prev = kBos;
    for (size_t t = 0; t < s.target_ids.size(); ++t) {
      detail::check_token(m, s.target_ids[t]);
      if (s.loss_mask[t]) {
        total -= detail::token_logprob_extended(m, s.feature, prev, s.target_ids[t]);
        ++n;
      }
      prev = s.target_ids[t];
    }
  }
  return n == 0 ? 0.0L : total / static_cast<long double>(n);
}

/// A preference pair resolved to token ids and a conditioning feature.
struct TokenizedPair {
  std::string case_id;
  std::vector<double> feature;
  std::vector<TokenId> prompt_ids;
  std::vector<TokenId> chosen_ids;
  std::vector<TokenId> rejected_ids;
};


inline double pair_logprob(const ToyModel& m, const TokenizedPair& p, bool chosen) {
  const auto prefix = decoder_prefix(p.prompt_ids);
  return sequence_logprob(m, p.feature, chosen ? p.chosen_ids : p.rejected_ids, prefix);
}

struct ReferenceLogprobs {
  double chosen = 0.0;
  double rejected = 0.0;
};

inline std::vector<ReferenceLogprobs> reference_logprobs(const ToyModel& reference,
                                                         std::span<const TokenizedPair> pairs) {
  std::vector<ReferenceLogprobs> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({pair_logprob(reference, p, true), pair_logprob(reference, p, false)});
  return out;
}

struct Stage2Eval {
  double loss = 0.0;
  double mean_margin = 0.0;
};

/// Mean DPO loss over pairs; gradient added into `grad` if given.
inline Stage2Eval stage2_loss(const ToyModel& m, std::span<const TokenizedPair> pairs,
                              std::span<const ReferenceLogprobs> ref, double beta, std::span<double> grad = {}) {
  if (pairs.size() != ref.size()) throw Error(ErrorKind::shape, "reference logprobs do not match pairs");
  Stage2Eval out;
  if (pairs.empty()) return out;
  const double n = static_cast<double>(pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    TransitionSet set;
    set.feature = p.feature;
    const auto prefix = decoder_prefix(p.prompt_ids);
    set.add_sequence(prefix, p.chosen_ids, {}, 1.0);
    set.add_sequence(prefix, p.rejected_ids, {}, -1.0);
    // value = lp_w - lp_l; the gradient pass needs the margin first.
    const double diff = accumulate_transitions(m, set, 0.0, {});
    const DpoTerms terms{diff, 0.0, ref[i].chosen - ref[i].rejected, 0.0};
    const double margin = dpo_margin(terms, beta);
    out.loss += dpo_loss_from_margin(margin) / n;
    out.mean_margin += margin / n;
    if (!grad.empty()) {
      const double coef = dpo_grad_coefficient(margin) * beta / n;
      if (coef != 0.0) accumulate_transitions(m, set, coef, grad);
    }
  }
  return out;
}

/// Stage 2 loss from extended-precision log-probabilities. `ref` is the
/// double-precision reference scoring used by training.
inline long double stage2_loss_reference(const ToyModel& m, std::span<const TokenizedPair> pairs,
                                         std::span<const ReferenceLogprobs> ref, double beta) {
  long double loss = 0.0L;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    detail::check_feature(m, p.feature);
    for (TokenId t : p.chosen_ids) detail::check_token(m, t);
    for (TokenId t : p.rejected_ids) detail::check_token(m, t);
    const long double diff = detail::logprob_difference_extended(m, p.feature, p.chosen_ids, p.rejected_ids);
    const long double margin =
        beta * (diff - (static_cast<long double>(ref[i].chosen) - static_cast<long double>(ref[i].rejected)));
    // -log sigmoid(margin)
    loss += std::max(-margin, 0.0L) + std::log1p(std::exp(-std::abs(margin)));
  }
  return pairs.empty() ? 0.0L : loss / static_cast<long double>(pairs.size());
}

struct TrainConfig {
  double learning_rate = 0.5;
  size_t epochs = 100;
  size_t batch_size = 0;  // 0 = full batch
  std::uint64_t seed = 0;
  double grad_clip = 5.0;  // max gradient L2 norm; <= 0 disables

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw Error(ErrorKind::config, "learning_rate must be finite and >= 0");
    if (epochs < 1) throw Error(ErrorKind::config, "epochs must be >= 1");
  }
};

namespace detail {

inline double clip_norm(std::span<double> grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grad) g *= s;
  }
  return norm;
}

inline void apply_update(ToyModel& m, std::span<const double> grad, double lr) {
  auto p = m.params();
  for (size_t i = 0; i < p.size(); ++i) p[i] -= lr * grad[i];
}

/// Contiguous mini-batches over a seeded permutation; one batch covering
/// everything when batch_size is 0 or >= n.
inline std::vector<std::vector<size_t>> make_batches(size_t n, size_t batch_size, Rng& rng) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  if (batch_size == 0 || batch_size >= n) return {order};
  for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  std::vector<std::vector<size_t>> batches;
  for (size_t s = 0; s < n; s += batch_size)
    batches.emplace_back(order.begin() + s, order.begin() + std::min(n, s + batch_size));
  return batches;
}

template <typename T>
std::vector<T> gather(std::span<const T> items, const std::vector<size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(items[i]);
  return out;
}

}  // namespace detail

struct Stage1Result {
  ToyModel model;
  std::vector<double> loss_curve;  // mean per-token NLL at the start of each epoch
};

inline Stage1Result train_stage1(ToyModel model, std::span<const CoTSample> samples, const TrainConfig& config) {
  config.validate();
  if (samples.empty()) throw Error(ErrorKind::config, "stage 1 needs at least one sample");
  Stage1Result result;
  Rng rng(config.seed);
  std::vector<double> grad(model.params().size());
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    size_t epoch_tokens = 0;
    for (const auto& batch_idx : detail::make_batches(samples.size(), config.batch_size, rng)) {
      const auto batch = detail::gather(samples, batch_idx);
      std::fill(grad.begin(), grad.end(), 0.0);
      const double loss = stage1_loss(model, batch, grad);
      const size_t n = supervised_tokens(batch);
      if (!std::isfinite(loss))
        throw Error(ErrorKind::diverged, "stage 1 loss is not finite at epoch " + std::to_string(epoch));
      epoch_loss += loss * static_cast<double>(n);
      epoch_tokens += n;
      const double norm = detail::clip_norm(grad, config.grad_clip);
      if (!std::isfinite(norm))
        throw Error(ErrorKind::diverged, "stage 1 gradient is not finite at epoch " + std::to_string(epoch));
      detail::apply_update(model, grad, config.learning_rate);
    }
    result.loss_curve.push_back(epoch_tokens ? epoch_loss / static_cast<double>(epoch_tokens) : 0.0);
  }
  result.model = std::move(model);
  return result;
}

struct Stage2Result {
  ToyModel model;
  std::vector<double> loss_curve;    // mean DPO loss at the start of each epoch
  std::vector<double> margin_curve;  // mean margin at the start of each epoch
};

/// `reference` is read-only; the policy starts from `policy`.
inline Stage2Result train_stage2(ToyModel policy, const ToyModel& reference, std::span<const TokenizedPair> pairs,
                                 double beta, const TrainConfig& config) {
  config.validate();
  if (pairs.empty()) throw Error(ErrorKind::config, "stage 2 needs at least one preference pair");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw Error(ErrorKind::config, "beta must be finite and >= 0");
  if (!(policy.dims() == reference.dims())) throw Error(ErrorKind::shape, "policy and reference dims differ");
  const auto ref = reference_logprobs(reference, pairs);
  Stage2Result result;
  Rng rng(config.seed);
  std::vector<double> grad(policy.params().size());
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss = 0.0, margin = 0.0;
    for (const auto& batch_idx : detail::make_batches(pairs.size(), config.batch_size, rng)) {
      const auto batch = detail::gather(pairs, batch_idx);
      const auto batch_ref = detail::gather(std::span<const ReferenceLogprobs>(ref), batch_idx);
      std::fill(grad.begin(), grad.end(), 0.0);
      const Stage2Eval eval = stage2_loss(policy, batch, batch_ref, beta, grad);
      if (!std::isfinite(eval.loss))
        throw Error(ErrorKind::diverged, "stage 2 loss is not finite at epoch " + std::to_string(epoch));
      const double w = static_cast<double>(batch.size()) / static_cast<double>(pairs.size());
      loss += eval.loss * w;
      margin += eval.mean_margin * w;
      const double norm = detail::clip_norm(grad, config.grad_clip);
      if (!std::isfinite(norm))
        throw Error(ErrorKind::diverged, "stage 2 gradient is not finite at epoch " + std::to_string(epoch));
      detail::apply_update(policy, grad, config.learning_rate);
    }
    result.loss_curve.push_back(loss);
    result.margin_curve.push_back(margin);
  }
  result.model = std::move(policy);
  return result;
}

/// Fraction of pairs where the model scores chosen above rejected.
inline double preference_accuracy(const ToyModel& m, std::span<const TokenizedPair> pairs) {
  if (pairs.empty()) return 0.0;
  size_t wins = 0;
  for (const auto& p : pairs)
    if (pair_logprob(m, p, true) > pair_logprob(m, p, false)) ++wins;
  return static_cast<double>(wins) / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Max relative error between `analytic` and central differences of `loss`
/// at the given parameter indices; denominator max(|a|, |n|, 1e-8).
inline double compare_gradients(ToyModel& m, const std::function<long double(const ToyModel&)>& loss,
                                 std::span<const double> analytic, std::span<const size_t> indices, double epsilon) {
  double worst = 0.0;
  auto p = m.params();
  for (size_t idx : indices) {
    const double saved = p[idx];
    p[idx] = saved + epsilon;
    const long double up = loss(m);
    const double hi = p[idx];
    p[idx] = saved - epsilon;
    const long double down = loss(m);
    const double lo = p[idx];
    p[idx] = saved;
    // divide by the step actually taken after rounding
    const double numeric = static_cast<double>((up - down) / (static_cast<long double>(hi) - lo));
    const double a = analytic[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

inline std::vector<size_t> sample_parameter_indices(size_t count, size_t total, std::uint64_t seed) {
  std::vector<size_t> all(total);
  for (size_t i = 0; i < total; ++i) all[i] = i;
  Rng rng(seed);
  const size_t k = std::min(count, total);
  for (size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.index(total - i)]);
  all.resize(k);
  return all;
}

inline void check_epsilon(double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) throw Error(ErrorKind::config, "epsilon must lie in [1e-7, 1e-3]");
}

inline double grad_check_stage1(const ToyModel& model, const CoTSample& sample, double epsilon,
                                std::uint64_t seed = 0, size_t num_params = 100) {
  check_epsilon(epsilon);
  ToyModel m = model;
  std::vector<double> grad(m.params().size(), 0.0);
  const std::span<const CoTSample> one(&sample, 1);
  stage1_loss(m, one, grad);
  const auto idx = sample_parameter_indices(num_params, grad.size(), seed);
  return compare_gradients(m, [&](const ToyModel& mm) { return stage1_loss_reference(mm, one); }, grad, idx, epsilon);
}

inline double grad_check_stage2(const ToyModel& model, const ToyModel& reference, const TokenizedPair& pair,
                                double beta, double epsilon, std::uint64_t seed = 0, size_t num_params = 100) {
  check_epsilon(epsilon);
  ToyModel m = model;
  const std::span<const TokenizedPair> one(&pair, 1);
  const auto ref = reference_logprobs(reference, one);
  std::vector<double> grad(m.params().size(), 0.0);
  stage2_loss(m, one, ref, beta, grad);
  const auto idx = sample_parameter_indices(num_params, grad.size(), seed + 1);
  return compare_gradients(m, [&](const ToyModel& mm) { return stage2_loss_reference(mm, one, ref, beta); }, grad,
                           idx, epsilon);
}

/// Worst of the stage 1 check on `sample` and the stage 2 check on `pair`.
inline double grad_check(const ToyModel& model, const CoTSample& sample, const ToyModel& reference,
                         const TokenizedPair& pair, double beta, double epsilon, std::uint64_t seed = 0) {
  return std::max(grad_check_stage1(model, sample, epsilon, seed),
                  grad_check_stage2(model, reference, pair, beta, epsilon, seed));
}

// ---------------------------------------------------------------------------
// Checkpoints: "ABST", u32 version, u32 V, d_e, d_h, d_f, then f64 parameters,
// all little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(std::string_view in, size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const ToyModel& m) {
  std::string out = "ABST";
  detail::put_u32(out, kCheckpointVersion);
  const auto& d = m.dims();
  for (size_t v : {d.vocab_size, d.d_e, d.d_h, d.d_f}) detail::put_u32(out, static_cast<std::uint32_t>(v));
  for (double p : m.params()) detail::put_f64(out, p);
  return out;
}

inline ToyModel deserialize_checkpoint(std::string_view data, std::uint64_t seed = 0) {
  if (data.size() < 24 || data.substr(0, 4) != "ABST") throw Error(ErrorKind::format, "bad checkpoint magic");
  const auto version = detail::get_le(data, 4, 4);
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::unsupported, "checkpoint version " + std::to_string(version));
  ModelDims d{detail::get_le(data, 8, 4), detail::get_le(data, 12, 4), detail::get_le(data, 16, 4),
              detail::get_le(data, 20, 4)};
  ToyModel m(d, seed);
  const size_t expected = 24 + 8 * d.parameter_count();
  if (data.size() != expected)
    throw Error(ErrorKind::size, "checkpoint holds " + std::to_string(data.size()) + " bytes, expected " +
                                     std::to_string(expected));
  auto p = m.params();
  for (size_t i = 0; i < p.size(); ++i) p[i] = std::bit_cast<double>(detail::get_le(data, 24 + 8 * i, 8));
  return m;
}

inline json checkpoint_manifest(const ToyModel& m) {
  const auto& d = m.dims();
  return json{{"format", "ABST"},       {"format_version", kCheckpointVersion},
              {"vocab_size", d.vocab_size}, {"d_e", d.d_e},
              {"d_h", d.d_h},           {"d_f", d.d_f},
              {"seed", m.seed()},       {"parameter_count", d.parameter_count()}};
}

inline void save_checkpoint(const ToyModel& m, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(m));
  std::filesystem::path sidecar = path;
  sidecar += ".json";
  write_file_atomic(sidecar, checkpoint_manifest(m).dump(2) + "\n");
}

inline ToyModel load_checkpoint(const std::filesystem::path& path) {
  std::uint64_t seed = 0;
  std::filesystem::path sidecar = path;
  sidecar += ".json";
  if (std::filesystem::exists(sidecar)) seed = read_json_file(sidecar).value("seed", std::uint64_t{0});
  return deserialize_checkpoint(read_file(path), seed);
}

}  // namespace absteer
