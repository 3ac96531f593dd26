#pragma once

// Direct preference optimization objective, minimized form:
//   loss = -log sigmoid(beta * ((pw - rw) - (pl - rl)))
// evaluated as softplus(-margin).

#include <array>
#include <cmath>

#include "absteer/common.hpp"

namespace absteer {

struct DpoConfig {
  double beta = 0.1;

  void validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw Error(ErrorKind::config, "DPO beta must be > 0");
  }
};

/// Sequence log-probabilities of the chosen (w) and rejected (l) responses
/// under the policy and the frozen reference.
struct DpoTerms {
  double policy_lp_w = 0.0;
  double policy_lp_l = 0.0;
  double ref_lp_w = 0.0;
  double ref_lp_l = 0.0;
};

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline void check_finite(const DpoTerms& t) {
  if (!std::isfinite(t.policy_lp_w) || !std::isfinite(t.policy_lp_l) || !std::isfinite(t.ref_lp_w) ||
      !std::isfinite(t.ref_lp_l))
    throw Error(ErrorKind::numeric, "DPO log-probabilities must be finite");
}

inline double dpo_margin(const DpoTerms& t, double beta) {
  check_finite(t);
  if (!std::isfinite(beta) || beta < 0.0) throw Error(ErrorKind::config, "DPO beta must be finite and >= 0");
  return beta * ((t.policy_lp_w - t.ref_lp_w) - (t.policy_lp_l - t.ref_lp_l));
}

inline double dpo_loss_from_margin(double margin) {
  if (!std::isfinite(margin)) throw Error(ErrorKind::numeric, "DPO margin must be finite");
  return softplus(-margin);
}

inline double dpo_loss(const DpoTerms& t, double beta) { return dpo_loss_from_margin(dpo_margin(t, beta)); }

/// d loss / d margin = -sigmoid(-margin).
inline double dpo_grad_coefficient(double margin) { return -sigmoid(-margin); }

/// Gradient of dpo_loss with respect to (policy_lp_w, policy_lp_l, ref_lp_w, ref_lp_l).
inline std::array<double, 4> dpo_loss_gradient(const DpoTerms& t, double beta) {
  const double g = dpo_grad_coefficient(dpo_margin(t, beta)) * beta;
  return {g, -g, -g, g};
}

}  // namespace absteer
