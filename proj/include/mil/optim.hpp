#pragma once

#include <cmath>
#include <vector>

#include "mil/error.hpp"
#include "mil/types.hpp"

namespace mil {

struct OptimConfig {
  double learning_rate = 2e-5;
  double weight_decay = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int lookahead_k = 5;
  double lookahead_alpha = 0.5;

  void validate() const {
    if (learning_rate <= 0.0) throw ValidationError("optim config: learning_rate must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ValidationError("optim config: betas must be in [0, 1)");
    if (lookahead_k < 1) throw ValidationError("optim config: lookahead_k must be >= 1");
    if (lookahead_alpha < 0.0 || lookahead_alpha > 1.0)
      throw ValidationError("optim config: lookahead_alpha must be in [0, 1]");
  }
};

/// Moment accumulators plus the Lookahead slow weights.
template <typename S>
struct OptimizerState {
  std::vector<MatX<S>> first_moment;
  std::vector<MatX<S>> second_moment;
  long step = 0;
  std::vector<MatX<S>> slow_weights;
  long lookahead_step = 0;

  static OptimizerState init(const std::vector<const MatX<S>*>& params) {
    OptimizerState st;
    for (const auto* p : params) {
      st.first_moment.push_back(MatX<S>::Zero(p->rows(), p->cols()));
      st.second_moment.push_back(MatX<S>::Zero(p->rows(), p->cols()));
      st.slow_weights.push_back(*p);
    }
    return st;
  }
};

/// One RAdam update with decoupled weight decay. The rectification term
/// gates between the adaptive update and plain bias-corrected momentum while
/// the variance estimate is untrustworthy (rho_t <= 4, the first 4 steps at
/// beta2 = 0.999).
template <typename S>
void radam_step(OptimizerState<S>& st, const std::vector<MatX<S>*>& params, const std::vector<MatX<S>>& grads,
                const OptimConfig& cfg) {
  const S beta1 = static_cast<S>(cfg.beta1);
  const S beta2 = static_cast<S>(cfg.beta2);
  const S lr = static_cast<S>(cfg.learning_rate);
  st.step += 1;
  const double t = static_cast<double>(st.step);
  const double beta1_t = std::pow(cfg.beta1, t);
  const double beta2_t = std::pow(cfg.beta2, t);
  const double rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0;
  const double rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t);

  double rect = 0.0;
  const bool adaptive = rho_t > 4.0;
  if (adaptive)
    rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));

  for (std::size_t i = 0; i < params.size(); ++i) {
    MatX<S>& p = *params[i];
    const MatX<S>& g = grads[i];
    st.first_moment[i] = beta1 * st.first_moment[i] + (S(1) - beta1) * g;
    st.second_moment[i] = beta2 * st.second_moment[i] + (S(1) - beta2) * g.cwiseProduct(g);
    if (cfg.weight_decay > 0.0) p *= (S(1) - lr * static_cast<S>(cfg.weight_decay));
    const MatX<S> m_hat = st.first_moment[i] / static_cast<S>(1.0 - beta1_t);
    if (adaptive) {
      const MatX<S> v_hat = (st.second_moment[i] / static_cast<S>(1.0 - beta2_t)).cwiseSqrt();
      p.array() -= lr * static_cast<S>(rect) * m_hat.array() / (v_hat.array() + static_cast<S>(cfg.eps));
    } else {
      p -= lr * m_hat;
    }
  }
}

/// Every k inner steps: slow += alpha (fast - slow), then fast snaps to slow.
template <typename S>
void lookahead_step(OptimizerState<S>& st, const std::vector<MatX<S>*>& params, int k, double alpha) {
  st.lookahead_step += 1;
  if (st.lookahead_step % k != 0) return;
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.slow_weights[i] += static_cast<S>(alpha) * (*params[i] - st.slow_weights[i]);
    *params[i] = st.slow_weights[i];
  }
}

}  // namespace mil
