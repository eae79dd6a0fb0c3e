#pragma once

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <vector>

#include "wn/errors.hpp"
#include "wn/model.hpp"

namespace wn {

namespace detail {

inline void check_grads(const std::vector<ParamRef>& params, const Gradients& grads) {
  if (grads.of.size() != params.size()) {
    throw DimensionError("optimizer: gradient record does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads.of[i].size() != params[i].value.size()) {
      throw DimensionError("optimizer: gradient shape mismatch for " + params[i].name);
    }
  }
}

inline void ensure_like(std::vector<Eigen::VectorXd>& buffers,
                        const std::vector<ParamRef>& params) {
  if (!buffers.empty()) return;
  buffers.reserve(params.size());
  for (const auto& p : params) buffers.push_back(Eigen::VectorXd::Zero(p.value.size()));
}

}  // namespace detail

/// theta <- theta - lr * grad.
inline void sgd_step(std::vector<ParamRef>& params, const Gradients& grads, double lr) {
  if (!(lr > 0.0)) throw ValueError("sgd: lr must be positive");
  detail::check_grads(params, grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].value -= lr * grads.of[i];
  }
}

/// Classical momentum: u <- momentum * u + grad; theta <- theta - lr * u.
struct MomentumState {
  std::vector<Eigen::VectorXd> velocity;
};

inline void momentum_step(std::vector<ParamRef>& params, const Gradients& grads, double lr,
                          double momentum, MomentumState& state) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValueError("momentum must be in [0, 1)");
  detail::check_grads(params, grads);
  detail::ensure_like(state.velocity, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.velocity[i] = momentum * state.velocity[i] + grads.of[i];
    params[i].value -= lr * state.velocity[i];
  }
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected first/second-moment update.
struct AdamState {
  std::vector<Eigen::VectorXd> m;
  std::vector<Eigen::VectorXd> v;
  long step = 0;
  AdamConfig cfg;
};

inline void adam_step(std::vector<ParamRef>& params, const Gradients& grads, double lr,
                      AdamState& state) {
  const auto& c = state.cfg;
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0 && c.eps > 0.0)) {
    throw ValueError("adam: invalid hyperparameters");
  }
  detail::check_grads(params, grads);
  detail::ensure_like(state.m, params);
  detail::ensure_like(state.v, params);
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * grads.of[i];
    state.v[i] = c.beta2 * state.v[i].array() +
                 (1.0 - c.beta2) * grads.of[i].array().square();
    params[i].value.array() -=
        lr * (state.m[i].array() / bc1) / ((state.v[i].array() / bc2).sqrt() + c.eps);
  }
}

/// Infinity-norm second-moment variant: u <- max(beta2 * u, |grad|);
/// theta <- theta - lr/(1 - beta1^t) * m / u, with a zero step wherever u is
/// still exactly zero (only possible when every past gradient there was 0).
struct AdamaxState {
  std::vector<Eigen::VectorXd> m;
  std::vector<Eigen::VectorXd> u;
  long step = 0;
  AdamConfig cfg;
};

inline void adamax_step(std::vector<ParamRef>& params, const Gradients& grads, double lr,
                        AdamaxState& state) {
  const auto& c = state.cfg;
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ValueError("adamax: invalid hyperparameters");
  }
  detail::check_grads(params, grads);
  detail::ensure_like(state.m, params);
  detail::ensure_like(state.u, params);
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * grads.of[i];
    state.u[i] = (c.beta2 * state.u[i].array()).max(grads.of[i].array().abs());
    params[i].value.array() -= (state.u[i].array() > 0.0)
                                   .select(lr / bc1 * state.m[i].array() / state.u[i].array(),
                                           Eigen::ArrayXd::Zero(state.u[i].size()));
  }
}

/// Polyak averaging: an exponential moving average of the parameters kept
/// alongside training. The first update adopts the parameters as-is.
struct EmaState {
  std::vector<Eigen::VectorXd> shadow;
  double decay = 0.999;
  bool initialized = false;
};

inline void ema_update(EmaState& state, const std::vector<ParamRef>& params) {
  if (!(state.decay > 0.0 && state.decay < 1.0)) throw ValueError("ema: decay must be in (0,1)");
  if (!state.initialized) {
    state.shadow.clear();
    state.shadow.reserve(params.size());
    for (const auto& p : params) state.shadow.push_back(p.value);
    state.initialized = true;
    return;
  }
  if (state.shadow.size() != params.size()) {
    throw DimensionError("ema: parameter list changed size");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.shadow[i].size() != params[i].value.size()) {
      throw DimensionError("ema: shadow shape mismatch for " + params[i].name);
    }
    state.shadow[i] = state.decay * state.shadow[i] + (1.0 - state.decay) * params[i].value;
  }
}

/// Decay giving an averaging window of about `epochs` epochs.
inline double ema_decay_for_epochs(double epochs, Index steps_per_epoch) {
  return 1.0 - 1.0 / (epochs * static_cast<double>(steps_per_epoch));
}

struct ScheduledRates {
  double lr = 0.0;
  double momentum = 0.9;
};

/// First half of training: fixed learning rate, momentum 0.9. Second half:
/// momentum 0.5 and the learning rate decays linearly to zero.
inline ScheduledRates lr_schedule(Index epoch, Index total_epochs, double base_lr) {
  if (epoch < 0 || epoch >= total_epochs) throw ValueError("lr_schedule: epoch out of range");
  const double half = static_cast<double>(total_epochs) / 2.0;
  if (static_cast<double>(epoch) < half) return {base_lr, 0.9};
  const double remaining = static_cast<double>(total_epochs - epoch);
  return {base_lr * remaining / (static_cast<double>(total_epochs) - half), 0.5};
}

// ---------------------------------------------------------------------------

enum class OptKind { sgd, momentum, adam, adamax };

inline OptKind opt_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptKind::sgd;
  if (s == "momentum") return OptKind::momentum;
  if (s == "adam") return OptKind::adam;
  if (s == "adamax") return OptKind::adamax;
  throw ConfigError("unknown optimizer: " + s);
}

inline std::string to_string(OptKind k) {
  switch (k) {
    case OptKind::sgd: return "sgd";
    case OptKind::momentum: return "momentum";
    case OptKind::adam: return "adam";
    case OptKind::adamax: return "adamax";
  }
  return "?";
}

/// Thin dispatcher owned by one training loop. `momentum` feeds the classical
/// momentum coefficient or Adam/Adamax beta1, whichever applies.
struct Optimizer {
  OptKind kind = OptKind::adam;
  AdamConfig cfg;
  MomentumState momentum_state;
  AdamState adam_state;
  AdamaxState adamax_state;

  explicit Optimizer(OptKind k = OptKind::adam, AdamConfig c = {}) : kind(k), cfg(c) {
    adam_state.cfg = c;
    adamax_state.cfg = c;
  }

  void step(std::vector<ParamRef>& params, const Gradients& grads, double lr, double momentum) {
    switch (kind) {
      case OptKind::sgd:
        sgd_step(params, grads, lr);
        break;
      case OptKind::momentum:
        momentum_step(params, grads, lr, momentum, momentum_state);
        break;
      case OptKind::adam:
        adam_state.cfg.beta1 = momentum;
        adam_step(params, grads, lr, adam_state);
        break;
      case OptKind::adamax:
        adamax_state.cfg.beta1 = momentum;
        adamax_step(params, grads, lr, adamax_state);
        break;
    }
  }
};

}  // namespace wn
