#pragma once

#include <Eigen/Core>

#include <cmath>
#include <utility>

#include "wn/errors.hpp"
#include "wn/tensor.hpp"

namespace wn {

enum class PassMode { train, eval };

/// Full batch normalization over the rows of a [batch x features] matrix.
/// Minibatch statistics use the population (1/n) convention; eps sits inside
/// the square root. Running statistics adopt the first training batch and
/// afterwards follow running <- momentum * running + (1 - momentum) * batch.
struct BatchNormState {
  Eigen::VectorXd gamma;
  Eigen::VectorXd beta;
  Eigen::VectorXd running_mean;
  Eigen::VectorXd running_var;
  double momentum = 0.9;
  double eps = 1e-6;
  bool seeded = false;

  static BatchNormState create(Index features, double momentum = 0.9, double eps = 1e-6) {
    BatchNormState st;
    st.gamma = Eigen::VectorXd::Ones(features);
    st.beta = Eigen::VectorXd::Zero(features);
    st.running_mean = Eigen::VectorXd::Zero(features);
    st.running_var = Eigen::VectorXd::Ones(features);
    st.momentum = momentum;
    st.eps = eps;
    return st;
  }
};

struct BatchNormCache {
  Eigen::MatrixXd xhat;
  Eigen::VectorXd inv_std;
  bool train = false;
};

inline Eigen::MatrixXd batchnorm_forward(const Eigen::MatrixXd& t, BatchNormState& state,
                                         PassMode mode, BatchNormCache* cache = nullptr) {
  const Index n = t.rows(), f = t.cols();
  if (f != state.gamma.size()) throw DimensionError("batchnorm: feature count mismatch");

  if (mode == PassMode::train) {
    if (n < 2) throw BatchSizeError("batchnorm: train mode needs a batch of at least 2");
    const Eigen::VectorXd mean = t.colwise().mean().transpose();
    const Eigen::VectorXd var =
        ((t.rowwise() - mean.transpose()).array().square().colwise().sum() / double(n))
            .transpose();
    const Eigen::VectorXd inv_std = (var.array() + state.eps).rsqrt();

    Eigen::MatrixXd xhat =
        (t.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array();

    if (!state.seeded) {
      state.running_mean = mean;
      state.running_var = var;
      state.seeded = true;
    } else {
      state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mean;
      state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * var;
    }
    Eigen::MatrixXd out = (xhat.array().rowwise() * state.gamma.transpose().array()).rowwise() +
                          state.beta.transpose().array();
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = inv_std;
      cache->train = true;
    }
    return out;
  }

  if (!state.seeded) {
    throw ContractError("batchnorm: eval before running statistics were seeded");
  }
  if (cache) cache->train = false;
  const Eigen::VectorXd inv_std = (state.running_var.array() + state.eps).rsqrt();
  return (((t.rowwise() - state.running_mean.transpose()).array().rowwise() *
           inv_std.transpose().array())
              .rowwise() *
          state.gamma.transpose().array())
             .rowwise() +
         state.beta.transpose().array();
}

struct BatchNormGrads {
  Eigen::MatrixXd grad_t;
  Eigen::VectorXd grad_gamma;
  Eigen::VectorXd grad_beta;
};

/// Exact gradients of the train-mode forward expression, differentiating
/// through the minibatch mean and variance.
inline BatchNormGrads batchnorm_backward(const Eigen::MatrixXd& grad_out,
                                         const BatchNormCache& cache,
                                         const BatchNormState& state) {
  if (!cache.train) throw ContractError("batchnorm_backward: cache is not from a train pass");
  if (grad_out.rows() != cache.xhat.rows() || grad_out.cols() != cache.xhat.cols()) {
    throw DimensionError("batchnorm_backward: gradient shape mismatch");
  }
  const double n = static_cast<double>(grad_out.rows());

  BatchNormGrads g;
  g.grad_beta = grad_out.colwise().sum().transpose();
  g.grad_gamma = (grad_out.array() * cache.xhat.array()).colwise().sum().transpose();

  const Eigen::MatrixXd dxhat =
      grad_out.array().rowwise() * state.gamma.transpose().array();
  const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
  const Eigen::RowVectorXd sum_dxhat_xhat = (dxhat.array() * cache.xhat.array()).colwise().sum();

  g.grad_t = ((n * dxhat.array()).rowwise() - sum_dxhat.array() -
              cache.xhat.array().rowwise() * sum_dxhat_xhat.array())
                 .rowwise() *
             (cache.inv_std.transpose().array() / n);
  return g;
}

/// Mean-only batch normalization (t~ = t - mu[t] + b): the minibatch mean is
/// subtracted but nothing is divided by a standard deviation. The running
/// mean stores the pre-bias statistic; b is added after subtraction in both
/// modes.
struct MeanOnlyBNState {
  Eigen::VectorXd running_mean;
  double momentum = 0.9;
  bool seeded = false;

  static MeanOnlyBNState create(Index features, double momentum = 0.9) {
    MeanOnlyBNState st;
    st.running_mean = Eigen::VectorXd::Zero(features);
    st.momentum = momentum;
    return st;
  }
};

inline Eigen::MatrixXd meanonly_forward(const Eigen::MatrixXd& t, const Eigen::VectorXd& b,
                                        MeanOnlyBNState& state, PassMode mode) {
  if (t.cols() != b.size() || t.cols() != state.running_mean.size()) {
    throw DimensionError("meanonly: feature count mismatch");
  }
  if (mode == PassMode::train) {
    if (t.rows() < 1) throw BatchSizeError("meanonly: empty batch");
    const Eigen::VectorXd mean = t.colwise().mean().transpose();
    if (!state.seeded) {
      state.running_mean = mean;
      state.seeded = true;
    } else {
      state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mean;
    }
    return (t.rowwise() - mean.transpose()).rowwise() + b.transpose();
  }
  if (!state.seeded) {
    throw ContractError("meanonly: eval before the running mean was seeded");
  }
  return (t.rowwise() - state.running_mean.transpose()).rowwise() + b.transpose();
}

struct MeanOnlyGrads {
  Eigen::MatrixXd grad_t;
  Eigen::VectorXd grad_b;
};

/// grad_t = grad_tilde - column_mean(grad_tilde); grad_b = column_sum.
/// Subtracting the column mean is exactly the gradient centering effect of
/// mean-only batch normalization.
inline MeanOnlyGrads meanonly_backward(const Eigen::MatrixXd& grad_tilde) {
  MeanOnlyGrads g;
  const Eigen::RowVectorXd col_mean = grad_tilde.colwise().mean();
  g.grad_t = grad_tilde.rowwise() - col_mean;
  g.grad_b = grad_tilde.colwise().sum().transpose();
  return g;
}

/// Per-unit scale and bias assigned by the data-dependent initializer:
/// g <- 1/(sigma + eps), b <- -mu/(sigma + eps) from the minibatch statistics
/// of the unit-direction pre-activation t = v.x/||v||.
struct InitAssignment {
  Eigen::VectorXd g;
  Eigen::VectorXd b;
};

inline InitAssignment init_from_stats(const Eigen::VectorXd& mean, const Eigen::VectorXd& std_dev,
                                      double eps) {
  if (mean.size() != std_dev.size()) throw DimensionError("init_from_stats: size mismatch");
  InitAssignment a;
  a.g = (std_dev.array() + eps).inverse();
  a.b = -mean.array() * a.g.array();
  return a;
}

/// What the initializer assigned and the statistics it achieved on the
/// initialization minibatch.
struct InitReport {
  Eigen::VectorXd g_init;
  Eigen::VectorXd b_init;
  Eigen::VectorXd post_mean;
  Eigen::VectorXd post_std;
};

}  // namespace wn
