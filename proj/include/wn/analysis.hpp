#pragma once

#include <Eigen/Core>

#include <cmath>
#include <vector>

#include "wn/errors.hpp"
#include "wn/model.hpp"
#include "wn/weight_norm.hpp"

namespace wn {

/// Sample covariance (1/n convention) of per-example gradient rows about
/// their mean.
struct GradCovariance {
  Eigen::MatrixXd c;
  Index n_samples = 0;
};

inline GradCovariance grad_covariance(const Eigen::MatrixXd& per_example_grads) {
  const Index n = per_example_grads.rows();
  if (n < 2) throw BatchSizeError("grad_covariance: at least 2 samples required");
  const Eigen::RowVectorXd mean = per_example_grads.colwise().mean();
  const Eigen::MatrixXd centered = per_example_grads.rowwise() - mean;
  GradCovariance gc;
  gc.c = (centered.transpose() * centered) / static_cast<double>(n);
  gc.n_samples = n;
  return gc;
}

/// D = (g^2/||v||^2) M_w C M_w with M_w = I - w w^T/||w||^2, applied as two
/// rank-one updates rather than by materializing the projector. D annihilates
/// w and stays symmetric PSD.
inline Eigen::MatrixXd transformed_covariance(const GradCovariance& c,
                                              const WeightNormParam& p) {
  if (c.c.rows() != c.c.cols()) throw DimensionError("transformed_covariance: C must be square");
  if (c.c.rows() != p.v.size()) {
    throw DimensionError("transformed_covariance: C and v dimensions disagree");
  }
  const double vn = direction_norm(p);
  const auto cw = compose_weight(p);
  const Eigen::VectorXd w_hat = cw.w / cw.w.norm();

  Eigen::MatrixXd mc = c.c - w_hat * (w_hat.transpose() * c.c);  // M C
  Eigen::MatrixXd d = mc - (mc * w_hat) * w_hat.transpose();     // (M C) M
  d *= (p.g * p.g) / (vn * vn);
  return d;
}

/// |cos angle| between w and the dominant eigenvector of C, found by power
/// iteration (1e-10 relative residual, 1e4 iteration cap). The magnitude is
/// reported because eigenvector sign is arbitrary.
inline double dominant_alignment(const GradCovariance& c, const Eigen::VectorXd& w) {
  const Index k = c.c.rows();
  if (c.c.cols() != k || w.size() != k) throw DimensionError("dominant_alignment: shape mismatch");
  if (c.c.cwiseAbs().maxCoeff() == 0.0) {
    throw ValueError("dominant_alignment: undefined for the zero covariance matrix");
  }
  const double wn_ = w.norm();
  if (!(wn_ > kMinDirectionNorm)) throw DegenerateDirectionError("dominant_alignment: zero w");

  // Deterministic start: the all-ones direction, falling back to basis
  // vectors whenever the iterate lands in the null space.
  Eigen::VectorXd x = Eigen::VectorXd::Ones(k).normalized();
  Index fallback = 0;
  const Index max_iters = 10000;
  for (Index it = 0; it < max_iters; ++it) {
    Eigen::VectorXd y = c.c * x;
    double yn = y.norm();
    while (yn == 0.0 && fallback < k) {
      x = Eigen::VectorXd::Unit(k, fallback++);
      y = c.c * x;
      yn = y.norm();
    }
    if (yn == 0.0) {
      throw ValueError("dominant_alignment: covariance annihilates every probe direction");
    }
    x = y / yn;
    const double lambda = x.dot(c.c * x);
    const double residual = (c.c * x - lambda * x).norm();
    if (residual <= 1e-10 * std::max(std::abs(lambda), 1e-300)) break;
  }
  return std::abs(w.dot(x)) / wn_;
}

/// Per-step, per-layer record of (||v||, g, g/||v||, ||dv||/||v||) for the
/// weight-normalized layers of a model.
struct NormTrace {
  struct Row {
    long step = 0;
    Index layer = 0;
    double v_norm = 0.0;
    double g = 0.0;
    double g_over_v = 0.0;
    double rel_update = 0.0;
  };
  std::vector<Row> rows;
};

/// Snapshot of the direction matrices, taken before an update so the relative
/// update size can be recorded after it.
inline std::vector<Eigen::MatrixXd> snapshot_directions(const ModelState& model) {
  std::vector<Eigen::MatrixXd> vs;
  for (const Layer& l : model.layers) {
    if (l.spec.trainable() && l.weight_normed()) vs.push_back(l.weight);
  }
  return vs;
}

inline void record_norm_trace(NormTrace& trace, const ModelState& model,
                              const std::vector<Eigen::MatrixXd>& prev_directions, long step) {
  std::size_t wi = 0;
  bool any = false;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const Layer& l = model.layers[li];
    if (!l.spec.trainable() || !l.weight_normed()) continue;
    any = true;
    if (wi >= prev_directions.size()) {
      throw ContractError("record_norm_trace: snapshot does not match the model");
    }
    const Eigen::MatrixXd& prev = prev_directions[wi++];
    NormTrace::Row row;
    row.step = step;
    row.layer = static_cast<Index>(li);
    row.v_norm = l.weight.rowwise().norm().mean();
    row.g = l.g.cwiseAbs().mean();
    row.g_over_v = (l.g.cwiseAbs().array() / l.weight.rowwise().norm().array()).mean();
    const double prev_norm = prev.norm();
    row.rel_update = prev_norm > 0.0 ? (l.weight - prev).norm() / prev_norm : 0.0;
    trace.rows.push_back(row);
  }
  if (!any) {
    throw ContractError("record_norm_trace: model has no weight-normalized layers");
  }
}

}  // namespace wn
