#pragma once

#include <Eigen/Core>

#include <cmath>
#include <optional>

#include "wn/errors.hpp"
#include "wn/tensor.hpp"

namespace wn {

// Directions with a norm below this are rejected rather than epsilon-guarded;
// a silent rescue would mask a dead unit.
inline constexpr double kMinDirectionNorm = 1e-30;

/// One output unit's weight vector in the normalized parameterization
/// w = (g / ||v||) v: the direction v and the scale g are learned separately.
/// When the log-scale mode is active, s is the trained parameter and
/// g == exp(s) is maintained at all times.
template <typename Scalar = double>
struct WeightNormParamT {
  VectorX<Scalar> v;
  Scalar g = Scalar(1);
  std::optional<Scalar> s;

  bool log_scale() const { return s.has_value(); }

  void set_log_scale(Scalar log_scale_value) {
    s = log_scale_value;
    g = std::exp(log_scale_value);
  }
};

using WeightNormParam = WeightNormParamT<double>;

/// The effective weight w together with the cached ||v|| it was composed
/// with; ||w|| == |g| by construction.
template <typename Scalar = double>
struct ComposedWeightT {
  VectorX<Scalar> w;
  Scalar norm_v = Scalar(0);
};

using ComposedWeight = ComposedWeightT<double>;

template <typename Scalar>
Scalar direction_norm(const WeightNormParamT<Scalar>& p) {
  const Scalar n = p.v.norm();
  if (!(n > Scalar(kMinDirectionNorm))) {
    throw DegenerateDirectionError("weight norm: ||v|| is (near) zero");
  }
  return n;
}

/// w = (g / ||v||) v.
template <typename Scalar>
ComposedWeightT<Scalar> compose_weight(const WeightNormParamT<Scalar>& p) {
  const Scalar n = direction_norm(p);
  return {(p.g / n) * p.v, n};
}

/// Gradient of the loss in g given the gradient in w:  (grad_w . v) / ||v||.
template <typename Scalar, typename Derived>
Scalar grad_g(const Eigen::MatrixBase<Derived>& grad_w, const WeightNormParamT<Scalar>& p) {
  const Scalar n = direction_norm(p);
  return grad_w.dot(p.v) / n;
}

/// Gradient of the loss in v:  (g/||v||) grad_w - (g grad_g / ||v||^2) v.
template <typename Scalar, typename Derived>
VectorX<Scalar> grad_v(const Eigen::MatrixBase<Derived>& grad_w,
                       const WeightNormParamT<Scalar>& p) {
  const Scalar n = direction_norm(p);
  const Scalar gg = grad_w.dot(p.v) / n;
  return (p.g / n) * grad_w - (p.g * gg / (n * n)) * p.v;
}

/// u - w (w . u) / ||w||^2: the component of u orthogonal to w. Applying the
/// projector this way never materializes I - w w^T / ||w||^2.
template <typename DU, typename DW>
VectorX<typename DU::Scalar> project_complement(const Eigen::MatrixBase<DU>& u,
                                                const Eigen::MatrixBase<DW>& w) {
  using Scalar = typename DU::Scalar;
  const Scalar wn2 = w.squaredNorm();
  if (!(wn2 > Scalar(kMinDirectionNorm) * Scalar(kMinDirectionNorm))) {
    throw DegenerateDirectionError("project_complement: zero direction");
  }
  return u - w * (w.dot(u) / wn2);
}

/// The same v-gradient written as a scaled projection,
/// (g/||v||) M_w grad_w with M_w = I - w w^T / ||w||^2; algebraically equal
/// to grad_v and cross-checked against it in the test suite.
template <typename Scalar, typename Derived>
VectorX<Scalar> grad_v_projected(const Eigen::MatrixBase<Derived>& grad_w,
                                 const WeightNormParamT<Scalar>& p) {
  const Scalar n = direction_norm(p);
  // w is proportional to v, so projecting along w == projecting along v.
  return (p.g / n) * project_complement(grad_w, p.v);
}

/// Chain rule through g = exp(s):  grad_s = g * grad_g.
template <typename Scalar>
Scalar grad_s(Scalar grad_g_value, Scalar g) {
  if (!(g > Scalar(0))) {
    throw InvalidScaleError("grad_s: g must be positive in log-scale mode");
  }
  return g * grad_g_value;
}

/// For an update orthogonal to v with c = ||delta_v|| / ||v||, the new norm
/// is sqrt(1 + c^2) ||v||; returns that factor. The orthogonality
/// precondition is checked within 1e-8 relative tolerance.
template <typename DD, typename DV>
typename DV::Scalar norm_growth_factor(const Eigen::MatrixBase<DD>& delta_v,
                                       const Eigen::MatrixBase<DV>& v) {
  using Scalar = typename DV::Scalar;
  const Scalar vn = v.norm();
  if (!(vn > Scalar(kMinDirectionNorm))) {
    throw DegenerateDirectionError("norm_growth_factor: zero direction");
  }
  const Scalar dn = delta_v.norm();
  if (std::abs(delta_v.dot(v)) > Scalar(1e-8) * dn * vn) {
    throw ContractError("norm_growth_factor: delta_v is not orthogonal to v");
  }
  const Scalar c = dn / vn;
  return std::sqrt(Scalar(1) + c * c);
}

}  // namespace wn
