#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "wn/layers.hpp"
#include "wn/model.hpp"
#include "wn/numerics.hpp"
#include "wn/tensor.hpp"

namespace wn {

/// Relative error with an absolute floor so coordinates at the finite-
/// difference noise level compare absolutely instead of blowing up.
inline double fd_relative_error(double analytic, double numeric, double floor_ = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor_});
}

struct GradCheckResult {
  NormMode mode = NormMode::standard;
  Index n_coords = 0;
  double max_err = 0.0;
  double frac_within_tol = 0.0;  // fraction of coordinates with err <= tol
  double tol = 1e-5;
  std::uint64_t seed_used = 0;

  bool passed(double frac_required = 0.99, double worst_allowed = 1e-4) const {
    return frac_within_tol >= frac_required && max_err <= worst_allowed;
  }
};

namespace detail {

/// Smallest |pre-activation| fed into a kinked activation anywhere in the
/// cache; finite differences need this to stay clear of the kink.
inline double kink_margin(const ModelState& model, const ForwardCache& cache) {
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const LayerSpec& s = model.layers[li].spec;
    const bool kinked =
        s.activation == Activation::relu || s.activation == Activation::leaky_relu;
    if (!kinked) continue;
    const auto& z = cache.layers[li].z;
    if (z.size() > 0) margin = std::min(margin, z.cwiseAbs().minCoeff());
  }
  return margin;
}

}  // namespace detail

/// Central finite differences of the softmax cross-entropy loss against the
/// analytic backward pass, coordinate by coordinate, on a prepared model and
/// batch.
inline GradCheckResult gradcheck_fd(ModelState& model, const Tensor& x,
                                    const std::vector<int>& labels, double h = 1e-5,
                                    double tol = 1e-5) {
  GradCheckResult result;
  result.tol = tol;
  for (const Layer& l : model.layers) {
    if (l.spec.trainable()) {
      result.mode = l.spec.norm_mode;
      break;
    }
  }

  auto loss_of = [&](ModelState& m) {
    ForwardResult fr = forward(m, x, PassMode::train);
    return softmax_xent(fr.logits.matrix(), labels).loss;
  };

  ForwardResult fr = forward(model, x, PassMode::train);
  XentResult xe = softmax_xent(fr.logits.matrix(), labels);
  Gradients analytic = backward(model, fr.cache, Tensor::from_matrix(xe.grad_logits));

  auto params = parameters(model);
  Index n_coords = 0, within = 0;
  double max_err = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (Index j = 0; j < params[pi].value.size(); ++j) {
      const double saved = params[pi].value[j];
      params[pi].value[j] = saved + h;
      post_update(model);
      const double lp = loss_of(model);
      params[pi].value[j] = saved - h;
      post_update(model);
      const double lm = loss_of(model);
      params[pi].value[j] = saved;
      post_update(model);
      const double fd = (lp - lm) / (2.0 * h);
      const double err = fd_relative_error(analytic.of[pi][j], fd);
      max_err = std::max(max_err, err);
      if (err <= tol) ++within;
      ++n_coords;
    }
  }
  result.n_coords = n_coords;
  result.max_err = max_err;
  result.frac_within_tol = n_coords > 0 ? static_cast<double>(within) / n_coords : 1.0;
  return result;
}

/// Builds a model for the given specs the same way training does (weight-norm
/// prototype, data-dependent init, conversion), drawing batches from a
/// deterministic seed scan until every pre-activation sits at least `margin`
/// away from the activation kinks. Dense-input models only.
inline GradCheckResult gradcheck_model(const std::vector<LayerSpec>& specs, Index batch,
                                       Index classes, std::uint64_t seed, double h = 1e-5,
                                       double tol = 1e-5, double margin = 1e-3,
                                       Index max_seed_tries = 64) {
  Index input_features = 0;
  for (const LayerSpec& s : specs) {
    if (s.kind == LayerSpec::Kind::dense) {
      input_features = s.fan_in;
      break;
    }
  }
  if (input_features <= 0) {
    throw ConfigError("gradcheck_model: a dense input layer is required");
  }

  std::uint64_t try_seed = seed;
  for (Index attempt = 0; attempt < max_seed_tries; ++attempt, ++try_seed) {
    RngStream rng(try_seed);
    std::vector<LayerSpec> proto = specs;
    NormMode target = NormMode::standard;
    for (LayerSpec& s : proto) {
      if (s.trainable()) {
        target = s.norm_mode;
        s.norm_mode = NormMode::weight_norm;
      }
    }
    ModelState wn_model = build_model(proto, rng.split(1));
    RngStream data_rng = rng.split(2);
    Tensor xb = sample_normal(data_rng, {batch, input_features}, 0.0, 1.0);
    data_dependent_init(wn_model, xb, 1e-8);
    ModelState model = convert_model(wn_model, target);

    std::vector<int> yb(static_cast<std::size_t>(batch));
    for (Index i = 0; i < batch; ++i) {
      yb[static_cast<std::size_t>(i)] =
          static_cast<int>(data_rng.next_below(static_cast<std::uint64_t>(classes)));
    }
    ForwardResult fr = forward(model, xb, PassMode::train);
    if (detail::kink_margin(model, fr.cache) <= margin) continue;

    GradCheckResult result = gradcheck_fd(model, xb, yb, h, tol);
    result.seed_used = try_seed;
    return result;
  }
  throw ContractError("gradcheck: no seed with safe kink margins found");
}

/// Three-layer MLP under one parameterization, ready for gradcheck_model.
inline std::vector<LayerSpec> gradcheck_mlp(NormMode mode, Index d_in = 20, Index h1 = 24,
                                            Index h2 = 16, Index classes = 6,
                                            bool log_scale = false) {
  std::vector<LayerSpec> specs = {
      LayerSpec::dense(d_in, h1, Activation::relu, mode),
      LayerSpec::dense(h1, h2, Activation::leaky_relu, mode),
      LayerSpec::dense(h2, classes, Activation::identity, mode),
  };
  for (LayerSpec& s : specs) s.log_scale = log_scale;
  return specs;
}

/// The finite-difference suite behind the `gradcheck` command: a 3-layer MLP
/// checked under all five parameterizations.
inline std::vector<GradCheckResult> gradcheck_all(std::uint64_t seed, Index batch = 8) {
  std::vector<GradCheckResult> out;
  for (NormMode mode : {NormMode::standard, NormMode::batch_norm, NormMode::weight_norm,
                        NormMode::weight_norm_mean_only, NormMode::mean_only}) {
    out.push_back(gradcheck_model(gradcheck_mlp(mode), batch, 6, seed));
  }
  return out;
}

}  // namespace wn
