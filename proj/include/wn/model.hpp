#pragma once

#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "wn/errors.hpp"
#include "wn/layers.hpp"
#include "wn/normalization.hpp"
#include "wn/numerics.hpp"
#include "wn/rng.hpp"
#include "wn/tensor.hpp"
#include "wn/weight_norm.hpp"

namespace wn {

/// Parameter storage for one layer. `weight` holds one row per output unit
/// (dense) or per filter (conv, flattened as c*kh*kw + ky*kw + kx); it is the
/// direction v under the weight-norm modes and the plain weight otherwise.
struct Layer {
  LayerSpec spec;
  Eigen::MatrixXd weight;
  Eigen::VectorXd g;      // weight-norm modes
  Eigen::VectorXd log_s;  // log-scale mode: g == exp(log_s)
  Eigen::VectorXd bias;   // affine / mean-only bias; empty under batch_norm
  BatchNormState bn;
  MeanOnlyBNState mbn;

  Index fan_in() const {
    return spec.kind == LayerSpec::Kind::conv2d
               ? spec.in_channels * spec.kernel_h * spec.kernel_w
               : spec.fan_in;
  }
  Index units() const {
    return spec.kind == LayerSpec::Kind::conv2d ? spec.out_channels : spec.fan_out;
  }
  bool weight_normed() const { return uses_weight_norm(spec.norm_mode); }
  bool has_bias() const { return spec.norm_mode != NormMode::batch_norm; }

  /// Keeps g == exp(log_s) when the log-scale mode is trained.
  void sync_log_scale() {
    if (spec.log_scale && weight_normed()) g = log_s.array().exp();
  }

  /// Effective weight rows: (g_i / ||v_i||) v_i under weight norm, the stored
  /// rows otherwise. Also reports per-row direction norms.
  std::pair<Eigen::MatrixXd, Eigen::VectorXd> effective_weight() const {
    if (!weight_normed()) {
      return {weight, weight.rowwise().norm()};
    }
    Eigen::VectorXd norms = weight.rowwise().norm();
    for (Index i = 0; i < norms.size(); ++i) {
      if (!(norms[i] > kMinDirectionNorm)) {
        throw DegenerateDirectionError("layer: ||v|| is (near) zero for unit " +
                                       std::to_string(i));
      }
    }
    Eigen::MatrixXd w =
        weight.array().colwise() * (g.array() / norms.array());
    return {std::move(w), std::move(norms)};
  }
};

struct ModelState {
  std::vector<Layer> layers;
  RngStream rng;  // consumed by noise layers in train mode
};

/// Named view into one trainable tensor of the model; optimizers and
/// checkpoints address parameters through these.
struct ParamRef {
  std::string name;
  Eigen::Map<Eigen::VectorXd> value;
};

/// Per-parameter gradients, parallel to parameters(model).
struct Gradients {
  std::vector<Eigen::VectorXd> of;
};

inline std::vector<ParamRef> parameters(ModelState& model) {
  std::vector<ParamRef> out;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    Layer& l = model.layers[li];
    if (!l.spec.trainable()) continue;
    const std::string prefix = "layer" + std::to_string(li) + ".";
    auto add = [&](const std::string& name, Eigen::VectorXd& v) {
      out.push_back({prefix + name, Eigen::Map<Eigen::VectorXd>(v.data(), v.size())});
    };
    out.push_back({prefix + "weight",
                   Eigen::Map<Eigen::VectorXd>(l.weight.data(), l.weight.size())});
    if (l.weight_normed()) {
      if (l.spec.log_scale) {
        add("s", l.log_s);
      } else {
        add("g", l.g);
      }
    }
    if (l.has_bias()) add("bias", l.bias);
    if (l.spec.norm_mode == NormMode::batch_norm) {
      add("gamma", l.bn.gamma);
      add("beta", l.bn.beta);
    }
  }
  return out;
}

inline Index parameter_count(ModelState& model) {
  Index n = 0;
  for (const auto& p : parameters(model)) n += p.value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Construction.

inline void validate_specs(const std::vector<LayerSpec>& specs) {
  if (specs.empty()) throw ConfigError("model: empty layer list");
  Index flat = -1;      // known flat feature count, -1 while unknown
  Index channels = -1;  // known channel count in [N,C,H,W] flow
  for (const LayerSpec& s : specs) {
    switch (s.kind) {
      case LayerSpec::Kind::dense:
        if (s.fan_in <= 0 || s.fan_out <= 0) throw ConfigError("dense: non-positive size");
        if (flat >= 0 && flat != s.fan_in) {
          throw ConfigError("dense: fan_in " + std::to_string(s.fan_in) +
                            " does not match previous layer output " + std::to_string(flat));
        }
        flat = s.fan_out;
        channels = -1;
        break;
      case LayerSpec::Kind::conv2d:
        if (s.in_channels <= 0 || s.out_channels <= 0 || s.kernel_h <= 0 || s.kernel_w <= 0 ||
            s.stride < 1 || s.pad < 0) {
          throw ConfigError("conv: invalid geometry");
        }
        if (flat >= 0) throw ConfigError("conv after a dense layer is not supported");
        if (channels >= 0 && channels != s.in_channels) {
          throw ConfigError("conv: in_channels does not match previous layer");
        }
        channels = s.out_channels;
        break;
      case LayerSpec::Kind::pool:
        if (flat >= 0) throw ConfigError("pool after a dense layer is not supported");
        if (s.pool == LayerSpec::Pool::global_avg && channels >= 0) {
          flat = channels;
          channels = -1;
        }
        break;
      case LayerSpec::Kind::activation:
      case LayerSpec::Kind::noise:
        break;
    }
  }
}

/// Samples v (or w) from N(0, 0.05^2), sets g = 1 and b = 0; the
/// data-dependent initializer assigns the real scales and biases later.
inline ModelState build_model(const std::vector<LayerSpec>& specs, RngStream rng) {
  validate_specs(specs);
  ModelState model;
  model.rng = rng;
  for (const LayerSpec& s : specs) {
    Layer l;
    l.spec = s;
    if (s.trainable()) {
      const Index units = s.kind == LayerSpec::Kind::conv2d ? s.out_channels : s.fan_out;
      const Index fan = s.kind == LayerSpec::Kind::conv2d
                            ? s.in_channels * s.kernel_h * s.kernel_w
                            : s.fan_in;
      Tensor w0 = sample_normal(model.rng, {units, fan}, 0.0, 0.05);
      l.weight = w0.matrix();
      if (uses_weight_norm(s.norm_mode)) {
        l.g = Eigen::VectorXd::Ones(units);
        if (s.log_scale) l.log_s = Eigen::VectorXd::Zero(units);
      }
      if (l.has_bias()) l.bias = Eigen::VectorXd::Zero(units);
      if (s.norm_mode == NormMode::batch_norm) l.bn = BatchNormState::create(units);
      if (uses_mean_only(s.norm_mode)) l.mbn = MeanOnlyBNState::create(units);
    }
    model.layers.push_back(std::move(l));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Forward / backward.

struct LayerCache {
  std::vector<Index> in_shape;
  std::vector<Index> out_shape;
  Eigen::MatrixXd x2d;      // dense input (flattened when needed)
  Tensor x4;                // conv input
  Eigen::MatrixXd t;        // pre-normalization pre-activation, channel-major
  Eigen::MatrixXd z;        // post-normalization pre-activation, channel-major
  Eigen::MatrixXd y;        // activation output (kept for softmax backward)
  Eigen::MatrixXd w_eff;    // composed effective weight
  Eigen::VectorXd v_norms;  // cached ||v|| per row
  BatchNormCache bn;
  std::vector<Index> pool_argmax;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  PassMode mode = PassMode::eval;
  bool consumed = false;
};

struct ForwardResult {
  ForwardCache cache;
  Tensor logits;
};

namespace detail {

inline Eigen::MatrixXd as_2d(const Tensor& t) {
  if (t.rank() == 2) return t.matrix();
  if (t.rank() == 4) return t.as_matrix(t.dim(0), t.dim(1) * t.dim(2) * t.dim(3));
  throw DimensionError("layer: rank-2 or rank-4 value required");
}

inline Tensor tensor_from_2d(const Eigen::MatrixXd& m) {
  return Tensor::from_matrix(m);
}

/// Builds the effective conv kernel [F,C,kh,kw] from a layer's weight rows.
inline Tensor conv_kernel(const Layer& l, const Eigen::MatrixXd& w_eff) {
  const LayerSpec& s = l.spec;
  Tensor k({s.out_channels, s.in_channels, s.kernel_h, s.kernel_w});
  for (Index f = 0; f < s.out_channels; ++f) {
    for (Index col = 0; col < w_eff.cols(); ++col) {
      k.flat()[f * w_eff.cols() + col] = w_eff(f, col);
    }
  }
  return k;
}

inline Eigen::MatrixXd kernel_grad_to_rows(const Tensor& grad_k) {
  const Index f = grad_k.dim(0);
  const Index fan = grad_k.dim(1) * grad_k.dim(2) * grad_k.dim(3);
  return grad_k.as_matrix(f, fan);
}

}  // namespace detail

/// Layerwise application of compose-weight, affine map, normalization and
/// activation. Train mode records what backward needs and advances running
/// statistics / the noise stream; eval mode is pure.
inline ForwardResult forward(ModelState& model, const Tensor& x, PassMode mode) {
  ForwardResult res;
  res.cache.mode = mode;
  Tensor cur = x;

  for (Layer& l : model.layers) {
    LayerCache lc;
    lc.in_shape = cur.shape();
    const LayerSpec& s = l.spec;
    switch (s.kind) {
      case LayerSpec::Kind::dense: {
        lc.x2d = detail::as_2d(cur);
        if (lc.x2d.cols() != s.fan_in) {
          throw DimensionError("dense: input features " + std::to_string(lc.x2d.cols()) +
                               " do not match fan_in " + std::to_string(s.fan_in));
        }
        auto [w_eff, norms] = l.effective_weight();
        lc.w_eff = std::move(w_eff);
        lc.v_norms = std::move(norms);
        lc.t = lc.x2d * lc.w_eff.transpose();
        switch (s.norm_mode) {
          case NormMode::standard:
          case NormMode::weight_norm:
            lc.z = lc.t.rowwise() + l.bias.transpose();
            break;
          case NormMode::batch_norm:
            lc.z = batchnorm_forward(lc.t, l.bn, mode, &lc.bn);
            break;
          case NormMode::mean_only:
          case NormMode::weight_norm_mean_only:
            lc.z = meanonly_forward(lc.t, l.bias, l.mbn, mode);
            break;
        }
        lc.y = apply_activation(lc.z, s.activation, s.leaky_slope);
        cur = detail::tensor_from_2d(lc.y);
        break;
      }
      case LayerSpec::Kind::conv2d: {
        if (cur.rank() != 4) throw DimensionError("conv: rank-4 input required");
        lc.x4 = cur;
        auto [w_eff, norms] = l.effective_weight();
        lc.w_eff = std::move(w_eff);
        lc.v_norms = std::move(norms);
        const Tensor k_eff = detail::conv_kernel(l, lc.w_eff);
        Tensor t4 = conv2d(cur, k_eff, s.stride, s.pad);
        lc.out_shape = t4.shape();
        lc.t = nfhw_to_channel_matrix(t4);
        switch (s.norm_mode) {
          case NormMode::standard:
          case NormMode::weight_norm:
            lc.z = lc.t.rowwise() + l.bias.transpose();
            break;
          case NormMode::batch_norm:
            lc.z = batchnorm_forward(lc.t, l.bn, mode, &lc.bn);
            break;
          case NormMode::mean_only:
          case NormMode::weight_norm_mean_only:
            lc.z = meanonly_forward(lc.t, l.bias, l.mbn, mode);
            break;
        }
        if (s.activation == Activation::softmax) {
          throw ConfigError("conv: softmax activation is only supported on rank-2 values");
        }
        lc.y = apply_activation(lc.z, s.activation, s.leaky_slope);
        cur = channel_matrix_to_nfhw(lc.y, lc.out_shape);
        break;
      }
      case LayerSpec::Kind::activation: {
        if (s.activation == Activation::softmax && cur.rank() != 2) {
          throw ConfigError("softmax activation requires a rank-2 value");
        }
        lc.z = detail::as_2d(cur);
        lc.y = apply_activation(lc.z, s.activation, s.leaky_slope);
        Tensor next(cur.shape());
        next.as_matrix(lc.z.rows(), lc.z.cols()) = lc.y;
        cur = std::move(next);
        break;
      }
      case LayerSpec::Kind::pool: {
        if (s.pool == LayerSpec::Pool::max2x2) {
          MaxPoolResult pr = max_pool_2x2(cur);
          lc.pool_argmax = std::move(pr.argmax);
          cur = std::move(pr.out);
        } else {
          cur = global_avg_pool(cur);
        }
        break;
      }
      case LayerSpec::Kind::noise: {
        cur = gaussian_noise_layer(cur, s.noise_sigma, model.rng, mode == PassMode::train);
        break;
      }
    }
    lc.out_shape = cur.shape();
    res.cache.layers.push_back(std::move(lc));
  }
  res.logits = std::move(cur);
  return res;
}

/// Exact gradients for every trainable parameter under each layer's
/// parameterization. `effective_weight_grads`, when given, additionally
/// receives dL/dw (the gradient in the effective weights) per trainable
/// layer, which is what the gradient-covariance analysis consumes.
inline Gradients backward(ModelState& model, ForwardCache& cache, const Tensor& grad_logits,
                          std::vector<Eigen::MatrixXd>* effective_weight_grads = nullptr) {
  if (cache.mode != PassMode::train) {
    throw ContractError("backward: cache is not from a train-mode forward pass");
  }
  if (cache.consumed) throw ContractError("backward: stale cache (already consumed)");
  if (cache.layers.size() != model.layers.size()) {
    throw ContractError("backward: cache does not match this model");
  }
  cache.consumed = true;

  const std::size_t n_layers = model.layers.size();
  std::vector<Eigen::VectorXd> weight_grads(n_layers), g_grads(n_layers), bias_grads(n_layers),
      gamma_grads(n_layers), beta_grads(n_layers);
  if (effective_weight_grads) {
    effective_weight_grads->assign(n_layers, Eigen::MatrixXd());
  }

  Tensor g_cur = grad_logits;
  for (std::size_t li = n_layers; li-- > 0;) {
    Layer& l = model.layers[li];
    LayerCache& lc = cache.layers[li];
    const LayerSpec& s = l.spec;
    switch (s.kind) {
      case LayerSpec::Kind::dense: {
        const Eigen::MatrixXd grad_y = detail::as_2d(g_cur);
        Eigen::MatrixXd dz = activation_backward(grad_y, lc.z, lc.y, s.activation, s.leaky_slope);
        Eigen::MatrixXd dt;
        switch (s.norm_mode) {
          case NormMode::standard:
          case NormMode::weight_norm:
            dt = std::move(dz);
            bias_grads[li] = dt.colwise().sum().transpose();
            break;
          case NormMode::batch_norm: {
            BatchNormGrads bg = batchnorm_backward(dz, lc.bn, l.bn);
            dt = std::move(bg.grad_t);
            gamma_grads[li] = std::move(bg.grad_gamma);
            beta_grads[li] = std::move(bg.grad_beta);
            break;
          }
          case NormMode::mean_only:
          case NormMode::weight_norm_mean_only: {
            MeanOnlyGrads mg = meanonly_backward(dz);
            dt = std::move(mg.grad_t);
            bias_grads[li] = std::move(mg.grad_b);
            break;
          }
        }
        Eigen::MatrixXd dw_eff = dt.transpose() * lc.x2d;
        Eigen::MatrixXd dx = dt * lc.w_eff;
        if (effective_weight_grads) (*effective_weight_grads)[li] = dw_eff;

        Eigen::MatrixXd dweight;
        if (l.weight_normed()) {
          dweight.resize(l.weight.rows(), l.weight.cols());
          Eigen::VectorXd dg(l.units());
          for (Index r = 0; r < l.weight.rows(); ++r) {
            WeightNormParam p{l.weight.row(r).transpose(), l.g[r], std::nullopt};
            const Eigen::VectorXd gw = dw_eff.row(r).transpose();
            dg[r] = grad_g(gw, p);
            dweight.row(r) = grad_v(gw, p).transpose();
          }
          g_grads[li] = s.log_scale
                            ? Eigen::VectorXd(dg.array() * l.g.array())  // chain through exp
                            : dg;
        } else {
          dweight = std::move(dw_eff);
        }
        weight_grads[li] =
            Eigen::Map<const Eigen::VectorXd>(dweight.data(), dweight.size());
        Tensor next(lc.in_shape);
        next.as_matrix(dx.rows(), dx.cols()) = dx;
        g_cur = std::move(next);
        break;
      }
      case LayerSpec::Kind::conv2d: {
        const Eigen::MatrixXd grad_y = nfhw_to_channel_matrix(g_cur);
        Eigen::MatrixXd dz = activation_backward(grad_y, lc.z, lc.y, s.activation, s.leaky_slope);
        Eigen::MatrixXd dtm;
        switch (s.norm_mode) {
          case NormMode::standard:
          case NormMode::weight_norm:
            dtm = std::move(dz);
            bias_grads[li] = dtm.colwise().sum().transpose();
            break;
          case NormMode::batch_norm: {
            BatchNormGrads bg = batchnorm_backward(dz, lc.bn, l.bn);
            dtm = std::move(bg.grad_t);
            gamma_grads[li] = std::move(bg.grad_gamma);
            beta_grads[li] = std::move(bg.grad_beta);
            break;
          }
          case NormMode::mean_only:
          case NormMode::weight_norm_mean_only: {
            MeanOnlyGrads mg = meanonly_backward(dz);
            dtm = std::move(mg.grad_t);
            bias_grads[li] = std::move(mg.grad_b);
            break;
          }
        }
        Tensor dt4 = channel_matrix_to_nfhw(dtm, lc.out_shape);
        const Tensor k_eff = detail::conv_kernel(l, lc.w_eff);
        const std::vector<Index> k_shape = {s.out_channels, s.in_channels, s.kernel_h,
                                            s.kernel_w};
        Tensor dk = conv2d_backward_kernel(dt4, lc.x4, s.stride, s.pad, k_shape);
        Tensor dx4 = conv2d_backward_input(dt4, k_eff, s.stride, s.pad, lc.x4.shape());
        Eigen::MatrixXd dw_eff = detail::kernel_grad_to_rows(dk);
        if (effective_weight_grads) (*effective_weight_grads)[li] = dw_eff;

        Eigen::MatrixXd dweight;
        if (l.weight_normed()) {
          dweight.resize(l.weight.rows(), l.weight.cols());
          Eigen::VectorXd dg(l.units());
          for (Index r = 0; r < l.weight.rows(); ++r) {
            WeightNormParam p{l.weight.row(r).transpose(), l.g[r], std::nullopt};
            const Eigen::VectorXd gw = dw_eff.row(r).transpose();
            dg[r] = grad_g(gw, p);
            dweight.row(r) = grad_v(gw, p).transpose();
          }
          g_grads[li] = s.log_scale ? Eigen::VectorXd(dg.array() * l.g.array()) : dg;
        } else {
          dweight = std::move(dw_eff);
        }
        weight_grads[li] =
            Eigen::Map<const Eigen::VectorXd>(dweight.data(), dweight.size());
        g_cur = std::move(dx4);
        break;
      }
      case LayerSpec::Kind::activation: {
        const Eigen::MatrixXd grad_y = detail::as_2d(g_cur);
        Eigen::MatrixXd dz = activation_backward(grad_y, lc.z, lc.y, s.activation, s.leaky_slope);
        Tensor next(lc.in_shape);
        next.as_matrix(dz.rows(), dz.cols()) = dz;
        g_cur = std::move(next);
        break;
      }
      case LayerSpec::Kind::pool: {
        if (s.pool == LayerSpec::Pool::max2x2) {
          g_cur = max_pool_2x2_backward(g_cur, lc.pool_argmax, lc.in_shape);
        } else {
          g_cur = global_avg_pool_backward(g_cur, lc.in_shape);
        }
        break;
      }
      case LayerSpec::Kind::noise:
        break;  // additive noise: gradient passes through unchanged
    }
  }

  // Pack in the same order parameters() enumerates.
  Gradients grads;
  for (std::size_t li = 0; li < n_layers; ++li) {
    Layer& l = model.layers[li];
    if (!l.spec.trainable()) continue;
    grads.of.push_back(std::move(weight_grads[li]));
    if (l.weight_normed()) grads.of.push_back(std::move(g_grads[li]));
    if (l.has_bias()) grads.of.push_back(std::move(bias_grads[li]));
    if (l.spec.norm_mode == NormMode::batch_norm) {
      grads.of.push_back(std::move(gamma_grads[li]));
      grads.of.push_back(std::move(beta_grads[li]));
    }
  }
  if (effective_weight_grads) {
    std::vector<Eigen::MatrixXd> packed;
    for (std::size_t li = 0; li < n_layers; ++li) {
      if (model.layers[li].spec.trainable()) packed.push_back(std::move((*effective_weight_grads)[li]));
    }
    *effective_weight_grads = std::move(packed);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Data-dependent initialization.

/// Single feedforward pass over the initialization minibatch: per trainable
/// layer computes the unit-direction pre-activation t = v.x/||v||, assigns
/// g <- 1/(sigma[t]+eps) and b <- -mu[t]/(sigma[t]+eps) (b stays 0 under the
/// mean-only modes, whose normalizer already centers), and feeds the
/// standardized activations to the next layer. Noise layers are skipped so
/// the fixed statistics describe the clean signal; running statistics are not
/// touched.
inline std::vector<InitReport> data_dependent_init(ModelState& model, const Tensor& x_batch,
                                                   double eps) {
  if (x_batch.dim(0) < 2) throw BatchSizeError("init: minibatch of at least 2 required");
  for (const Layer& l : model.layers) {
    if (l.spec.trainable() && !l.weight_normed()) {
      throw ContractError("init: every trainable layer must be weight-normalized");
    }
  }

  std::vector<InitReport> reports;
  Tensor cur = x_batch;
  for (Layer& l : model.layers) {
    const LayerSpec& s = l.spec;
    switch (s.kind) {
      case LayerSpec::Kind::dense: {
        const Eigen::MatrixXd x2d = detail::as_2d(cur);
        Eigen::VectorXd norms = l.weight.rowwise().norm();
        for (Index i = 0; i < norms.size(); ++i) {
          if (!(norms[i] > kMinDirectionNorm)) {
            throw DegenerateDirectionError("init: ||v|| is (near) zero");
          }
        }
        const Eigen::MatrixXd v_hat = l.weight.array().colwise() / norms.array();
        const Eigen::MatrixXd t_dir = x2d * v_hat.transpose();
        const Eigen::VectorXd mean = t_dir.colwise().mean().transpose();
        const Eigen::VectorXd std_dev =
            ((t_dir.rowwise() - mean.transpose()).array().square().colwise().sum() /
             double(t_dir.rows()))
                .sqrt()
                .transpose();
        const InitAssignment a = init_from_stats(mean, std_dev, eps);
        l.g = a.g;
        if (s.log_scale) l.log_s = a.g.array().log();
        if (s.norm_mode == NormMode::weight_norm) {
          l.bias = a.b;
        } else {
          l.bias.setZero();
        }
        const Eigen::MatrixXd t_post =
            (t_dir.rowwise() - mean.transpose()).array().rowwise() *
            a.g.transpose().array();
        InitReport rep;
        rep.g_init = a.g;
        rep.b_init = l.bias;
        rep.post_mean = t_post.colwise().mean().transpose();
        rep.post_std = ((t_post.rowwise() - rep.post_mean.transpose())
                            .array()
                            .square()
                            .colwise()
                            .sum() /
                        double(t_post.rows()))
                           .sqrt()
                           .transpose();
        reports.push_back(std::move(rep));
        cur = detail::tensor_from_2d(apply_activation(t_post, s.activation, s.leaky_slope));
        break;
      }
      case LayerSpec::Kind::conv2d: {
        if (cur.rank() != 4) throw DimensionError("init: conv needs rank-4 input");
        Eigen::VectorXd norms = l.weight.rowwise().norm();
        for (Index i = 0; i < norms.size(); ++i) {
          if (!(norms[i] > kMinDirectionNorm)) {
            throw DegenerateDirectionError("init: ||v|| is (near) zero");
          }
        }
        Layer unit = l;
        unit.weight = l.weight.array().colwise() / norms.array();
        const Tensor k_hat = detail::conv_kernel(unit, unit.weight);
        const Tensor t4 = conv2d(cur, k_hat, s.stride, s.pad);
        const Eigen::MatrixXd t_dir = nfhw_to_channel_matrix(t4);
        const Eigen::VectorXd mean = t_dir.colwise().mean().transpose();
        const Eigen::VectorXd std_dev =
            ((t_dir.rowwise() - mean.transpose()).array().square().colwise().sum() /
             double(t_dir.rows()))
                .sqrt()
                .transpose();
        const InitAssignment a = init_from_stats(mean, std_dev, eps);
        l.g = a.g;
        if (s.log_scale) l.log_s = a.g.array().log();
        if (s.norm_mode == NormMode::weight_norm) {
          l.bias = a.b;
        } else {
          l.bias.setZero();
        }
        const Eigen::MatrixXd t_post =
            (t_dir.rowwise() - mean.transpose()).array().rowwise() *
            a.g.transpose().array();
        InitReport rep;
        rep.g_init = a.g;
        rep.b_init = l.bias;
        rep.post_mean = t_post.colwise().mean().transpose();
        rep.post_std = ((t_post.rowwise() - rep.post_mean.transpose())
                            .array()
                            .square()
                            .colwise()
                            .sum() /
                        double(t_post.rows()))
                           .sqrt()
                           .transpose();
        reports.push_back(std::move(rep));
        const Eigen::MatrixXd y = apply_activation(t_post, s.activation, s.leaky_slope);
        cur = channel_matrix_to_nfhw(y, t4.shape());
        break;
      }
      case LayerSpec::Kind::activation: {
        const Eigen::MatrixXd z = detail::as_2d(cur);
        Tensor next(cur.shape());
        next.as_matrix(z.rows(), z.cols()) = apply_activation(z, s.activation, s.leaky_slope);
        cur = std::move(next);
        break;
      }
      case LayerSpec::Kind::pool:
        cur = s.pool == LayerSpec::Pool::max2x2 ? max_pool_2x2(cur).out : global_avg_pool(cur);
        break;
      case LayerSpec::Kind::noise:
        break;  // the init pass fixes statistics of the clean signal
    }
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Parameterization conversion.

/// Maps an initialized weight-normalized model onto one of the five
/// parameterizations, preserving the effective weights exactly so every mode
/// starts from identical w. Biases are kept where the mode has an affine
/// bias, reset to zero under the mean-only modes, and replaced by beta = 0
/// under batch normalization.
inline ModelState convert_model(const ModelState& src, NormMode target) {
  ModelState dst = src;
  for (Layer& l : dst.layers) {
    if (!l.spec.trainable()) continue;
    if (!l.weight_normed()) {
      throw ContractError("convert_model: source layers must be weight-normalized");
    }
    const auto [w_eff, norms] = l.effective_weight();
    l.spec.norm_mode = target;
    switch (target) {
      case NormMode::weight_norm:
        break;
      case NormMode::weight_norm_mean_only:
        l.bias.setZero();
        l.mbn = MeanOnlyBNState::create(l.units());
        break;
      case NormMode::standard:
        l.weight = w_eff;
        l.g.resize(0);
        l.log_s.resize(0);
        l.spec.log_scale = false;
        break;
      case NormMode::mean_only:
        l.weight = w_eff;
        l.g.resize(0);
        l.log_s.resize(0);
        l.spec.log_scale = false;
        l.bias.setZero();
        l.mbn = MeanOnlyBNState::create(l.units());
        break;
      case NormMode::batch_norm:
        l.weight = w_eff;
        l.g.resize(0);
        l.log_s.resize(0);
        l.spec.log_scale = false;
        l.bias.resize(0);
        l.bn = BatchNormState::create(l.units());
        break;
    }
  }
  return dst;
}

/// Mean over all output units of (effective ||w_row|| / stored ||row||, i.e.
/// |g|/||v|| under weight norm and exactly 1 otherwise) and of the stored row
/// norms; the per-epoch CSV columns g_over_v and v_norm.
struct WeightScaleStats {
  double g_over_v = 0.0;
  double v_norm = 0.0;
};

/// Must run after every optimizer step: re-derives g from the trained
/// log-scale parameters where that mode is active.
inline void post_update(ModelState& model) {
  for (Layer& l : model.layers) {
    if (l.spec.trainable()) l.sync_log_scale();
  }
}

inline WeightScaleStats weight_scale_stats(const ModelState& model) {
  WeightScaleStats st;
  Index count = 0;
  for (const Layer& l : model.layers) {
    if (!l.spec.trainable()) continue;
    const Eigen::VectorXd norms = l.weight.rowwise().norm();
    for (Index r = 0; r < norms.size(); ++r) {
      st.v_norm += norms[r];
      st.g_over_v += l.weight_normed() ? std::abs(l.g[r]) / norms[r] : 1.0;
      ++count;
    }
  }
  if (count > 0) {
    st.v_norm /= static_cast<double>(count);
    st.g_over_v /= static_cast<double>(count);
  }
  return st;
}

}  // namespace wn
