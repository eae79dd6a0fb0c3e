#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "wn/errors.hpp"
#include "wn/numerics.hpp"
#include "wn/rng.hpp"
#include "wn/tensor.hpp"

namespace wn {

/// The five parameterizations under comparison: the standard one, full batch
/// normalization, weight normalization, weight normalization plus mean-only
/// batch normalization, and mean-only batch normalization alone.
enum class NormMode { standard, batch_norm, weight_norm, weight_norm_mean_only, mean_only };

inline bool uses_weight_norm(NormMode m) {
  return m == NormMode::weight_norm || m == NormMode::weight_norm_mean_only;
}
inline bool uses_mean_only(NormMode m) {
  return m == NormMode::mean_only || m == NormMode::weight_norm_mean_only;
}

inline std::string to_string(NormMode m) {
  switch (m) {
    case NormMode::standard: return "standard";
    case NormMode::batch_norm: return "batchnorm";
    case NormMode::weight_norm: return "weightnorm";
    case NormMode::weight_norm_mean_only: return "weightnorm_meanonly";
    case NormMode::mean_only: return "meanonly";
  }
  return "?";
}

inline NormMode norm_mode_from_string(const std::string& s) {
  if (s == "standard") return NormMode::standard;
  if (s == "batchnorm") return NormMode::batch_norm;
  if (s == "weightnorm") return NormMode::weight_norm;
  if (s == "weightnorm_meanonly") return NormMode::weight_norm_mean_only;
  if (s == "meanonly") return NormMode::mean_only;
  throw ConfigError("unknown norm mode: " + s);
}

enum class Activation { identity, relu, leaky_relu, softmax };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "leaky_relu") return Activation::leaky_relu;
  if (s == "softmax") return Activation::softmax;
  throw ConfigError("unknown activation: " + s);
}

/// Declarative layer description; a model is an ordered list of these.
struct LayerSpec {
  enum class Kind { dense, conv2d, activation, pool, noise };
  enum class Pool { max2x2, global_avg };

  Kind kind = Kind::dense;

  // dense
  Index fan_in = 0;
  Index fan_out = 0;

  // conv2d
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel_h = 0;
  Index kernel_w = 0;
  Index stride = 1;
  Index pad = 0;

  NormMode norm_mode = NormMode::standard;
  Activation activation = Activation::identity;
  double leaky_slope = 0.1;
  bool log_scale = false;

  Pool pool = Pool::max2x2;
  double noise_sigma = 0.0;

  bool trainable() const { return kind == Kind::dense || kind == Kind::conv2d; }

  static LayerSpec dense(Index fan_in, Index fan_out, Activation act = Activation::identity,
                         NormMode mode = NormMode::standard) {
    LayerSpec s;
    s.kind = Kind::dense;
    s.fan_in = fan_in;
    s.fan_out = fan_out;
    s.activation = act;
    s.norm_mode = mode;
    return s;
  }

  static LayerSpec conv(Index in_ch, Index out_ch, Index kh, Index kw, Index stride, Index pad,
                        Activation act = Activation::identity,
                        NormMode mode = NormMode::standard) {
    LayerSpec s;
    s.kind = Kind::conv2d;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.kernel_h = kh;
    s.kernel_w = kw;
    s.stride = stride;
    s.pad = pad;
    s.activation = act;
    s.norm_mode = mode;
    return s;
  }

  static LayerSpec max_pool() {
    LayerSpec s;
    s.kind = Kind::pool;
    s.pool = Pool::max2x2;
    return s;
  }

  static LayerSpec global_avg_pool() {
    LayerSpec s;
    s.kind = Kind::pool;
    s.pool = Pool::global_avg;
    return s;
  }

  static LayerSpec gaussian_noise(double sigma) {
    LayerSpec s;
    s.kind = Kind::noise;
    s.noise_sigma = sigma;
    return s;
  }

  static LayerSpec standalone_activation(Activation act, double slope = 0.1) {
    LayerSpec s;
    s.kind = Kind::activation;
    s.activation = act;
    s.leaky_slope = slope;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Activations. The subgradient at 0 takes the negative-side slope.

inline double leaky_relu_scalar(double x, double slope) { return x > 0.0 ? x : slope * x; }
inline double leaky_relu_grad_scalar(double x, double slope) { return x > 0.0 ? 1.0 : slope; }

template <typename Derived>
Eigen::MatrixXd leaky_relu(const Eigen::MatrixBase<Derived>& t, double slope) {
  return t.unaryExpr([slope](double x) { return leaky_relu_scalar(x, slope); });
}

template <typename Derived>
Eigen::MatrixXd relu(const Eigen::MatrixBase<Derived>& t) {
  return leaky_relu(t, 0.0);
}

/// Row-wise softmax with log-sum-exp stabilization.
inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
    p.row(i) = e / e.sum();
  }
  return p;
}

inline Eigen::MatrixXd apply_activation(const Eigen::MatrixXd& z, Activation act, double slope) {
  switch (act) {
    case Activation::identity: return z;
    case Activation::relu: return leaky_relu(z, 0.0);
    case Activation::leaky_relu: return leaky_relu(z, slope);
    case Activation::softmax: return softmax_rows(z);
  }
  throw ValueError("unknown activation");
}

/// dL/dz given dL/dy, the pre-activation z and (for softmax) the output y.
inline Eigen::MatrixXd activation_backward(const Eigen::MatrixXd& grad_y,
                                           const Eigen::MatrixXd& z, const Eigen::MatrixXd& y,
                                           Activation act, double slope) {
  switch (act) {
    case Activation::identity: return grad_y;
    case Activation::relu:
    case Activation::leaky_relu: {
      const double s = act == Activation::relu ? 0.0 : slope;
      return grad_y.array() *
             z.unaryExpr([s](double x) { return leaky_relu_grad_scalar(x, s); }).array();
    }
    case Activation::softmax: {
      // dz = y .* (dy - rowwise(dy . y))
      Eigen::MatrixXd out(z.rows(), z.cols());
      for (Index i = 0; i < z.rows(); ++i) {
        const double dot = grad_y.row(i).dot(y.row(i));
        out.row(i) = y.row(i).array() * (grad_y.row(i).array() - dot);
      }
      return out;
    }
  }
  throw ValueError("unknown activation");
}

// ---------------------------------------------------------------------------
// Loss.

struct XentResult {
  double loss = 0.0;
  Eigen::MatrixXd grad_logits;  // (softmax - onehot) / batch
};

/// Mean cross-entropy of row-wise softmax against integer labels, stabilized
/// with log-sum-exp.
inline XentResult softmax_xent(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
  const Index n = logits.rows(), k = logits.cols();
  if (static_cast<Index>(labels.size()) != n) {
    throw DimensionError("softmax_xent: label count does not match batch");
  }
  XentResult r;
  r.grad_logits.resize(n, k);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw ValueError("softmax_xent: label out of range");
    const double m = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
    const double z = e.sum();
    total += std::log(z) + m - logits(i, y);
    r.grad_logits.row(i) = e / z;
    r.grad_logits(i, y) -= 1.0;
  }
  r.loss = total / static_cast<double>(n);
  r.grad_logits /= static_cast<double>(n);
  return r;
}

// ---------------------------------------------------------------------------
// Gaussian noise layer.

/// Train mode adds i.i.d. N(0, sigma^2) and advances the stream; eval mode is
/// the identity and leaves the stream untouched.
inline Tensor gaussian_noise_layer(const Tensor& t, double sigma, RngStream& rng, bool train) {
  if (!(sigma >= 0.0)) throw ValueError("gaussian_noise_layer: sigma must be >= 0");
  if (!train || sigma == 0.0) return t;
  Tensor out = t;
  for (Index i = 0; i < out.size(); ++i) out.flat()[i] += sigma * rng.next_normal();
  return out;
}

// ---------------------------------------------------------------------------
// Pooling over [N, C, H, W] tensors.

struct MaxPoolResult {
  Tensor out;
  std::vector<Index> argmax;  // flat input offset feeding each output cell
};

inline MaxPoolResult max_pool_2x2(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("max_pool: rank-4 input required");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw DimensionError("max_pool: spatial extent below window");
  const Index ho = (h - 2) / 2 + 1, wo = (w - 2) / 2 + 1;
  MaxPoolResult r{Tensor({n, c, ho, wo}), {}};
  r.argmax.resize(static_cast<std::size_t>(r.out.size()));
  Index out_off = 0;
  for (Index in = 0; in < n; ++in) {
    for (Index ci = 0; ci < c; ++ci) {
      for (Index oy = 0; oy < ho; ++oy) {
        for (Index ox = 0; ox < wo; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          Index best_off = 0;
          for (Index dy = 0; dy < 2; ++dy) {
            for (Index dx = 0; dx < 2; ++dx) {
              const Index iy = oy * 2 + dy, ix = ox * 2 + dx;
              const Index off = ((in * c + ci) * h + iy) * w + ix;
              if (x.flat()[off] > best) {
                best = x.flat()[off];
                best_off = off;
              }
            }
          }
          r.out.flat()[out_off] = best;
          r.argmax[static_cast<std::size_t>(out_off)] = best_off;
          ++out_off;
        }
      }
    }
  }
  return r;
}

inline Tensor max_pool_2x2_backward(const Tensor& grad_out, const std::vector<Index>& argmax,
                                    const std::vector<Index>& input_shape) {
  Tensor grad_in(input_shape);
  for (Index i = 0; i < grad_out.size(); ++i) {
    grad_in.flat()[argmax[static_cast<std::size_t>(i)]] += grad_out.flat()[i];
  }
  return grad_in;
}

inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool: rank-4 input required");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  out.flat() = x.as_matrix(n * c, hw).rowwise().mean();  // flat offset is in*c + ci
  return out;
}

inline Tensor global_avg_pool_backward(const Tensor& grad_out,
                                       const std::vector<Index>& input_shape) {
  const Index n = input_shape[0], c = input_shape[1], h = input_shape[2], w = input_shape[3];
  Tensor grad_in(input_shape);
  const double scale = 1.0 / static_cast<double>(h * w);
  for (Index in = 0; in < n; ++in) {
    for (Index ci = 0; ci < c; ++ci) {
      grad_in.as_matrix(n * c, h * w).row(in * c + ci).setConstant(grad_out(in, ci) * scale);
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------
// Convolution backward passes (mirror the direct forward loops).

inline Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& kernel, Index stride,
                                    Index pad, const std::vector<Index>& input_shape) {
  const Index n = grad_out.dim(0), f = grad_out.dim(1), ho = grad_out.dim(2),
              wo = grad_out.dim(3);
  const Index c = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  const Index h = input_shape[2], w = input_shape[3];
  Tensor grad_in(input_shape);
  for (Index in = 0; in < n; ++in) {
    for (Index fo = 0; fo < f; ++fo) {
      for (Index oy = 0; oy < ho; ++oy) {
        for (Index ox = 0; ox < wo; ++ox) {
          const double go = grad_out(in, fo, oy, ox);
          if (go == 0.0) continue;
          for (Index ci = 0; ci < c; ++ci) {
            for (Index ky = 0; ky < kh; ++ky) {
              const Index iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (Index kx = 0; kx < kw; ++kx) {
                const Index ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= w) continue;
                grad_in(in, ci, iy, ix) += go * kernel(fo, ci, ky, kx);
              }
            }
          }
        }
      }
    }
  }
  return grad_in;
}

inline Tensor conv2d_backward_kernel(const Tensor& grad_out, const Tensor& x, Index stride,
                                     Index pad, const std::vector<Index>& kernel_shape) {
  const Index n = grad_out.dim(0), f = grad_out.dim(1), ho = grad_out.dim(2),
              wo = grad_out.dim(3);
  const Index c = kernel_shape[1], kh = kernel_shape[2], kw = kernel_shape[3];
  const Index h = x.dim(2), w = x.dim(3);
  Tensor grad_k(kernel_shape);
  for (Index in = 0; in < n; ++in) {
    for (Index fo = 0; fo < f; ++fo) {
      for (Index oy = 0; oy < ho; ++oy) {
        for (Index ox = 0; ox < wo; ++ox) {
          const double go = grad_out(in, fo, oy, ox);
          if (go == 0.0) continue;
          for (Index ci = 0; ci < c; ++ci) {
            for (Index ky = 0; ky < kh; ++ky) {
              const Index iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (Index kx = 0; kx < kw; ++kx) {
                const Index ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= w) continue;
                grad_k(fo, ci, ky, kx) += go * x(in, ci, iy, ix);
              }
            }
          }
        }
      }
    }
  }
  return grad_k;
}

// ---------------------------------------------------------------------------
// Layout helpers between [N, F, H, W] tensors and [N*H*W, F] matrices, the
// per-channel view the normalization statistics are taken over.

inline Eigen::MatrixXd nfhw_to_channel_matrix(const Tensor& t) {
  const Index n = t.dim(0), f = t.dim(1), h = t.dim(2), w = t.dim(3);
  Eigen::MatrixXd m(n * h * w, f);
  Index row = 0;
  for (Index in = 0; in < n; ++in) {
    for (Index iy = 0; iy < h; ++iy) {
      for (Index ix = 0; ix < w; ++ix) {
        for (Index fo = 0; fo < f; ++fo) m(row, fo) = t(in, fo, iy, ix);
        ++row;
      }
    }
  }
  return m;
}

inline Tensor channel_matrix_to_nfhw(const Eigen::MatrixXd& m, const std::vector<Index>& shape) {
  const Index n = shape[0], f = shape[1], h = shape[2], w = shape[3];
  Tensor t(shape);
  Index row = 0;
  for (Index in = 0; in < n; ++in) {
    for (Index iy = 0; iy < h; ++iy) {
      for (Index ix = 0; ix < w; ++ix) {
        for (Index fo = 0; fo < f; ++fo) t(in, fo, iy, ix) = m(row, fo);
        ++row;
      }
    }
  }
  return t;
}

}  // namespace wn
