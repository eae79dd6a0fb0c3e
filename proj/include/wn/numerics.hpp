#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "wn/errors.hpp"
#include "wn/rng.hpp"
#include "wn/tensor.hpp"

namespace wn {

/// c[i][j] = sum_l a[i][l] * b[l][j] for rank-2 tensors.
template <typename Scalar>
TensorT<Scalar> matmul(const TensorT<Scalar>& a, const TensorT<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul: rank-2 operands required");
  }
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree (" +
                         TensorT<Scalar>::shape_string(a.shape()) + " vs " +
                         TensorT<Scalar>::shape_string(b.shape()) + ")");
  }
  TensorT<Scalar> c({a.dim(0), b.dim(1)});
  c.matrix().noalias() = a.matrix() * b.matrix();
  return c;
}

/// Strided cross-correlation (no kernel flip) of x[N,C,H,W] with k[F,C,kh,kw]
/// under zero padding. Output extent along each spatial axis is
/// (in + 2*pad - kernel) / stride + 1 with floor division.
template <typename Scalar>
TensorT<Scalar> conv2d(const TensorT<Scalar>& x, const TensorT<Scalar>& k, Index stride,
                       Index pad) {
  if (x.rank() != 4 || k.rank() != 4) throw DimensionError("conv2d: rank-4 operands required");
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (pad < 0) throw DimensionError("conv2d: negative padding");
  if (x.dim(1) != k.dim(1)) throw DimensionError("conv2d: channel counts disagree");

  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const Index ho = (h + 2 * pad - kh) / stride + 1;
  const Index wo = (w + 2 * pad - kw) / stride + 1;
  if (kh > h + 2 * pad || kw > w + 2 * pad || ho <= 0 || wo <= 0) {
    throw DimensionError("conv2d: kernel does not fit the padded input");
  }

  TensorT<Scalar> out({n, f, ho, wo});
  for (Index in = 0; in < n; ++in) {
    for (Index fo = 0; fo < f; ++fo) {
      for (Index oy = 0; oy < ho; ++oy) {
        for (Index ox = 0; ox < wo; ++ox) {
          Scalar acc = 0;
          for (Index ci = 0; ci < c; ++ci) {
            for (Index ky = 0; ky < kh; ++ky) {
              const Index iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (Index kx = 0; kx < kw; ++kx) {
                const Index ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= w) continue;
                acc += x(in, ci, iy, ix) * k(fo, ci, ky, kx);
              }
            }
          }
          out(in, fo, oy, ox) = acc;
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
struct MeanStd {
  TensorT<Scalar> mean;
  TensorT<Scalar> std;  // population convention (divide by n)
};

/// Per-remaining-index mean and population standard deviation over the given
/// reduction axes.
template <typename Scalar>
MeanStd<Scalar> mean_std(const TensorT<Scalar>& t, const std::vector<Index>& axes) {
  if (axes.empty()) throw DimensionError("mean_std: empty reduction axis list");
  std::vector<bool> reduced(static_cast<std::size_t>(t.rank()), false);
  for (Index a : axes) {
    if (a < 0 || a >= t.rank()) throw DimensionError("mean_std: axis out of range");
    if (reduced[static_cast<std::size_t>(a)]) throw DimensionError("mean_std: duplicate axis");
    reduced[static_cast<std::size_t>(a)] = true;
  }

  std::vector<Index> out_shape;
  for (Index d = 0; d < t.rank(); ++d) {
    if (!reduced[static_cast<std::size_t>(d)]) out_shape.push_back(t.dim(d));
  }
  if (out_shape.empty()) out_shape.push_back(1);  // full reduction yields a scalar tensor

  // Map each flat input offset to the flat offset of its reduction cell.
  const Index n_in = t.size();
  std::vector<Index> cell(static_cast<std::size_t>(n_in));
  {
    std::vector<Index> idx(static_cast<std::size_t>(t.rank()), 0);
    for (Index off = 0; off < n_in; ++off) {
      Index out_off = 0;
      for (Index d = 0; d < t.rank(); ++d) {
        if (!reduced[static_cast<std::size_t>(d)]) {
          out_off = out_off * t.dim(d) + idx[static_cast<std::size_t>(d)];
        }
      }
      cell[static_cast<std::size_t>(off)] = out_off;
      for (Index d = t.rank() - 1; d >= 0; --d) {
        auto& i = idx[static_cast<std::size_t>(d)];
        if (++i < t.dim(d)) break;
        i = 0;
      }
    }
  }

  TensorT<Scalar> mean(out_shape), std_dev(out_shape);
  VectorX<Scalar> count = VectorX<Scalar>::Zero(mean.size());
  for (Index off = 0; off < n_in; ++off) {
    mean.flat()[cell[static_cast<std::size_t>(off)]] += t.flat()[off];
    count[cell[static_cast<std::size_t>(off)]] += Scalar(1);
  }
  mean.flat().array() /= count.array();
  for (Index off = 0; off < n_in; ++off) {
    const Scalar d = t.flat()[off] - mean.flat()[cell[static_cast<std::size_t>(off)]];
    std_dev.flat()[cell[static_cast<std::size_t>(off)]] += d * d;
  }
  std_dev.flat().array() = (std_dev.flat().array() / count.array()).sqrt();
  return {std::move(mean), std::move(std_dev)};
}

template <typename Scalar>
struct ZcaResult {
  TensorT<Scalar> whitened;   // (x - mean) * transform
  TensorT<Scalar> transform;  // d x d, symmetric
  TensorT<Scalar> mean;       // length d
};

/// ZCA whitening of the rows of x[n,d]: the transform is
/// U diag(1/sqrt(lambda + eps)) U^T from the eigendecomposition of the
/// population covariance, so the whitened data has zero empirical mean and
/// covariance ~= I while staying close to the original basis.
template <typename Scalar>
ZcaResult<Scalar> zca_whiten(const TensorT<Scalar>& x, Scalar eps) {
  if (x.rank() != 2) throw DimensionError("zca_whiten: rank-2 input required");
  if (!(eps >= Scalar(0))) throw ValueError("zca_whiten: eps must be >= 0");
  if (!x.all_finite()) throw ValueError("zca_whiten: non-finite input");

  const Index n = x.dim(0), d = x.dim(1);
  const VectorX<Scalar> mean = x.matrix().colwise().mean().transpose();
  MatrixX<Scalar> centered = x.matrix().rowwise() - mean.transpose();
  MatrixX<Scalar> cov = (centered.transpose() * centered) / Scalar(n);

  Eigen::SelfAdjointEigenSolver<MatrixX<Scalar>> es(cov);
  if (es.info() != Eigen::Success) throw ValueError("zca_whiten: eigendecomposition failed");
  VectorX<Scalar> lambda = es.eigenvalues().cwiseMax(Scalar(0));
  VectorX<Scalar> inv_sqrt = (lambda.array() + eps).rsqrt();
  MatrixX<Scalar> transform =
      es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();

  ZcaResult<Scalar> r{TensorT<Scalar>({n, d}), TensorT<Scalar>::from_matrix(transform),
                      TensorT<Scalar>::from_vector(mean)};
  r.whitened.matrix().noalias() = centered * transform;
  return r;
}

/// Tensor of i.i.d. Gaussian draws; advances the stream by exactly
/// 2 * product(shape) uniforms.
template <typename Scalar = double>
TensorT<Scalar> sample_normal(RngStream& rng, std::vector<Index> shape, Scalar mean,
                              Scalar std_dev) {
  if (!(std_dev >= Scalar(0))) throw ValueError("sample_normal: std must be >= 0");
  TensorT<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) {
    t.flat()[i] = mean + std_dev * static_cast<Scalar>(rng.next_normal());
  }
  return t;
}

}  // namespace wn
