#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "wn/errors.hpp"
#include "wn/numerics.hpp"
#include "wn/rng.hpp"
#include "wn/tensor.hpp"

namespace wn {

struct Dataset {
  Tensor images;  // [n, rows, cols] in [0,1], or [n, d] for synthetic data
  std::vector<int> labels;

  Index size() const { return images.dim(0); }

  /// [n, features] view for dense models.
  Tensor flattened() const {
    Index features = 1;
    for (Index d = 1; d < images.rank(); ++d) features *= images.dim(d);
    return images.reshaped({images.dim(0), features});
  }

  Dataset subset(Index n) const {
    if (n <= 0 || n > size()) throw ConfigError("dataset: invalid subset size");
    Index features = 1;
    for (Index d = 1; d < images.rank(); ++d) features *= images.dim(d);
    std::vector<Index> shape = images.shape();
    shape[0] = n;
    Tensor out(shape);
    out.flat() = images.flat().head(n * features);
    return Dataset{std::move(out), {labels.begin(), labels.begin() + n}};
  }
};

namespace detail {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

inline std::uint32_t read_u32_be(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw DataError(DataError::Kind::length, "idx: truncated file while reading " + what);
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

inline void write_u32_be(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

/// Parses the big-endian IDX container pair used by MNIST: images under magic
/// 0x00000803 with dims [n, rows, cols], labels under magic 0x00000801 with
/// dims [n]. Pixel bytes are scaled to [0, 1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw DataError(DataError::Kind::length, "idx: cannot open " + images_path);
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError(DataError::Kind::length, "idx: cannot open " + labels_path);

  const std::uint32_t img_magic = detail::read_u32_be(img, "image magic");
  if (img_magic != detail::kIdxImageMagic) {
    throw DataError(DataError::Kind::format, "idx: bad image magic in " + images_path);
  }
  const std::uint32_t n_images = detail::read_u32_be(img, "image count");
  const std::uint32_t rows = detail::read_u32_be(img, "row count");
  const std::uint32_t cols = detail::read_u32_be(img, "column count");

  const std::uint32_t lab_magic = detail::read_u32_be(lab, "label magic");
  if (lab_magic != detail::kIdxLabelMagic) {
    throw DataError(DataError::Kind::format, "idx: bad label magic in " + labels_path);
  }
  const std::uint32_t n_labels = detail::read_u32_be(lab, "label count");
  if (n_labels != n_images) {
    throw DataError(DataError::Kind::consistency,
                    "idx: image count " + std::to_string(n_images) + " != label count " +
                        std::to_string(n_labels));
  }
  if (n_images == 0 || rows == 0 || cols == 0) {
    throw DataError(DataError::Kind::format, "idx: empty dimensions");
  }

  Dataset ds;
  ds.images = Tensor({static_cast<Index>(n_images), static_cast<Index>(rows),
                      static_cast<Index>(cols)});
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n_images; ++i) {
    if (!img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
      throw DataError(DataError::Kind::length, "idx: truncated pixel data in " + images_path);
    }
    for (std::size_t p = 0; p < buf.size(); ++p) {
      ds.images.flat()[static_cast<Index>(i * buf.size() + p)] =
          static_cast<double>(buf[p]) / 255.0;
    }
  }
  ds.labels.resize(n_labels);
  for (std::uint32_t i = 0; i < n_labels; ++i) {
    unsigned char b;
    if (!lab.read(reinterpret_cast<char*>(&b), 1)) {
      throw DataError(DataError::Kind::length, "idx: truncated label data in " + labels_path);
    }
    ds.labels[i] = static_cast<int>(b);
  }
  return ds;
}

/// Writes an IDX pair; values are clamped to [0,1] and quantized to bytes.
inline void write_idx(const Dataset& ds, const std::string& images_path,
                      const std::string& labels_path) {
  if (ds.images.rank() != 3) throw DimensionError("write_idx: [n, rows, cols] tensor required");
  if (static_cast<Index>(ds.labels.size()) != ds.size()) {
    throw DimensionError("write_idx: label count mismatch");
  }
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw DataError(DataError::Kind::length, "idx: cannot write " + images_path);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError(DataError::Kind::length, "idx: cannot write " + labels_path);

  detail::write_u32_be(img, detail::kIdxImageMagic);
  detail::write_u32_be(img, static_cast<std::uint32_t>(ds.size()));
  detail::write_u32_be(img, static_cast<std::uint32_t>(ds.images.dim(1)));
  detail::write_u32_be(img, static_cast<std::uint32_t>(ds.images.dim(2)));
  for (Index i = 0; i < ds.images.size(); ++i) {
    const double v = std::min(1.0, std::max(0.0, ds.images.flat()[i]));
    const unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
    img.write(reinterpret_cast<const char*>(&b), 1);
  }
  detail::write_u32_be(lab, detail::kIdxLabelMagic);
  detail::write_u32_be(lab, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) {
    const unsigned char b = static_cast<unsigned char>(y);
    lab.write(reinterpret_cast<const char*>(&b), 1);
  }
}

/// Synthetic classification data, deterministic per seed.
///   blobs:  Gaussian clusters around fixed class means on a sphere of radius
///           `separation`.
///   radial: classes are concentric shells (not linearly separable); class k
///           lives at radius separation * (k + 1) with jitter noise_std.
struct SynthSpec {
  enum class Kind { blobs, radial };
  Kind kind = Kind::blobs;
  Index n = 0;
  Index d = 0;
  int classes = 2;
  double separation = 3.0;
  double noise_std = 1.0;
};

inline Dataset synth_dataset(std::uint64_t seed, const SynthSpec& spec) {
  if (spec.classes < 2 || spec.n < spec.classes || spec.d < 1) {
    throw ConfigError("synth_dataset: need n >= classes >= 2 and d >= 1");
  }
  RngStream rng(seed);
  Dataset ds;
  ds.images = Tensor({spec.n, spec.d});
  ds.labels.resize(static_cast<std::size_t>(spec.n));

  if (spec.kind == SynthSpec::Kind::blobs) {
    // Fixed class means: separation * (unit directions drawn once per class).
    Eigen::MatrixXd means(spec.classes, spec.d);
    for (int k = 0; k < spec.classes; ++k) {
      Eigen::VectorXd u(spec.d);
      for (Index j = 0; j < spec.d; ++j) u[j] = rng.next_normal();
      means.row(k) = spec.separation * u.normalized().transpose();
    }
    for (Index i = 0; i < spec.n; ++i) {
      const int y = static_cast<int>(i % spec.classes);
      ds.labels[static_cast<std::size_t>(i)] = y;
      for (Index j = 0; j < spec.d; ++j) {
        ds.images(i, j) = means(y, j) + spec.noise_std * rng.next_normal();
      }
    }
  } else {
    for (Index i = 0; i < spec.n; ++i) {
      const int y = static_cast<int>(i % spec.classes);
      ds.labels[static_cast<std::size_t>(i)] = y;
      Eigen::VectorXd u(spec.d);
      for (Index j = 0; j < spec.d; ++j) u[j] = rng.next_normal();
      u.normalize();
      const double radius = spec.separation * (y + 1) + spec.noise_std * rng.next_normal();
      for (Index j = 0; j < spec.d; ++j) ds.images(i, j) = radius * u[j];
    }
  }
  return ds;
}

}  // namespace wn
