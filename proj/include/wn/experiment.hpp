#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "wn/analysis.hpp"
#include "wn/checkpoint.hpp"
#include "wn/dataset.hpp"
#include "wn/errors.hpp"
#include "wn/model.hpp"
#include "wn/optim.hpp"
#include "wn/tensor.hpp"

namespace wn {

// ---------------------------------------------------------------------------
// Deterministic number formatting for CSV output (shortest round-trip form).

inline std::string fmt_double(double v) {
  char buf[40];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general);
  return std::string(buf, p);
}

// ---------------------------------------------------------------------------
// Configuration.

struct DatasetConfig {
  enum class Type { synth, idx };
  Type type = Type::synth;

  // synth
  SynthSpec::Kind synth_kind = SynthSpec::Kind::blobs;
  Index n_train = 1000;
  Index n_test = 1000;
  Index d = 784;
  int classes = 10;
  double separation = 3.0;
  double noise_std = 1.0;

  // idx
  std::string train_images, train_labels, test_images, test_labels;
  Index subset_train = 0;  // 0 = all
  Index subset_test = 0;

  bool zca = false;
  double zca_eps = 1e-8;
};

struct ExperimentConfig {
  DatasetConfig data;
  std::string model_name = "mlp-784-128-10";
  std::vector<LayerSpec> custom_layers;  // used when model_name == "custom"
  NormMode norm_mode = NormMode::weight_norm;
  OptKind optimizer = OptKind::adam;
  double lr = 0.003;
  std::vector<double> lr_grid = {0.0003, 0.001, 0.003, 0.01};
  Index epochs = 30;
  Index batch_size = 100;
  std::uint64_t seed = 1;
  Index init_batch_size = 0;  // 0 -> batch_size
  double init_eps = 1e-8;
  bool schedule = true;
  double fixed_momentum = 0.9;  // used when schedule == false
  bool log_scale = false;
  bool ema = false;
  double ema_epochs = 10.0;
  std::string out;
};

// ---------------------------------------------------------------------------
// Named model configurations.

/// "mlp-<d0>-<d1>-...-<dk>": dense layers with relu hidden units and an
/// identity-activated output.
inline std::optional<std::vector<Index>> parse_mlp_name(const std::string& name) {
  if (name.rfind("mlp-", 0) != 0) return std::nullopt;
  std::vector<Index> dims;
  std::stringstream ss(name.substr(4));
  std::string part;
  while (std::getline(ss, part, '-')) {
    try {
      dims.push_back(static_cast<Index>(std::stol(part)));
    } catch (...) {
      return std::nullopt;
    }
  }
  if (dims.size() < 2) return std::nullopt;
  return dims;
}

inline std::vector<LayerSpec> make_model_layers(const ExperimentConfig& cfg) {
  std::vector<LayerSpec> specs;
  if (cfg.model_name == "custom") {
    specs = cfg.custom_layers;
  } else if (auto dims = parse_mlp_name(cfg.model_name)) {
    for (std::size_t i = 0; i + 1 < dims->size(); ++i) {
      const bool last = i + 2 == dims->size();
      specs.push_back(LayerSpec::dense((*dims)[i], (*dims)[i + 1],
                                       last ? Activation::identity : Activation::relu));
    }
  } else if (cfg.model_name == "conv-small") {
    specs = {
        LayerSpec::conv(1, 8, 3, 3, 1, 1, Activation::leaky_relu),
        LayerSpec::max_pool(),
        LayerSpec::conv(8, 16, 3, 3, 1, 1, Activation::leaky_relu),
        LayerSpec::global_avg_pool(),
        LayerSpec::dense(16, 10, Activation::identity),
    };
  } else if (cfg.model_name == "convpool-cnn-c") {
    // 3x32x32 input; the two dropout layers of the original recipe are
    // omitted, the Gaussian noise layer is kept. The third conv stack uses
    // valid padding (32 -> 16 -> 8 -> 6).
    specs = {
        LayerSpec::gaussian_noise(0.15),
        LayerSpec::conv(3, 96, 3, 3, 1, 1, Activation::leaky_relu),
        LayerSpec::conv(96, 96, 3, 3, 1, 1, Activation::leaky_relu),
        LayerSpec::conv(96, 96, 3, 3, 1, 1, Activation::leaky_relu),
        LayerSpec::max_pool(),
        LayerSpec::conv(96, 192, 3, 3, 1, 1, Activation::leaky_relu),
        LayerSpec::conv(192, 192, 3, 3, 1, 1, Activation::leaky_relu),
        LayerSpec::conv(192, 192, 3, 3, 1, 1, Activation::leaky_relu),
        LayerSpec::max_pool(),
        LayerSpec::conv(192, 192, 3, 3, 1, 0, Activation::leaky_relu),
        LayerSpec::conv(192, 192, 1, 1, 1, 0, Activation::leaky_relu),
        LayerSpec::conv(192, 192, 1, 1, 1, 0, Activation::leaky_relu),
        LayerSpec::global_avg_pool(),
        LayerSpec::dense(192, 10, Activation::identity),
    };
  } else {
    throw ConfigError("unknown model: " + cfg.model_name);
  }
  for (LayerSpec& s : specs) {
    if (s.trainable()) {
      s.norm_mode = cfg.norm_mode;
      s.log_scale = cfg.log_scale;
    }
  }
  return specs;
}

// ---------------------------------------------------------------------------
// JSON configuration file.

inline LayerSpec layer_spec_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "dense") {
    LayerSpec s = LayerSpec::dense(j.at("fan_in").get<Index>(), j.at("fan_out").get<Index>());
    if (j.contains("activation")) s.activation = activation_from_string(j["activation"]);
    if (j.contains("leaky_slope")) s.leaky_slope = j["leaky_slope"].get<double>();
    return s;
  }
  if (kind == "conv2d") {
    const Index k = j.contains("kernel") ? j["kernel"].get<Index>() : 3;
    LayerSpec s = LayerSpec::conv(j.at("in_channels").get<Index>(),
                                  j.at("out_channels").get<Index>(),
                                  j.value("kernel_h", k), j.value("kernel_w", k),
                                  j.value("stride", Index(1)), j.value("pad", Index(0)));
    if (j.contains("activation")) s.activation = activation_from_string(j["activation"]);
    if (j.contains("leaky_slope")) s.leaky_slope = j["leaky_slope"].get<double>();
    return s;
  }
  if (kind == "pool") {
    const std::string p = j.value("pool", "max2x2");
    if (p == "max2x2") return LayerSpec::max_pool();
    if (p == "global_avg") return LayerSpec::global_avg_pool();
    throw ConfigError("unknown pool kind: " + p);
  }
  if (kind == "noise") return LayerSpec::gaussian_noise(j.value("sigma", 0.0));
  if (kind == "activation") {
    LayerSpec s = LayerSpec::standalone_activation(
        activation_from_string(j.at("activation").get<std::string>()));
    if (j.contains("leaky_slope")) s.leaky_slope = j["leaky_slope"].get<double>();
    return s;
  }
  throw ConfigError("unknown layer kind: " + kind);
}

inline nlohmann::json layer_spec_to_json(const LayerSpec& s) {
  nlohmann::json j;
  switch (s.kind) {
    case LayerSpec::Kind::dense:
      j["kind"] = "dense";
      j["fan_in"] = s.fan_in;
      j["fan_out"] = s.fan_out;
      j["activation"] = to_string(s.activation);
      j["leaky_slope"] = s.leaky_slope;
      break;
    case LayerSpec::Kind::conv2d:
      j["kind"] = "conv2d";
      j["in_channels"] = s.in_channels;
      j["out_channels"] = s.out_channels;
      j["kernel_h"] = s.kernel_h;
      j["kernel_w"] = s.kernel_w;
      j["stride"] = s.stride;
      j["pad"] = s.pad;
      j["activation"] = to_string(s.activation);
      j["leaky_slope"] = s.leaky_slope;
      break;
    case LayerSpec::Kind::pool:
      j["kind"] = "pool";
      j["pool"] = s.pool == LayerSpec::Pool::max2x2 ? "max2x2" : "global_avg";
      break;
    case LayerSpec::Kind::noise:
      j["kind"] = "noise";
      j["sigma"] = s.noise_sigma;
      break;
    case LayerSpec::Kind::activation:
      j["kind"] = "activation";
      j["activation"] = to_string(s.activation);
      j["leaky_slope"] = s.leaky_slope;
      break;
  }
  return j;
}

inline void validate_config(const ExperimentConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("config: epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (cfg.lr_grid.empty()) throw ConfigError("config: lr grid must be non-empty");
  for (double lr : cfg.lr_grid) {
    if (!(lr > 0.0)) throw ConfigError("config: learning rates must be positive");
  }
  if (!(cfg.lr > 0.0)) throw ConfigError("config: lr must be positive");
  if (cfg.batch_size < 2 &&
      (cfg.norm_mode == NormMode::batch_norm || uses_mean_only(cfg.norm_mode))) {
    throw ConfigError("config: batch_size must be >= 2 for batch-statistics modes");
  }
  if (cfg.init_batch_size < 0) throw ConfigError("config: init_batch_size must be >= 0");
  if (!(cfg.init_eps >= 0.0)) throw ConfigError("config: init_eps must be >= 0");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  try {
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      const std::string type = d.value("type", "synth");
      if (type == "synth") {
        cfg.data.type = DatasetConfig::Type::synth;
        const std::string kind = d.value("kind", "blobs");
        if (kind == "blobs") {
          cfg.data.synth_kind = SynthSpec::Kind::blobs;
        } else if (kind == "radial") {
          cfg.data.synth_kind = SynthSpec::Kind::radial;
        } else {
          throw ConfigError("config: unknown synth kind " + kind);
        }
        cfg.data.n_train = d.value("n_train", cfg.data.n_train);
        cfg.data.n_test = d.value("n_test", cfg.data.n_test);
        cfg.data.d = d.value("d", cfg.data.d);
        cfg.data.classes = d.value("classes", cfg.data.classes);
        cfg.data.separation = d.value("separation", cfg.data.separation);
        cfg.data.noise_std = d.value("noise_std", cfg.data.noise_std);
      } else if (type == "idx") {
        cfg.data.type = DatasetConfig::Type::idx;
        cfg.data.train_images = d.at("train_images").get<std::string>();
        cfg.data.train_labels = d.at("train_labels").get<std::string>();
        cfg.data.test_images = d.at("test_images").get<std::string>();
        cfg.data.test_labels = d.at("test_labels").get<std::string>();
        cfg.data.subset_train = d.value("subset_train", Index(0));
        cfg.data.subset_test = d.value("subset_test", Index(0));
      } else {
        throw ConfigError("config: unknown dataset type " + type);
      }
      cfg.data.zca = d.value("zca", false);
      cfg.data.zca_eps = d.value("zca_eps", 1e-8);
    }
    if (j.contains("model")) {
      if (j["model"].is_string()) {
        cfg.model_name = j["model"].get<std::string>();
      } else {
        cfg.model_name = "custom";
        for (const auto& lj : j["model"].at("layers")) {
          cfg.custom_layers.push_back(layer_spec_from_json(lj));
        }
      }
    }
    if (j.contains("norm_mode")) cfg.norm_mode = norm_mode_from_string(j["norm_mode"]);
    if (j.contains("optimizer")) cfg.optimizer = opt_kind_from_string(j["optimizer"]);
    if (cfg.optimizer == OptKind::adamax) cfg.lr = 0.002;
    cfg.lr = j.value("lr", cfg.lr);
    if (j.contains("lr_grid")) cfg.lr_grid = j["lr_grid"].get<std::vector<double>>();
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.init_batch_size = j.value("init_batch_size", cfg.init_batch_size);
    cfg.init_eps = j.value("init_eps", cfg.init_eps);
    cfg.schedule = j.value("schedule", cfg.schedule);
    cfg.fixed_momentum = j.value("momentum", cfg.fixed_momentum);
    cfg.log_scale = j.value("log_scale", cfg.log_scale);
    cfg.ema = j.value("ema", cfg.ema);
    cfg.ema_epochs = j.value("ema_epochs", cfg.ema_epochs);
    cfg.out = j.value("out", cfg.out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate_config(cfg);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Data preparation.

struct PreparedData {
  Tensor train_x;  // already in the model's input layout (rank 2 or 4)
  std::vector<int> train_y;
  Tensor test_x;
  std::vector<int> test_y;
  int classes = 0;
};

namespace detail {

/// Reshape a flat [n, d] matrix to the rank the first model layer expects.
inline Tensor to_model_input(const Tensor& flat, const std::vector<LayerSpec>& specs) {
  const LayerSpec* first_conv = nullptr;
  for (const LayerSpec& s : specs) {
    if (s.kind == LayerSpec::Kind::dense) break;
    if (s.kind == LayerSpec::Kind::conv2d) {
      first_conv = &s;
      break;
    }
  }
  if (!first_conv) return flat;
  const Index n = flat.dim(0), d = flat.dim(1);
  const Index c = first_conv->in_channels;
  if (d % c != 0) throw ConfigError("data: feature count not divisible by input channels");
  const Index hw = d / c;
  const Index side = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(hw))));
  if (side * side != hw) throw ConfigError("data: features do not form square images");
  return flat.reshaped({n, c, side, side});
}

}  // namespace detail

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
  Dataset train, test;
  if (cfg.data.type == DatasetConfig::Type::synth) {
    // One draw covering train + test so both halves share the class means.
    SynthSpec spec;
    spec.kind = cfg.data.synth_kind;
    spec.d = cfg.data.d;
    spec.classes = cfg.data.classes;
    spec.separation = cfg.data.separation;
    spec.noise_std = cfg.data.noise_std;
    spec.n = cfg.data.n_train + cfg.data.n_test;
    const Dataset all = synth_dataset(cfg.seed, spec);
    train = all.subset(cfg.data.n_train);
    const Index row = all.images.size() / all.size();
    test.images = Tensor({cfg.data.n_test, cfg.data.d});
    test.images.flat() = all.images.flat().tail(cfg.data.n_test * row);
    test.labels.assign(all.labels.begin() + cfg.data.n_train, all.labels.end());
  } else {
    train = load_idx(cfg.data.train_images, cfg.data.train_labels);
    test = load_idx(cfg.data.test_images, cfg.data.test_labels);
    if (cfg.data.subset_train > 0) train = train.subset(cfg.data.subset_train);
    if (cfg.data.subset_test > 0) test = test.subset(cfg.data.subset_test);
  }

  Tensor train_flat = train.flattened();
  Tensor test_flat = test.flattened();
  if (cfg.data.zca) {
    auto z = zca_whiten(train_flat, cfg.data.zca_eps);
    train_flat = z.whitened;
    // Apply the train-set transform to the test set.
    Eigen::MatrixXd centered =
        test_flat.matrix().rowwise() - z.mean.flat().transpose();
    Tensor tw({test_flat.dim(0), test_flat.dim(1)});
    tw.matrix() = centered * z.transform.matrix();
    test_flat = std::move(tw);
  }

  const auto specs = make_model_layers(cfg);
  PreparedData p;
  p.train_x = detail::to_model_input(train_flat, specs);
  p.test_x = detail::to_model_input(test_flat, specs);
  p.train_y = train.labels;
  p.test_y = test.labels;
  int max_label = 0;
  for (int y : train.labels) max_label = std::max(max_label, y);
  for (int y : test.labels) max_label = std::max(max_label, y);
  p.classes = max_label + 1;
  return p;
}

/// Builds the weight-normalized prototype and applies the data-dependent
/// initializer on the first init-batch of training examples; every
/// parameterization starts from this one model so the effective weights are
/// identical across modes.
inline ModelState build_initialized_prototype(const ExperimentConfig& cfg,
                                              const PreparedData& data) {
  std::vector<LayerSpec> specs = make_model_layers(cfg);
  for (auto it = specs.rbegin(); it != specs.rend(); ++it) {
    if (!it->trainable()) continue;
    const Index width = it->kind == LayerSpec::Kind::dense ? it->fan_out : it->out_channels;
    if (width < data.classes) {
      throw ConfigError("config: model emits " + std::to_string(width) +
                        " classes but the data has " + std::to_string(data.classes));
    }
    break;
  }
  for (LayerSpec& s : specs) {
    if (s.trainable()) s.norm_mode = NormMode::weight_norm;
  }
  RngStream root(cfg.seed);
  ModelState proto = build_model(specs, root.split(0x6d6f64656cull));  // "model"

  const Index n_init =
      std::min<Index>(cfg.init_batch_size > 0 ? cfg.init_batch_size : cfg.batch_size,
                      data.train_x.dim(0));
  if (n_init < 2) throw ConfigError("config: init batch must have at least 2 examples");
  std::vector<Index> shape = data.train_x.shape();
  shape[0] = n_init;
  Tensor init_batch(shape);
  init_batch.flat() = data.train_x.flat().head(init_batch.size());
  data_dependent_init(proto, init_batch, cfg.init_eps);
  return proto;
}

// ---------------------------------------------------------------------------
// Training.

struct EpochRow {
  Index epoch = 0;
  double train_loss = 0.0;
  double train_error = 0.0;
  double test_error = 0.0;
  double g_over_v = 0.0;
  double v_norm = 0.0;
  double wall_seconds = 0.0;
};

struct RunRecord {
  std::string mode;
  double lr = 0.0;
  std::vector<EpochRow> rows;
  bool diverged = false;
  Index diverged_epoch = -1;
};

namespace detail {

inline Tensor gather_rows(const Tensor& x, const std::vector<Index>& idx, Index begin,
                          Index count) {
  std::vector<Index> shape = x.shape();
  shape[0] = count;
  const Index row_size = x.size() / x.dim(0);
  Tensor out(shape);
  for (Index i = 0; i < count; ++i) {
    const Index src = idx[static_cast<std::size_t>(begin + i)];
    out.flat().segment(i * row_size, row_size) = x.flat().segment(src * row_size, row_size);
  }
  return out;
}

inline Index count_wrong(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
  Index wrong = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (static_cast<int>(arg) != labels[static_cast<std::size_t>(i)]) ++wrong;
  }
  return wrong;
}

inline double evaluate_error(ModelState& model, const Tensor& x, const std::vector<int>& y,
                             Index eval_batch = 256) {
  const Index n = x.dim(0);
  const Index row_size = x.size() / n;
  Index wrong = 0;
  for (Index begin = 0; begin < n; begin += eval_batch) {
    const Index count = std::min(eval_batch, n - begin);
    std::vector<Index> shape = x.shape();
    shape[0] = count;
    Tensor xb(shape);
    xb.flat() = x.flat().segment(begin * row_size, count * row_size);
    ForwardResult fr = forward(model, xb, PassMode::eval);
    const Eigen::MatrixXd logits = fr.logits.matrix();
    for (Index i = 0; i < count; ++i) {
      Index arg = 0;
      logits.row(i).maxCoeff(&arg);
      if (static_cast<int>(arg) != y[static_cast<std::size_t>(begin + i)]) ++wrong;
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(n);
}

struct ShadowSwap {
  // Temporarily installs EMA shadow parameters for evaluation.
  ShadowSwap(std::vector<ParamRef>& params, const EmaState& ema) : params_(params) {
    if (!ema.initialized) return;
    saved_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      saved_.push_back(params[i].value);
      params[i].value = ema.shadow[i];
    }
  }
  ~ShadowSwap() {
    for (std::size_t i = 0; i < saved_.size(); ++i) params_[i].value = saved_[i];
  }
  std::vector<ParamRef>& params_;
  std::vector<Eigen::VectorXd> saved_;
};

}  // namespace detail

/// One training run of an already initialized and converted model, updated
/// in place. Batches are reshuffled every epoch from a per-run stream; full
/// batches only, the remainder reaches later epochs through the shuffle. A
/// non-finite loss stops the run and marks the record diverged.
inline RunRecord train_single(const ExperimentConfig& cfg, const PreparedData& data,
                              ModelState& model, NormMode mode, double lr,
                              NormTrace* trace = nullptr) {
  RunRecord rec;
  rec.mode = to_string(mode);
  rec.lr = lr;

  model.rng = RngStream(cfg.seed).split(0x6e6f697365ull);  // "noise"
  auto params = parameters(model);
  Optimizer opt(cfg.optimizer);
  RngStream shuffle_rng = RngStream(cfg.seed).split(0x73687566ull);  // "shuf"

  const Index n = data.train_x.dim(0);
  const Index batch = std::min<Index>(cfg.batch_size, n);
  const Index steps_per_epoch = n / batch;
  if (steps_per_epoch < 1) throw ConfigError("config: batch_size exceeds the training set");

  EmaState ema;
  ema.decay = ema_decay_for_epochs(cfg.ema_epochs, steps_per_epoch);

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  long global_step = 0;

  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const ScheduledRates rates = cfg.schedule ? lr_schedule(epoch, cfg.epochs, lr)
                                              : ScheduledRates{lr, cfg.fixed_momentum};
    // Fisher-Yates reshuffle, deterministic per (seed, epoch).
    for (Index i = n - 1; i > 0; --i) {
      const Index j = static_cast<Index>(shuffle_rng.next_below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }

    double loss_sum = 0.0;
    Index wrong = 0, seen = 0;
    for (Index step = 0; step < steps_per_epoch; ++step) {
      Tensor xb = detail::gather_rows(data.train_x, order, step * batch, batch);
      std::vector<int> yb(static_cast<std::size_t>(batch));
      for (Index i = 0; i < batch; ++i) {
        yb[static_cast<std::size_t>(i)] =
            data.train_y[static_cast<std::size_t>(order[static_cast<std::size_t>(step * batch + i)])];
      }

      try {
        ForwardResult fr = forward(model, xb, PassMode::train);
        XentResult xe = softmax_xent(fr.logits.matrix(), yb);
        if (!std::isfinite(xe.loss)) throw DivergenceError("non-finite loss");
        loss_sum += xe.loss;
        wrong += detail::count_wrong(fr.logits.matrix(), yb);
        seen += batch;

        Gradients grads = backward(model, fr.cache, Tensor::from_matrix(xe.grad_logits));
        std::vector<Eigen::MatrixXd> snapshot;
        if (trace) snapshot = snapshot_directions(model);
        opt.step(params, grads, rates.lr, rates.momentum);
        post_update(model);
        // every trainable tensor must stay finite after every update
        for (const auto& p : params) {
          if (!p.value.allFinite()) throw DivergenceError("non-finite parameters");
        }
        if (cfg.ema) ema_update(ema, params);
        ++global_step;
        if (trace) record_norm_trace(*trace, model, snapshot, global_step);
      } catch (const DivergenceError&) {
        rec.diverged = true;
        rec.diverged_epoch = epoch;
        return rec;
      } catch (const DegenerateDirectionError&) {
        // an exploded update can null a direction vector; same diagnosis
        rec.diverged = true;
        rec.diverged_epoch = epoch;
        return rec;
      }
    }

    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
    row.train_error = static_cast<double>(wrong) / static_cast<double>(seen);
    {
      // Test error is measured on the Polyak shadow when EMA is on.
      detail::ShadowSwap swap(params, cfg.ema ? ema : EmaState{});
      row.test_error = detail::evaluate_error(model, data.test_x, data.test_y);
    }
    const WeightScaleStats ws = weight_scale_stats(model);
    row.g_over_v = ws.g_over_v;
    row.v_norm = ws.v_norm;
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.rows.push_back(row);
  }
  return rec;
}

// ---------------------------------------------------------------------------
// CSV output.

inline constexpr const char* kCsvHeader =
    "mode,lr,epoch,train_loss,train_error,test_error,g_over_v,v_norm,wall_seconds";

inline std::string records_to_csv(const std::vector<RunRecord>& records) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const RunRecord& r : records) {
    for (const EpochRow& row : r.rows) {
      out += r.mode;
      out += ',';
      out += fmt_double(r.lr);
      out += ',';
      out += std::to_string(row.epoch);
      out += ',';
      out += fmt_double(row.train_loss);
      out += ',';
      out += fmt_double(row.train_error);
      out += ',';
      out += fmt_double(row.test_error);
      out += ',';
      out += fmt_double(row.g_over_v);
      out += ',';
      out += fmt_double(row.v_norm);
      out += ',';
      out += fmt_double(row.wall_seconds);
      out += '\n';
    }
  }
  return out;
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataError::Kind::length, "cannot write " + path);
  out << content;
}

/// First epoch whose training error is at or below the threshold; -1 if the
/// run never gets there.
inline Index epochs_to_error(const RunRecord& rec, double threshold) {
  for (const EpochRow& row : rec.rows) {
    if (row.train_error <= threshold) return row.epoch;
  }
  return -1;
}

inline bool loss_decreased(const RunRecord& rec) {
  return !rec.diverged && !rec.rows.empty() &&
         rec.rows.back().train_loss < rec.rows.front().train_loss;
}

inline std::string summary_to_csv(const std::vector<RunRecord>& records) {
  std::string out =
      "mode,best_lr,final_train_loss,final_train_error,final_test_error,epochs_to_5pct,"
      "ok_runs,diverged_runs\n";
  std::vector<std::string> modes;
  for (const RunRecord& r : records) {
    if (std::find(modes.begin(), modes.end(), r.mode) == modes.end()) modes.push_back(r.mode);
  }
  for (const std::string& mode : modes) {
    const RunRecord* best = nullptr;
    Index ok = 0, diverged = 0;
    for (const RunRecord& r : records) {
      if (r.mode != mode) continue;
      if (r.diverged || r.rows.empty()) {
        ++diverged;
        continue;
      }
      ++ok;
      if (!best || r.rows.back().train_loss < best->rows.back().train_loss) best = &r;
    }
    out += mode;
    out += ',';
    if (best) {
      out += fmt_double(best->lr);
      out += ',';
      out += fmt_double(best->rows.back().train_loss);
      out += ',';
      out += fmt_double(best->rows.back().train_error);
      out += ',';
      out += fmt_double(best->rows.back().test_error);
      out += ',';
      out += std::to_string(epochs_to_error(*best, 0.05));
    } else {
      out += ",,,,";
    }
    out += ',';
    out += std::to_string(ok);
    out += ',';
    out += std::to_string(diverged);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Top-level experiment entry points.

/// One (mode, lr) training run; writes the per-epoch CSV when cfg.out is set.
inline RunRecord run_experiment(const ExperimentConfig& cfg, NormTrace* trace = nullptr,
                                ModelState* trained = nullptr) {
  validate_config(cfg);
  const PreparedData data = prepare_data(cfg);
  const ModelState proto = build_initialized_prototype(cfg, data);
  ModelState model = convert_model(proto, cfg.norm_mode);
  RunRecord rec = train_single(cfg, data, model, cfg.norm_mode, cfg.lr, trace);
  if (!cfg.out.empty()) write_file(cfg.out, records_to_csv({rec}));
  if (trained) *trained = std::move(model);
  return rec;
}

struct CompareResult {
  std::vector<RunRecord> records;
};

inline constexpr NormMode kAllModes[] = {NormMode::standard, NormMode::batch_norm,
                                         NormMode::weight_norm,
                                         NormMode::weight_norm_mean_only, NormMode::mean_only};

/// The five-parameterization comparison: every mode crossed with every
/// learning rate in the grid, all starting from the same initialized
/// prototype. Diverged cells are recorded, not fatal. Writes the long-format
/// CSV to cfg.out and a per-mode summary to cfg.out + ".summary.csv".
inline CompareResult compare_parameterizations(const ExperimentConfig& cfg) {
  validate_config(cfg);
  const PreparedData data = prepare_data(cfg);
  const ModelState proto = build_initialized_prototype(cfg, data);

  CompareResult result;
  for (NormMode mode : kAllModes) {
    for (double lr : cfg.lr_grid) {
      ModelState model = convert_model(proto, mode);
      result.records.push_back(train_single(cfg, data, model, mode, lr));
    }
  }
  if (!cfg.out.empty()) {
    write_file(cfg.out, records_to_csv(result.records));
    write_file(cfg.out + ".summary.csv", summary_to_csv(result.records));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint-driven analysis.

inline nlohmann::json model_meta(const ExperimentConfig& cfg) {
  nlohmann::json meta;
  meta["norm_mode"] = to_string(cfg.norm_mode);
  meta["seed"] = cfg.seed;
  meta["log_scale"] = cfg.log_scale;
  meta["layers"] = nlohmann::json::array();
  for (const LayerSpec& s : make_model_layers(cfg)) {
    meta["layers"].push_back(layer_spec_to_json(s));
  }
  return meta;
}

/// Rebuilds the model a checkpoint describes and restores its tensors.
inline ModelState model_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("layers")) {
    throw DataError(DataError::Kind::format, "checkpoint: meta lacks a model description");
  }
  std::vector<LayerSpec> specs;
  for (const auto& lj : ck.meta["layers"]) specs.push_back(layer_spec_from_json(lj));
  const NormMode mode = norm_mode_from_string(ck.meta.value("norm_mode", "standard"));
  const bool log_scale = ck.meta.value("log_scale", false);
  for (LayerSpec& s : specs) {
    if (s.trainable()) {
      s.norm_mode = mode;
      s.log_scale = log_scale;
    }
  }
  ModelState model = build_model(specs, RngStream(0));
  restore_model(model, ck);
  return model;
}

struct AnalyzeRow {
  Index layer = 0;
  Index unit = 0;
  Index dim = 0;
  Index n_probe = 0;
  double alignment = 0.0;         // |cos(w, top eigenvector of C)|
  double lambda1_trace_frac = 0;  // top eigenvalue / trace(C)
  double annihilation = 0.0;      // ||D w|| / (||D||_F ||w||)
  double v_norm = 0.0;
  double g_over_v = 0.0;
};

/// Gradient-covariance instrumentation on a trained model: per probed unit,
/// the covariance C of the per-example effective-weight gradients, the
/// alignment of w with C's dominant eigenvector, and how thoroughly the
/// transformed covariance D annihilates w. Per-example gradients are exact
/// single-example backward passes, so only the batch-independent modes
/// (standard, weightnorm) are supported.
inline std::vector<AnalyzeRow> analyze_model(ModelState& model, const Tensor& x,
                                             const std::vector<int>& labels, Index probe_n,
                                             Index units_per_layer) {
  for (const Layer& l : model.layers) {
    if (l.spec.trainable() && (l.spec.norm_mode == NormMode::batch_norm ||
                               uses_mean_only(l.spec.norm_mode))) {
      throw ConfigError(
          "analyze: per-example gradients require the standard or weightnorm mode");
    }
  }
  const Index n = std::min<Index>({probe_n, x.dim(0), 256});
  if (n < 2) throw BatchSizeError("analyze: at least 2 probe examples required");
  const Index row_size = x.size() / x.dim(0);

  // Per-example effective-weight gradients, one backward pass per example.
  std::vector<std::vector<Eigen::MatrixXd>> grads_per_example;
  for (Index i = 0; i < n; ++i) {
    std::vector<Index> shape = x.shape();
    shape[0] = 1;
    Tensor xi(shape);
    xi.flat() = x.flat().segment(i * row_size, row_size);
    ForwardResult fr = forward(model, xi, PassMode::train);
    XentResult xe =
        softmax_xent(fr.logits.matrix(), {labels[static_cast<std::size_t>(i)]});
    std::vector<Eigen::MatrixXd> eff;
    backward(model, fr.cache, Tensor::from_matrix(xe.grad_logits), &eff);
    grads_per_example.push_back(std::move(eff));
  }

  std::vector<AnalyzeRow> rows;
  Index trainable_idx = 0;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    Layer& l = model.layers[li];
    if (!l.spec.trainable()) continue;
    const auto [w_eff, norms] = l.effective_weight();
    const Index n_units = std::min<Index>(units_per_layer, l.units());
    for (Index u = 0; u < n_units; ++u) {
      Eigen::MatrixXd per_example(n, l.fan_in());
      for (Index i = 0; i < n; ++i) {
        per_example.row(i) = grads_per_example[static_cast<std::size_t>(i)]
                                 [static_cast<std::size_t>(trainable_idx)]
                                     .row(u);
      }
      AnalyzeRow row;
      row.layer = static_cast<Index>(li);
      row.unit = u;
      row.dim = l.fan_in();
      row.n_probe = n;
      const GradCovariance cov = grad_covariance(per_example);
      const Eigen::VectorXd w_row = w_eff.row(u).transpose();
      if (cov.c.cwiseAbs().maxCoeff() > 0.0) {
        row.alignment = dominant_alignment(cov, w_row);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov.c);
        const double trace = cov.c.trace();
        row.lambda1_trace_frac = trace > 0.0 ? es.eigenvalues().maxCoeff() / trace : 0.0;
        WeightNormParam p{l.weight.row(u).transpose(),
                          l.weight_normed() ? l.g[u] : norms[u], std::nullopt};
        const Eigen::MatrixXd d = transformed_covariance(cov, p);
        const double dn = d.norm();
        row.annihilation = dn > 0.0 ? (d * w_row).norm() / (dn * w_row.norm()) : 0.0;
      }
      row.v_norm = norms[u];
      row.g_over_v = l.weight_normed() ? std::abs(l.g[u]) / norms[u] : 1.0;
      rows.push_back(row);
    }
    ++trainable_idx;
  }
  return rows;
}

inline std::string analyze_rows_to_csv(const std::vector<AnalyzeRow>& rows) {
  std::string out = "layer,unit,dim,n_probe,alignment,lambda1_trace_frac,annihilation,v_norm,g_over_v\n";
  for (const AnalyzeRow& r : rows) {
    out += std::to_string(r.layer) + ',' + std::to_string(r.unit) + ',' + std::to_string(r.dim) +
           ',' + std::to_string(r.n_probe) + ',' + fmt_double(r.alignment) + ',' +
           fmt_double(r.lambda1_trace_frac) + ',' + fmt_double(r.annihilation) + ',' +
           fmt_double(r.v_norm) + ',' + fmt_double(r.g_over_v) + '\n';
  }
  return out;
}

inline std::string norm_trace_to_csv(const NormTrace& trace) {
  std::string out = "step,layer,v_norm,g,g_over_v,rel_update\n";
  for (const auto& r : trace.rows) {
    out += std::to_string(r.step) + ',' + std::to_string(r.layer) + ',' + fmt_double(r.v_norm) +
           ',' + fmt_double(r.g) + ',' + fmt_double(r.g_over_v) + ',' + fmt_double(r.rel_update) +
           '\n';
  }
  return out;
}

}  // namespace wn
