// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Criteria 9 and 10 run on the MNIST-1000 subset when IDX
// files are present under $WN_MNIST_DIR (train-images-idx3-ubyte etc.); in a
// hermetic environment they run on the documented synthetic stand-in task
// through the same pipeline.

#include <sys/stat.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oracles.hpp"
#include "wn/analysis.hpp"
#include "wn/experiment.hpp"
#include "wn/gradcheck.hpp"
#include "wn/model.hpp"
#include "wn/optim.hpp"
#include "wn/weight_norm.hpp"

using namespace wn;

namespace {

struct Criterion {
  int id;
  std::string name;
  std::function<bool(std::string&)> run;
};

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool file_exists(const std::string& path) {
  struct stat st{};
  return ::stat(path.c_str(), &st) == 0;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// 1. grad_v (direct form) == grad_v_projected (projected form)

bool criterion_gradient_identity(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  RngStream rng(20160601);
  double worst = 0.0;
  int checked = 0;
  while (checked < 1000) {
    const Index n = 2 + static_cast<Index>(rng.next_below(63));
    WeightNormParam p;
    p.v = oracle::random_vector(rng, n);
    if (p.v.norm() < 1e-6) continue;
    p.g = 2.0 * rng.next_normal();
    const Eigen::VectorXd gw = oracle::random_vector(rng, n);
    const Eigen::VectorXd a = grad_v(gw, p);
    const Eigen::VectorXd b = grad_v_projected(gw, p);
    worst = std::max(worst, (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12}));
    ++checked;
  }
  const double secs = seconds_since(t0);
  detail = "max rel " + fmt(worst) + " over 1000 triples, " + fmt(secs) + " s";
  return worst <= 1e-10 && secs < 1.0;
}

// 2. ||compose_weight(v, g).w|| == |g|

bool criterion_norm_contract(std::string& detail) {
  RngStream rng(20160602);
  double worst = 0.0;
  int checked = 0;
  while (checked < 1000) {
    const Index n = 2 + static_cast<Index>(rng.next_below(63));
    WeightNormParam p;
    p.v = oracle::random_vector(rng, n);
    if (p.v.norm() < 1e-6) continue;
    p.g = 3.0 * rng.next_normal();
    const auto cw = compose_weight(p);
    worst = std::max(worst,
                     std::abs(cw.w.norm() - std::abs(p.g)) / std::max(1.0, std::abs(p.g)));
    ++checked;
  }
  detail = "max |(||w|| - |g|)| (relative) " + fmt(worst);
  return worst <= 1e-12;
}

// 3. full-network finite differences, all five parameterizations

bool criterion_fd_suite(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  double worst = 0.0, worst_frac = 1.0;
  for (const GradCheckResult& r : gradcheck_all(1234, 8)) {
    ok = ok && r.passed(0.99, 1e-4);
    worst = std::max(worst, r.max_err);
    worst_frac = std::min(worst_frac, r.frac_within_tol);
  }
  const double secs = seconds_since(t0);
  detail = "worst rel " + fmt(worst) + ", min within-1e-5 fraction " + fmt(worst_frac) +
           ", " + fmt(secs) + " s";
  return ok && secs < 60.0;
}

// 4. plain SGD on a weight-normalized layer: orthogonal updates, monotone
//    norm growth matching sqrt(1 + c^2)

bool criterion_norm_growth(std::string& detail) {
  ModelState m = build_model({LayerSpec::dense(12, 1, Activation::identity,
                                               NormMode::weight_norm)},
                             RngStream(20160604));
  RngStream rng(77);
  Tensor x({32, 12});
  x.flat() = oracle::random_vector(rng, x.size());
  data_dependent_init(m, x, 1e-8);
  const Eigen::VectorXd targets = oracle::random_vector(rng, 32);
  auto params = parameters(m);

  double worst_dot = 0.0, worst_growth = 0.0;
  double prev_norm = m.layers[0].weight.row(0).norm();
  for (int step = 0; step < 100; ++step) {
    const Eigen::VectorXd v_before = m.layers[0].weight.row(0).transpose();
    ForwardResult fr = forward(m, x, PassMode::train);
    Tensor gl({32, 1});
    gl.flat() = (fr.logits.flat() - targets) / 32.0;
    Gradients g = backward(m, fr.cache, gl);
    sgd_step(params, g, 0.05);
    const Eigen::VectorXd v_after = m.layers[0].weight.row(0).transpose();
    const Eigen::VectorXd dv = v_after - v_before;

    if (dv.norm() > 0.0) {
      worst_dot = std::max(worst_dot, std::abs(dv.dot(v_before)) / (dv.norm() * v_before.norm()));
      const double predicted = norm_growth_factor(dv, v_before);
      worst_growth = std::max(
          worst_growth, std::abs(v_after.norm() / prev_norm - predicted) / predicted);
    }
    if (v_after.norm() < prev_norm * (1.0 - 1e-12)) {
      detail = "||v|| decreased at step " + std::to_string(step);
      return false;
    }
    prev_norm = v_after.norm();
  }
  detail = "max |dv.v|/(||dv|| ||v||) " + fmt(worst_dot) + ", max growth mismatch " +
           fmt(worst_growth);
  return worst_dot <= 1e-10 && worst_growth <= 1e-10;
}

// 5. on a self-whitened minibatch, batch normalization of t = v.x equals the
//    weight-normalized pre-activation with g = 1, b = 0

bool criterion_bn_wn_equivalence(std::string& detail) {
  RngStream rng(20160605);
  const Index n = 256, d = 8, units = 32;
  Tensor x({n, d});
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) {
      x(i, j) = rng.next_normal() * (1.0 + 0.2 * static_cast<double>(j)) +
                (j > 0 ? 0.4 * x(i, j - 1) : 0.0);
    }
  }
  const auto z = zca_whiten(x, 1e-12);  // whitened against its own statistics
  const Eigen::MatrixXd xw = z.whitened.matrix();

  Eigen::MatrixXd v_dirs = oracle::random_matrix(rng, units, d);
  Eigen::MatrixXd t(n, units);
  Eigen::MatrixXd wn_out(n, units);
  double worst_mu = 0.0, worst_sigma = 0.0;
  for (Index u = 0; u < units; ++u) {
    const Eigen::VectorXd v = v_dirs.row(u).transpose();
    t.col(u) = xw * v;
    std::vector<double> col(t.col(u).data(), t.col(u).data() + n);
    const auto [mu, sigma] = oracle::mean_std(col);
    worst_mu = std::max(worst_mu, std::abs(mu));
    worst_sigma = std::max(worst_sigma, std::abs(sigma - v.norm()) / v.norm());
    // weight-normalized pre-activation with g = 1, b = 0
    wn_out.col(u) = xw * (v / v.norm());
  }

  // batch normalization with gamma = 1, beta = 0 on the eps = 0 path
  BatchNormState st = BatchNormState::create(units, 0.9, 0.0);
  const Eigen::MatrixXd bn_out = batchnorm_forward(t, st, PassMode::train);
  const double worst_eq = (bn_out - wn_out).cwiseAbs().maxCoeff();

  detail = "max |mu[t]| " + fmt(worst_mu) + ", max rel |sigma[t] - ||v||| " + fmt(worst_sigma) +
           ", max |BN - WN| " + fmt(worst_eq);
  return worst_mu <= 1e-8 && worst_sigma <= 1e-8 && worst_eq <= 1e-8;
}

// 6. meanonly_backward output columns have exactly zero mean

bool criterion_meanonly_centering(std::string& detail) {
  RngStream rng(20160606);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.next_below(255));
    const Index f = 1 + static_cast<Index>(rng.next_below(64));
    const Eigen::MatrixXd g = oracle::random_matrix(rng, n, f, 2.0);
    const auto r = meanonly_backward(g);
    worst = std::max(worst, r.grad_t.colwise().mean().cwiseAbs().maxCoeff());
  }
  detail = "max |column mean| " + fmt(worst);
  return worst <= 1e-12;
}

// 7. data-dependent init standardizes a 4-layer MLP on a batch of 100

bool criterion_data_dependent_init(std::string& detail) {
  std::vector<LayerSpec> specs = {
      LayerSpec::dense(120, 64, Activation::relu, NormMode::weight_norm),
      LayerSpec::dense(64, 48, Activation::relu, NormMode::weight_norm),
      LayerSpec::dense(48, 32, Activation::relu, NormMode::weight_norm),
      LayerSpec::dense(32, 10, Activation::identity, NormMode::weight_norm),
  };
  ModelState m = build_model(specs, RngStream(20160607));
  RngStream rng(9);
  Tensor x({100, 120});
  x.flat() = oracle::random_vector(rng, x.size());
  data_dependent_init(m, x, 1e-8);

  // measure through the real forward pass
  ForwardResult fr = forward(m, x, PassMode::train);
  double worst_mean = 0.0, worst_std = 0.0;
  for (std::size_t li = 0; li < specs.size(); ++li) {
    const Eigen::MatrixXd& zc = fr.cache.layers[li].z;
    for (Index j = 0; j < zc.cols(); ++j) {
      std::vector<double> col(zc.col(j).data(), zc.col(j).data() + zc.rows());
      const auto [mu, sd] = oracle::mean_std(col);
      worst_mean = std::max(worst_mean, std::abs(mu));
      worst_std = std::max(worst_std, std::abs(sd - 1.0));
    }
  }
  detail = "max |mean| " + fmt(worst_mean) + ", max |std - 1| " + fmt(worst_std) +
           " across 4 layers";
  return worst_mean <= 1e-8 && worst_std <= 1e-6;
}

// 8. transformed covariance D annihilates w and stays symmetric PSD

bool criterion_covariance_projection(std::string& detail) {
  RngStream rng(20160608);
  double worst_annih = 0.0, worst_asym = 0.0, worst_eig = 0.0;
  int checked = 0;
  while (checked < 100) {
    const Index k = 2 + static_cast<Index>(rng.next_below(15));
    GradCovariance c{oracle::random_psd(rng, k, 1.5), 32};
    WeightNormParam p;
    p.v = oracle::random_vector(rng, k);
    if (p.v.norm() < 1e-6) continue;
    p.g = 1.0 + rng.next_uniform();
    const Eigen::MatrixXd d = transformed_covariance(c, p);
    const Eigen::VectorXd w = compose_weight(p).w;
    const double dn = d.norm();
    if (dn > 0.0) {
      worst_annih = std::max(worst_annih, (d * w).norm() / (dn * w.norm()));
      worst_asym =
          std::max(worst_asym, (d - d.transpose()).cwiseAbs().maxCoeff() /
                                   std::max(1e-300, d.cwiseAbs().maxCoeff()));
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(d);
    worst_eig = std::max(worst_eig, -es.eigenvalues().minCoeff());
    ++checked;
  }
  detail = "max ||Dw||/(||D|| ||w||) " + fmt(worst_annih) + ", max asymmetry " +
           fmt(worst_asym) + ", min eigenvalue >= -" + fmt(worst_eig);
  return worst_annih <= 1e-12 && worst_asym <= 1e-12 && worst_eig <= 1e-10;
}

// 9 & 10. the desk-scale comparison runs (weight norm vs standard)

struct ComparisonOutcome {
  int wn_at_most_std = 0;   // seeds where wn reaches 5% at most as late
  int wn_robust = 0;        // seeds where wn has >= as many healthy runs
  int seeds = 0;
  double secs = 0.0;
  std::string flavor;
};

ExperimentConfig comparison_config(std::uint64_t seed) {
  ExperimentConfig cfg;
  const char* dir = std::getenv("WN_MNIST_DIR");
  const std::string base = dir ? dir : "";
  if (!base.empty() && file_exists(base + "/train-images-idx3-ubyte") &&
      file_exists(base + "/train-labels-idx1-ubyte") &&
      file_exists(base + "/t10k-images-idx3-ubyte") &&
      file_exists(base + "/t10k-labels-idx1-ubyte")) {
    cfg.data.type = DatasetConfig::Type::idx;
    cfg.data.train_images = base + "/train-images-idx3-ubyte";
    cfg.data.train_labels = base + "/train-labels-idx1-ubyte";
    cfg.data.test_images = base + "/t10k-images-idx3-ubyte";
    cfg.data.test_labels = base + "/t10k-labels-idx1-ubyte";
    cfg.data.subset_train = 1000;
    cfg.data.subset_test = 1000;
  } else {
    cfg.data.type = DatasetConfig::Type::synth;
    cfg.data.synth_kind = SynthSpec::Kind::radial;
    cfg.data.n_train = 1000;
    cfg.data.n_test = 1000;
    cfg.data.d = 784;
    cfg.data.classes = 10;
    cfg.data.separation = 1.0;
    cfg.data.noise_std = 0.5;
  }
  cfg.model_name = "mlp-784-128-10";
  cfg.optimizer = OptKind::adam;
  cfg.lr_grid = {0.0003, 0.001, 0.003, 0.01};
  cfg.epochs = 30;
  cfg.batch_size = 100;
  cfg.schedule = true;
  cfg.seed = seed;
  return cfg;
}

// best run of a mode: fewest epochs to 5% training error, ties broken by
// final training error then by lower lr
const RunRecord* best_run(const std::vector<RunRecord>& records, const std::string& mode) {
  const RunRecord* best = nullptr;
  auto key = [](const RunRecord& r) {
    const Index e = epochs_to_error(r, 0.05);
    const double final_err = r.rows.empty() ? 1e9 : r.rows.back().train_error;
    return std::make_tuple(e < 0 ? std::numeric_limits<Index>::max() : e, final_err, r.lr);
  };
  for (const RunRecord& r : records) {
    if (r.mode != mode || r.diverged || r.rows.empty()) continue;
    if (!best || key(r) < key(*best)) best = &r;
  }
  return best;
}

ComparisonOutcome run_comparison() {
  ComparisonOutcome out;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    ExperimentConfig cfg = comparison_config(seed);
    out.flavor = cfg.data.type == DatasetConfig::Type::idx ? "mnist-1000" : "synthetic radial";
    const PreparedData data = prepare_data(cfg);
    const ModelState proto = build_initialized_prototype(cfg, data);

    std::vector<RunRecord> records;
    int healthy_std = 0, healthy_wn = 0;
    for (NormMode mode : {NormMode::standard, NormMode::weight_norm}) {
      for (double lr : cfg.lr_grid) {
        ModelState model = convert_model(proto, mode);
        RunRecord rec = train_single(cfg, data, model, mode, lr);
        if (loss_decreased(rec)) {
          (mode == NormMode::standard ? healthy_std : healthy_wn)++;
        }
        records.push_back(std::move(rec));
      }
    }
    const RunRecord* best_std = best_run(records, "standard");
    const RunRecord* best_wn = best_run(records, "weightnorm");
    const Index e_std = best_std ? epochs_to_error(*best_std, 0.05) : -1;
    const Index e_wn = best_wn ? epochs_to_error(*best_wn, 0.05) : -1;
    const bool wn_ok = e_wn >= 0 && (e_std < 0 || e_wn <= e_std);
    if (wn_ok) ++out.wn_at_most_std;
    if (healthy_wn >= healthy_std) ++out.wn_robust;
    ++out.seeds;
    std::cout << "       seed " << seed << ": weightnorm to-5% epoch "
              << (e_wn < 0 ? std::string("never") : std::to_string(e_wn)) << " (lr "
              << (best_wn ? fmt_double(best_wn->lr) : "-") << "), standard "
              << (e_std < 0 ? std::string("never") : std::to_string(e_std)) << " (lr "
              << (best_std ? fmt_double(best_std->lr) : "-") << "); healthy runs "
              << healthy_wn << " vs " << healthy_std << "\n";
  }
  out.secs = seconds_since(t0);
  return out;
}

// 11. compare determinism: identical config and seed give identical CSV
//     bytes outside the wall_seconds column

std::string strip_wall(const std::string& csv) {
  std::string out;
  std::stringstream ss(csv);
  std::string line;
  while (std::getline(ss, line)) {
    out += line.substr(0, line.rfind(','));
    out += '\n';
  }
  return out;
}

bool criterion_determinism(std::string& detail) {
  ExperimentConfig cfg;
  cfg.data.type = DatasetConfig::Type::synth;
  cfg.data.n_train = 200;
  cfg.data.n_test = 100;
  cfg.data.d = 16;
  cfg.data.classes = 4;
  cfg.model_name = "mlp-16-12-4";
  cfg.lr_grid = {0.003, 0.01};
  cfg.epochs = 3;
  cfg.batch_size = 20;
  cfg.seed = 5;
  cfg.out = "/tmp/wn_acceptance_cmp_a.csv";
  compare_parameterizations(cfg);
  std::ifstream fa(cfg.out);
  std::stringstream da;
  da << fa.rdbuf();
  cfg.out = "/tmp/wn_acceptance_cmp_b.csv";
  compare_parameterizations(cfg);
  std::ifstream fb(cfg.out);
  std::stringstream db;
  db << fb.rdbuf();
  std::remove("/tmp/wn_acceptance_cmp_a.csv");
  std::remove("/tmp/wn_acceptance_cmp_a.csv.summary.csv");
  std::remove("/tmp/wn_acceptance_cmp_b.csv");
  std::remove("/tmp/wn_acceptance_cmp_b.csv.summary.csv");
  const std::string csv_a = da.str();
  const std::string csv_b = db.str();
  const bool same = strip_wall(csv_a) == strip_wall(csv_b);
  const auto lines = static_cast<long>(std::count(csv_a.begin(), csv_a.end(), '\n'));
  detail = same ? "identical bytes over " + std::to_string(lines) + " lines (wall column excluded)"
                : "CSV bytes differ between reruns";
  return same;
}

// 12. optimizers match independently coded scalar recurrences

bool criterion_optimizer_oracles(std::string& detail) {
  RngStream rng(20160612);
  double worst = 0.0;

  {
    Eigen::VectorXd value = Eigen::VectorXd::Constant(1, 0.8);
    std::vector<ParamRef> refs{{"p", Eigen::Map<Eigen::VectorXd>(value.data(), 1)}};
    AdamState st;
    oracle::ScalarAdam ref;
    double theta = 0.8;
    for (int i = 0; i < 50; ++i) {
      const double g = rng.next_normal();
      theta = ref.step(theta, g, 0.004);
      Gradients gr;
      gr.of.push_back(Eigen::VectorXd::Constant(1, g));
      adam_step(refs, gr, 0.004, st);
      worst = std::max(worst, oracle::rel_err(value[0], theta));
    }
  }
  {
    Eigen::VectorXd value = Eigen::VectorXd::Constant(1, -0.4);
    std::vector<ParamRef> refs{{"p", Eigen::Map<Eigen::VectorXd>(value.data(), 1)}};
    AdamaxState st;
    oracle::ScalarAdamax ref;
    double theta = -0.4;
    for (int i = 0; i < 50; ++i) {
      const double g = rng.next_normal();
      theta = ref.step(theta, g, 0.002);
      Gradients gr;
      gr.of.push_back(Eigen::VectorXd::Constant(1, g));
      adamax_step(refs, gr, 0.002, st);
      worst = std::max(worst, oracle::rel_err(value[0], theta));
    }
  }
  {
    Eigen::VectorXd value = Eigen::VectorXd::Constant(1, 1.3);
    std::vector<ParamRef> refs{{"p", Eigen::Map<Eigen::VectorXd>(value.data(), 1)}};
    MomentumState st;
    oracle::ScalarMomentum ref;
    double theta = 1.3;
    for (int i = 0; i < 50; ++i) {
      const double g = rng.next_normal();
      theta = ref.step(theta, g, 0.05, 0.9);
      Gradients gr;
      gr.of.push_back(Eigen::VectorXd::Constant(1, g));
      momentum_step(refs, gr, 0.05, 0.9, st);
      worst = std::max(worst, oracle::rel_err(value[0], theta));
    }
  }
  detail = "max rel deviation " + fmt(worst) + " over 50-step sequences";
  return worst <= 1e-12;
}

}  // namespace

int main(int argc, char** argv) {
  // optional single-criterion filter: ./acceptance 9
  int only = 0;
  if (argc > 1) only = std::atoi(argv[1]);

  ComparisonOutcome cmp;
  bool cmp_ran = false;
  auto ensure_cmp = [&] {
    if (!cmp_ran) {
      cmp = run_comparison();
      cmp_ran = true;
    }
  };

  std::vector<Criterion> criteria = {
      {1, "gradient-form identity (direct vs projected)", criterion_gradient_identity},
      {2, "norm contract ||w|| = |g|", criterion_norm_contract},
      {3, "finite-difference suite, five parameterizations", criterion_fd_suite},
      {4, "orthogonal updates and monotone norm growth", criterion_norm_growth},
      {5, "batch-norm / weight-norm equivalence on whitened input", criterion_bn_wn_equivalence},
      {6, "mean-only backward centering", criterion_meanonly_centering},
      {7, "data-dependent initialization", criterion_data_dependent_init},
      {8, "transformed covariance projection", criterion_covariance_projection},
      {9, "desk-scale speed: weight norm reaches 5% at most as late",
       [&](std::string& detail) {
         ensure_cmp();
         detail = std::to_string(cmp.wn_at_most_std) + "/" + std::to_string(cmp.seeds) +
                  " seeds on " + cmp.flavor + ", " + fmt(cmp.secs) + " s total";
         return cmp.wn_at_most_std >= 2 && cmp.secs < 600.0;
       }},
      {10, "learning-rate robustness: weight norm has >= healthy runs",
       [&](std::string& detail) {
         ensure_cmp();
         detail = std::to_string(cmp.wn_robust) + "/" + std::to_string(cmp.seeds) + " seeds";
         return cmp.wn_robust >= 2;
       }},
      {11, "compare determinism (CSV bytes, wall column excluded)", criterion_determinism},
      {12, "optimizer scalar-recurrence oracles", criterion_optimizer_oracles},
  };

  int failures = 0, ran = 0;
  for (auto& c : criteria) {
    if (only != 0 && c.id != only) continue;
    ++ran;
    std::string detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    if (!ok) ++failures;
    std::printf("[%s] %2d. %s: %s\n", ok ? "PASS" : "FAIL", c.id, c.name.c_str(),
                detail.c_str());
    std::fflush(stdout);
  }
  std::printf("ACCEPTANCE: %d/%d criteria passed\n", ran - failures, ran);
  return failures == 0 ? 0 : 1;
}
