#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "oracles.hpp"
#include "wn/normalization.hpp"

using namespace wn;

namespace {

Eigen::MatrixXd random_batch(RngStream& rng, Index n, Index f, double scale = 1.0) {
  return oracle::random_matrix(rng, n, f, scale);
}

}  // namespace

TEST_CASE("batchnorm_forward: two-point hand case") {
  BatchNormState st = BatchNormState::create(1);
  Eigen::MatrixXd t(2, 1);
  t << 1.0, 3.0;
  const Eigen::MatrixXd out = batchnorm_forward(t, st, PassMode::train);
  // mu = 2, sigma = 1 (population), so +-1 up to eps inside the sqrt
  CHECK(out(0, 0) == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(out(1, 0) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(st.seeded);
  CHECK(st.running_mean[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(st.running_var[0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("batchnorm_forward: constant column stays finite and zero") {
  BatchNormState st = BatchNormState::create(2);
  Eigen::MatrixXd t(3, 2);
  t << 5.0, 1.0, 5.0, 2.0, 5.0, 3.0;
  const Eigen::MatrixXd out = batchnorm_forward(t, st, PassMode::train);
  CHECK(out.col(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.allFinite());
}

TEST_CASE("batchnorm_forward: train-mode output is standardized") {
  RngStream rng(19);
  BatchNormState st = BatchNormState::create(6, 0.9, 1e-12);
  const Eigen::MatrixXd t = random_batch(rng, 40, 6, 2.5);
  const Eigen::MatrixXd out = batchnorm_forward(t, st, PassMode::train);
  for (Index j = 0; j < 6; ++j) {
    std::vector<double> col(out.col(j).data(), out.col(j).data() + out.rows());
    const auto [m, s] = oracle::mean_std(col);
    CHECK(std::abs(m) < 1e-10);
    CHECK(std::abs(s - 1.0) < 1e-8);
  }
}

TEST_CASE("batchnorm_forward: batch below 2 in train mode is an error") {
  BatchNormState st = BatchNormState::create(3);
  CHECK_THROWS_AS(batchnorm_forward(Eigen::MatrixXd::Ones(1, 3), st, PassMode::train),
                  BatchSizeError);
  // eval before any train pass has no running statistics yet
  CHECK_THROWS_AS(batchnorm_forward(Eigen::MatrixXd::Ones(1, 3), st, PassMode::eval),
                  ContractError);
}

TEST_CASE("batchnorm: running statistics follow momentum blending") {
  BatchNormState st = BatchNormState::create(1, 0.9, 1e-6);
  Eigen::MatrixXd t1(2, 1), t2(2, 1);
  t1 << 0.0, 2.0;  // mean 1, var 1
  t2 << 4.0, 8.0;  // mean 6, var 4
  batchnorm_forward(t1, st, PassMode::train);
  CHECK(st.running_mean[0] == doctest::Approx(1.0).epsilon(1e-15));
  batchnorm_forward(t2, st, PassMode::train);
  CHECK(st.running_mean[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 6.0).epsilon(1e-12));
  CHECK(st.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 4.0).epsilon(1e-12));

  // eval uses the running statistics
  Eigen::MatrixXd q(1, 1);
  q << st.running_mean[0];
  const Eigen::MatrixXd out = batchnorm_forward(q, st, PassMode::eval);
  CHECK(std::abs(out(0, 0)) < 1e-12);
}

TEST_CASE("batchnorm_backward: zero upstream gradient gives zero gradients") {
  RngStream rng(23);
  BatchNormState st = BatchNormState::create(4);
  BatchNormCache cache;
  batchnorm_forward(random_batch(rng, 8, 4), st, PassMode::train, &cache);
  const auto g = batchnorm_backward(Eigen::MatrixXd::Zero(8, 4), cache, st);
  CHECK(g.grad_t.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.grad_gamma.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.grad_beta.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("batchnorm_backward: antisymmetric case") {
  BatchNormState st = BatchNormState::create(1);
  BatchNormCache cache;
  Eigen::MatrixXd t(2, 1);
  t << -1.0, 1.0;
  batchnorm_forward(t, st, PassMode::train, &cache);
  Eigen::MatrixXd dout(2, 1);
  dout << -0.3, 0.3;
  const auto g = batchnorm_backward(dout, cache, st);
  CHECK(g.grad_t(0, 0) == doctest::Approx(-g.grad_t(1, 0)).epsilon(1e-12));
}

TEST_CASE("batchnorm_backward: matches central finite differences") {
  RngStream rng(29);
  const Index n = 7, f = 3;
  Eigen::MatrixXd t = random_batch(rng, n, f, 1.5);
  Eigen::MatrixXd dout = random_batch(rng, n, f);
  BatchNormState st = BatchNormState::create(f);
  st.gamma = oracle::random_vector(rng, f).array() + 2.0;
  st.beta = oracle::random_vector(rng, f);

  BatchNormCache cache;
  batchnorm_forward(t, st, PassMode::train, &cache);
  const auto g = batchnorm_backward(dout, cache, st);

  // L = sum(dout .* forward(t)); finite-difference every input coordinate.
  auto loss = [&](Eigen::MatrixXd& tt, BatchNormState& stt) {
    BatchNormState copy = stt;  // forward mutates running stats
    return (dout.array() * batchnorm_forward(tt, copy, PassMode::train).array()).sum();
  };
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < f; ++j) {
      const double fd = oracle::central_diff(&t(i, j), [&] { return loss(t, st); });
      CHECK(oracle::rel_err(g.grad_t(i, j), fd, 1e-8) < 1e-6);
    }
  }
  for (Index j = 0; j < f; ++j) {
    const double fd_gamma = oracle::central_diff(&st.gamma[j], [&] { return loss(t, st); });
    CHECK(oracle::rel_err(g.grad_gamma[j], fd_gamma, 1e-8) < 1e-6);
    const double fd_beta = oracle::central_diff(&st.beta[j], [&] { return loss(t, st); });
    CHECK(oracle::rel_err(g.grad_beta[j], fd_beta, 1e-8) < 1e-6);
  }
}

TEST_CASE("batchnorm_backward: rejects an eval-mode cache") {
  RngStream rng(31);
  BatchNormState st = BatchNormState::create(2);
  batchnorm_forward(random_batch(rng, 4, 2), st, PassMode::train);
  BatchNormCache cache;
  batchnorm_forward(random_batch(rng, 4, 2), st, PassMode::eval, &cache);
  CHECK_THROWS_AS(batchnorm_backward(Eigen::MatrixXd::Zero(4, 2), cache, st), ContractError);
}

TEST_CASE("meanonly_forward: hand cases") {
  MeanOnlyBNState st = MeanOnlyBNState::create(1);
  Eigen::MatrixXd t(3, 1);
  t << 1.0, 2.0, 3.0;
  const Eigen::MatrixXd out =
      meanonly_forward(t, Eigen::VectorXd::Zero(1), st, PassMode::train);
  CHECK(out(0, 0) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(out(1, 0) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(out(2, 0) == doctest::Approx(1.0).epsilon(1e-15));

  MeanOnlyBNState st2 = MeanOnlyBNState::create(1);
  Eigen::MatrixXd c(4, 1);
  c.setConstant(5.0);
  const Eigen::MatrixXd out2 =
      meanonly_forward(c, Eigen::VectorXd::Constant(1, 2.0), st2, PassMode::train);
  CHECK((out2.array() == 2.0).all());
}

TEST_CASE("meanonly_forward: train output has zero column means") {
  RngStream rng(37);
  MeanOnlyBNState st = MeanOnlyBNState::create(5);
  const Eigen::MatrixXd t = random_batch(rng, 32, 5, 3.0);
  const Eigen::MatrixXd out =
      meanonly_forward(t, Eigen::VectorXd::Zero(5), st, PassMode::train);
  CHECK(out.colwise().mean().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("meanonly_forward: eval subtracts the running (pre-bias) mean, then adds b") {
  MeanOnlyBNState st = MeanOnlyBNState::create(1);
  Eigen::MatrixXd t(2, 1);
  t << 2.0, 4.0;  // running mean seeds to 3
  const Eigen::VectorXd b = Eigen::VectorXd::Constant(1, 10.0);
  meanonly_forward(t, b, st, PassMode::train);
  CHECK(st.running_mean[0] == doctest::Approx(3.0).epsilon(1e-15));
  Eigen::MatrixXd q(1, 1);
  q << 3.0;
  const Eigen::MatrixXd out = meanonly_forward(q, b, st, PassMode::eval);
  CHECK(out(0, 0) == doctest::Approx(10.0).epsilon(1e-15));

  MeanOnlyBNState unseeded = MeanOnlyBNState::create(1);
  CHECK_THROWS_AS(meanonly_forward(q, b, unseeded, PassMode::eval), ContractError);
}

TEST_CASE("meanonly_backward: hand cases and exact centering") {
  Eigen::MatrixXd g1(3, 1);
  g1 << 1.0, 2.0, 3.0;
  const auto r = meanonly_backward(g1);
  CHECK(r.grad_t(0, 0) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(r.grad_t(1, 0) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(r.grad_t(2, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(r.grad_b[0] == doctest::Approx(6.0).epsilon(1e-15));

  // already-centered gradients are a fixed point
  const auto r2 = meanonly_backward(r.grad_t);
  CHECK((r2.grad_t - r.grad_t).cwiseAbs().maxCoeff() < 1e-15);

  RngStream rng(41);
  const Eigen::MatrixXd big = oracle::random_matrix(rng, 256, 64, 2.0);
  const auto r3 = meanonly_backward(big);
  CHECK(r3.grad_t.colwise().mean().cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("meanonly_backward: matches finite differences through meanonly_forward") {
  RngStream rng(43);
  const Index n = 6, f = 2;
  Eigen::MatrixXd t = random_batch(rng, n, f);
  Eigen::VectorXd b = oracle::random_vector(rng, f);
  const Eigen::MatrixXd dout = random_batch(rng, n, f);

  auto loss = [&] {
    MeanOnlyBNState st = MeanOnlyBNState::create(f);
    return (dout.array() * meanonly_forward(t, b, st, PassMode::train).array()).sum();
  };
  const auto g = meanonly_backward(dout);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < f; ++j) {
      const double fd = oracle::central_diff(&t(i, j), loss);
      CHECK(oracle::rel_err(g.grad_t(i, j), fd, 1e-8) < 1e-6);
    }
  }
  for (Index j = 0; j < f; ++j) {
    const double fd = oracle::central_diff(&b[j], loss);
    CHECK(oracle::rel_err(g.grad_b[j], fd, 1e-8) < 1e-6);
  }
}

TEST_CASE("init_from_stats: the assignment rule") {
  const double eps = 1e-6;
  // already standardized: g -> 1/(1+eps), b -> 0
  auto a = init_from_stats(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1), eps);
  CHECK(a.g[0] == doctest::Approx(1.0 / (1.0 + eps)).epsilon(1e-12));
  CHECK(std::abs(a.b[0]) < 1e-12);

  // mu = 4, sigma = 2: g = 1/(2+eps), b = -4/(2+eps)
  a = init_from_stats(Eigen::VectorXd::Constant(1, 4.0), Eigen::VectorXd::Constant(1, 2.0), eps);
  CHECK(a.g[0] == doctest::Approx(1.0 / (2.0 + eps)).epsilon(1e-12));
  CHECK(a.b[0] == doctest::Approx(-4.0 / (2.0 + eps)).epsilon(1e-12));

  // zero sigma is rescued by eps
  a = init_from_stats(Eigen::VectorXd::Ones(1), Eigen::VectorXd::Zero(1), eps);
  CHECK(std::isfinite(a.g[0]));
  CHECK(a.g[0] == doctest::Approx(1.0 / eps).epsilon(1e-12));
}
