#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nhmm/brute_force.hpp"
#include "nhmm/fullsum_lattice.hpp"
#include "nhmm/verification.hpp"
#include "test_support.hpp"

using namespace nhmm;

namespace {

TransitionField flat_field(std::size_t T, std::size_t S) { return TransitionField::constant(T, S, std::log(0.5)); }

}  // namespace

TEST(ForwardBackward, TwoPathHandExample) {
  const MatrixD log_phi(3, 2, std::log(0.5));
  const auto st = forward_backward(log_phi, flat_field(3, 2), {1.0, 1.0});
  EXPECT_NEAR(st.log_likelihood, std::log(0.0625), 1e-14);
}

TEST(ForwardBackward, UniquePathIsDiagonal) {
  std::mt19937_64 rng(2);
  auto in = verify::random_instance(rng, 5, 5);
  const std::size_t T = 5;
  in.log_phi = MatrixD(T, T, -0.7);
  in.field = flat_field(T, T);
  const auto st = forward_backward(in.log_phi, in.field, {0.4, 1.1});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < T; ++s) EXPECT_NEAR(st.gamma(t, s), t == s ? 1.0 : 0.0, 1e-15);
}

TEST(ForwardBackward, SingleStateClosedForm) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  const std::size_t T = 7;
  MatrixD log_phi(T, 1);
  double sum = 0.0;
  for (double& v : log_phi.flat()) sum += (v = -std::abs(n(rng)));
  TransitionField f{MatrixD(T, 1, std::log(0.2)), MatrixD(T, 1, std::log(0.8))};
  const Scales sc{0.6, 0.9};
  const auto st = forward_backward(log_phi, f, sc);
  EXPECT_NEAR(st.log_likelihood, sc.lpm * sum + sc.tm * (T - 1) * std::log(0.8), 1e-12);
}

TEST(ForwardBackward, MatchesBruteForceOracle) {
  const auto r = verify::run_oracle_suite(300, 17);
  EXPECT_LE(r.max_log_likelihood_error, 1e-10);
  EXPECT_LE(r.max_gamma_error, 1e-9);
  EXPECT_LE(r.max_xi_error, 1e-9);
  EXPECT_LE(r.max_normalization_error, 1e-8);
}

TEST(ForwardBackward, ShiftInvariance) {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 50; ++rep) {
    auto in = verify::random_instance(rng);
    const auto a = forward_backward(in.log_phi, in.field, in.scales);
    const double c = -1.7;
    for (double& v : in.log_phi.flat()) v += c;
    const auto b = forward_backward(in.log_phi, in.field, in.scales);
    EXPECT_NEAR(b.log_likelihood - a.log_likelihood, in.scales.lpm * in.log_phi.rows() * c, 1e-9);
    EXPECT_LE(verify::max_abs_diff(a.gamma, b.gamma), 1e-9);
    EXPECT_LE(verify::max_abs_diff(a.xi_fwd, b.xi_fwd), 1e-9);
  }
}

TEST(ForwardBackward, FlatFieldConstantOnlyShiftsLikelihood) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 50; ++rep) {
    auto in = verify::random_instance(rng);
    const std::size_t T = in.log_phi.rows(), S = in.log_phi.cols();
    const double c1 = std::log(0.5), c2 = std::log(0.013);
    const auto a = loss_and_grads(in.log_phi, TransitionField::constant(T, S, c1), in.scales);
    const auto b = loss_and_grads(in.log_phi, TransitionField::constant(T, S, c2), in.scales);
    EXPECT_LE(verify::max_abs_diff(a.gamma, b.gamma), 1e-10);
    EXPECT_LE(verify::max_abs_diff(a.d_log_phi, b.d_log_phi), 1e-10);
    EXPECT_NEAR(-(b.loss - a.loss), in.scales.tm * (T - 1.0) * (c2 - c1), 1e-10);
  }
}

TEST(ForwardBackward, FiniteOnExtremeInputs) {
  std::mt19937_64 rng(10);
  for (int rep = 0; rep < 100; ++rep) {
    auto in = verify::random_instance(rng, 8, 5, 1.5);
    for (double& v : in.log_phi.flat()) v *= 300.0;
    for (std::size_t i = 0; i < in.field.log_forward.size(); ++i) {
      const double x = 80.0 * (in.field.log_forward.flat()[i] - in.field.log_loop.flat()[i]);
      in.field.log_forward.flat()[i] = log_sigmoid(x);
      in.field.log_loop.flat()[i] = log_sigmoid(-x);
    }
    const auto st = loss_and_grads(in.log_phi, in.field, in.scales);
    EXPECT_TRUE(std::isfinite(st.loss));
    for (double v : st.gamma.flat()) EXPECT_TRUE(std::isfinite(v));
    for (double v : st.d_log_phi.flat()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(ForwardBackward, RejectsBadInput) {
  EXPECT_THROW(forward_backward(MatrixD(2, 3, -1.0), flat_field(2, 3), {}), InfeasibleChain);
  EXPECT_THROW(forward_backward(MatrixD(3, 2, -1.0), flat_field(3, 3), {}), std::invalid_argument);
  MatrixD nan(3, 2, -1.0);
  nan(1, 1) = std::nan("");
  EXPECT_THROW(forward_backward(nan, flat_field(3, 2), {}), std::invalid_argument);
  EXPECT_THROW(forward_backward(MatrixD(3, 2, -1.0), flat_field(3, 2), {-0.1, 1.0}), std::invalid_argument);
}

TEST(BruteForce, PathCountsAndZeroScales) {
  std::size_t n = 0;
  for_each_monotone_path(4, 2, [&](const std::vector<std::size_t>&) { ++n; });
  EXPECT_EQ(n, 3u);
  EXPECT_EQ(binomial(3, 1), 3.0);
  std::mt19937_64 rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    auto in = verify::random_instance(rng);
    const std::size_t T = in.log_phi.rows(), S = in.log_phi.cols();
    EXPECT_NEAR(brute_force(in.log_phi, in.field, {0.0, 0.0}).log_likelihood,
                std::log(binomial(T - 1, S - 1)), 1e-12);
    EXPECT_NEAR(forward_backward(in.log_phi, in.field, {0.0, 0.0}).log_likelihood,
                std::log(binomial(T - 1, S - 1)), 1e-12);
  }
}

TEST(LossAndGrads, RowSumsAndScaleAnnihilation) {
  std::mt19937_64 rng(14);
  for (int rep = 0; rep < 50; ++rep) {
    auto in = verify::random_instance(rng);
    const auto lg = loss_and_grads(in.log_phi, in.field, in.scales);
    for (std::size_t t = 0; t < lg.d_log_phi.rows(); ++t) {
      double row = 0.0;
      for (double v : lg.d_log_phi.row(t)) row += v;
      EXPECT_NEAR(row, -in.scales.lpm, 1e-12);
    }
    const auto zero = loss_and_grads(in.log_phi, in.field, {0.0, in.scales.tm});
    for (double v : zero.d_log_phi.flat()) EXPECT_EQ(v, 0.0);
  }
}

TEST(LossAndGrads, MatchesFiniteDifferences) {
  const auto r = verify::check_log_phi_gradient(60, 31);
  EXPECT_GT(r.checked, 100u);
  EXPECT_LE(r.max_relative_error, 1e-5);
}

TEST(GatherScatter, RoundTripAccumulatesRepeatedLabels) {
  const auto inv = LabelInventory::make({"A", "B"}, "sil", 2, 1);
  const auto chain = expand_labels({1, 1}, inv);  // sil A A A A sil
  MatrixD log_probs(3, 3);
  for (std::size_t i = 0; i < log_probs.size(); ++i) log_probs.flat()[i] = -static_cast<double>(i);
  const auto g = gather_log_phi(log_probs, chain);
  ASSERT_EQ(g.cols(), 6u);
  EXPECT_EQ(g(1, 0), log_probs(1, 0));
  EXPECT_EQ(g(2, 3), log_probs(2, 1));
  MatrixD ones(3, 6, 1.0), d(3, 3, 0.0);
  scatter_add(ones, chain, d);
  EXPECT_EQ(d(0, 0), 2.0);
  EXPECT_EQ(d(0, 1), 4.0);
  EXPECT_EQ(d(0, 2), 0.0);
}
