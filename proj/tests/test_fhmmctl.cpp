#include <lkc/fhmmctl.hpp>

#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace lkc;
using namespace lkc::fhmmctl;

namespace {

fhmm::FactorialHmm grid_model(std::mt19937_64& rng, int m_chains, int k, double diffusion = 0.3) {
  fhmm::FactorialHmm m;
  m.n_chains = m_chains;
  m.n_values = k;
  const Vec grid = Vec::LinSpaced(k, -M_PI / 2.0, M_PI / 2.0);
  for (int c = 0; c < m_chains; ++c) {
    // random-walk-like banded chain, strictly ergodic
    Mat p = Mat::Zero(k, k);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    for (int i = 0; i < k; ++i) {
      p(i, i) = 1.0;
      if (i > 0) p(i, i - 1) = diffusion * u(rng);
      if (i + 1 < k) p(i, i + 1) = diffusion * u(rng);
      p.row(i) /= p.row(i).sum();
    }
    m.transitions.push_back(p);
    Mat w = Mat::Zero(m_chains, k);
    w.row(c) = grid.transpose();
    m.weights.push_back(w);
    m.initials.push_back(Vec::Constant(k, 1.0 / k));
  }
  m.obs_cov = 0.05 * Mat::Identity(m_chains, m_chains);
  m.value_grid = grid;
  return m;
}

LatentCostSpec quadratic_spec(const Vec& target, double alpha) {
  hmmctl::QuadraticCost q;
  q.target = target;
  q.weight_inverse_cov = Mat::Identity(target.size(), target.size());
  q.scale = 1.0;  // scale lives on the spec
  return LatentCostSpec{alpha, q};
}

TEST(SolveExact, ZeroCostRecoversUncontrolledJointLaw) {
  std::mt19937_64 rng(3);
  auto m = grid_model(rng, 2, 3);
  LatentCostSpec cost{0.0, CustomCost{[](const Vec&) { return 0.0; }}};
  auto sol = solve_exact(m, cost, 1e-12);
  auto flat = fhmm::flatten_to_hmm(m);
  EXPECT_NEAR(sol.eigenvalue, 1.0, 1e-12);
  ASSERT_GT(sol.optimal_control.size(), 0);
  EXPECT_LT((sol.optimal_control - flat.transition).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SolveExact, MatchesHandFlattenedProblem) {
  std::mt19937_64 rng(5);
  auto m = grid_model(rng, 2, 2);
  auto cost = quadratic_spec((Vec(2) << 0.7, -0.4).finished(), 1.3);

  auto sol = solve_exact(m, cost, 1e-12);

  // independent flattening by hand: chain 0 fastest-varying
  const int n = 4;
  Mat p(n, n);
  Vec q(n);
  for (int j = 0; j < n; ++j) {
    const int a0 = j % 2, a1 = j / 2;
    Vec mean = m.weights[0].col(a0) + m.weights[1].col(a1);
    q(j) = cost.scale * cost.qtilde(mean);
    for (int j2 = 0; j2 < n; ++j2)
      p(j, j2) = m.transitions[0](a0, j2 % 2) * m.transitions[1](a1, j2 / 2);
  }
  auto direct = klcore::solve_power_iteration(klcore::KlProblem(p, q, 1.0), 1e-12);
  EXPECT_NEAR(sol.eigenvalue, direct.eigenvalue, 1e-10);
  EXPECT_LT((sol.desirability - direct.desirability).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((sol.optimal_control - direct.optimal_control).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(SolveExact, CapGuard) {
  std::mt19937_64 rng(7);
  auto m = grid_model(rng, 3, 4);  // 64 joint states
  auto cost = quadratic_spec(Vec::Zero(3), 1.0);
  EXPECT_THROW(solve_exact(m, cost, 1e-8, 100000, 63), CapExceeded);
  EXPECT_NO_THROW(solve_exact(m, cost, 1e-8, 100000, 64));
}

TEST(SolveVkl, SingleChainMatchesExact) {
  std::mt19937_64 rng(11);
  auto m = grid_model(rng, 1, 5);
  auto cost = quadratic_spec(Vec::Constant(1, 0.9), 2.0);
  auto exact = solve_exact(m, cost, 1e-12);
  auto pol = solve_vkl(m, cost, {.tol = 1e-12});
  EXPECT_LT((pol.laws[0] - exact.optimal_control).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NEAR(pol.expected_cost, exact.average_cost, 1e-8);
}

TEST(SolveVkl, SeparableCostConvergesInOnePass) {
  std::mt19937_64 rng(13);
  auto m = grid_model(rng, 2, 4);
  // q(x) = f0(v0) + f1(v1): separable across chains through the weights
  LatentCostSpec cost{1.0, CustomCost{[](const Vec& v) {
                        return v(0) * v(0) + std::abs(v(1) - 0.5);
                      }}};
  auto pol = solve_vkl(m, cost, {.tol = 1e-10});

  // oracle: per-chain exact solve against its own cost component
  for (int c = 0; c < 2; ++c) {
    Vec q(4);
    for (int v = 0; v < 4; ++v) {
      const double g = (*m.value_grid)(v);
      q(v) = c == 0 ? g * g : std::abs(g - 0.5);
    }
    auto sub = klcore::solve_power_iteration(klcore::KlProblem(m.transitions[c], q, 1.0), 1e-12);
    EXPECT_LT((pol.laws[c] - sub.optimal_control).cwiseAbs().maxCoeff(), 1e-7) << "chain " << c;
  }
  // trace: initial objective, then convergence in a single outer pass
  ASSERT_GE(pol.objective_trace.size(), 2u);
  EXPECT_LE(pol.objective_trace[1] - pol.objective_trace.back(), 1e-8);
}

TEST(SolveVkl, CoupledCostTracksExactWithinFivePercent) {
  std::mt19937_64 rng(17);
  auto m = grid_model(rng, 2, 3);
  auto cost = quadratic_spec((Vec(2) << 1.0, -0.8).finished(), 2.0);
  auto exact = solve_exact(m, cost, 1e-12);
  auto pol = solve_vkl(m, cost, {.max_outer = 10, .tol = 1e-10});
  EXPECT_LE(pol.expected_cost, 1.05 * exact.average_cost + 1e-12);
  EXPECT_GE(pol.expected_cost, exact.average_cost - 1e-10);  // factored cannot beat exact
}

TEST(SolveVkl, ObjectiveTraceNonincreasing) {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = grid_model(rng, 3, 3);
    auto cost = quadratic_spec(Vec::Random(3), 1.5);
    auto pol = solve_vkl(m, cost, {.max_outer = 15, .tol = 1e-12});
    for (std::size_t i = 1; i < pol.objective_trace.size(); ++i)
      EXPECT_LE(pol.objective_trace[i],
                pol.objective_trace[i - 1] + 1e-8 * std::max(1.0, std::abs(pol.objective_trace[i - 1])));
    pol.validate(m);
  }
}

TEST(SolveVkl, BudgetGuard) {
  std::mt19937_64 rng(23);
  auto m = grid_model(rng, 3, 4);  // K^(M-1) = 16
  auto cost = quadratic_spec(Vec::Zero(3), 1.0);
  VklOptions opt;
  opt.marginalization_budget = 15;
  EXPECT_THROW(solve_vkl(m, cost, opt), BudgetExceeded);
  opt.marginalization_budget = 16;
  EXPECT_NO_THROW(solve_vkl(m, cost, opt));
}

TEST(SolveAvkl, SingleChainMatchesExact) {
  std::mt19937_64 rng(29);
  auto m = grid_model(rng, 1, 6);
  auto cost = quadratic_spec(Vec::Constant(1, -0.3), 1.0);
  auto exact = solve_exact(m, cost, 1e-12);
  auto pol = solve_avkl(m, cost, {.tol = 1e-12});
  EXPECT_LT((pol.laws[0] - exact.optimal_control).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NEAR(pol.expected_cost, exact.average_cost, 1e-8);
}

TEST(SolveAvkl, LinearCostCoincidesWithVkl) {
  std::mt19937_64 rng(31);
  auto m = grid_model(rng, 2, 4);
  // linear qtilde: expectation commutes with the marginalization, so the
  // per-chain costs agree exactly (offset large enough to stay >= 0)
  LatentCostSpec cost{1.0, CustomCost{[](const Vec& v) { return 10.0 + v(0) - 0.5 * v(1); }}};
  auto a = solve_avkl(m, cost, {.max_outer = 8, .tol = 1e-12});
  auto v = solve_vkl(m, cost, {.max_outer = 8, .tol = 1e-12});
  for (int c = 0; c < 2; ++c)
    EXPECT_LT((a.laws[c] - v.laws[c]).cwiseAbs().maxCoeff(), 1e-10) << "chain " << c;
}

TEST(SolveAvkl, CostEvaluationsScaleAsKTimesM) {
  std::mt19937_64 rng(37);
  for (int m_chains : {2, 4, 6}) {
    auto m = grid_model(rng, m_chains, 5);
    auto cost = quadratic_spec(Vec::Zero(m_chains), 1.0);
    VklOptions opt;
    opt.max_outer = 3;
    opt.tol = 0.0;
    opt.objective_cap = 0;  // force the surrogate objective path for all sizes
    auto pol = solve_avkl(m, cost, opt);
    // exactly K qtilde calls per chain update, K*M per outer iteration
    EXPECT_EQ(pol.cost_evaluations,
              static_cast<long>(pol.outer_iterations) * m.n_values * m_chains);
  }
}

TEST(ExpectedCost, UncontrolledZeroCostIsZero) {
  std::mt19937_64 rng(41);
  auto m = grid_model(rng, 2, 3);
  FactoredPolicy pol;
  pol.laws = m.transitions;
  for (int c = 0; c < 2; ++c)
    pol.stationaries.push_back(klcore::stationary_distribution(m.transitions[c], 1e-12));
  LatentCostSpec zero{1.0, CustomCost{[](const Vec&) { return 0.0; }}};
  EXPECT_NEAR(expected_cost(m, zero, pol).value, 0.0, 1e-12);
}

TEST(ExpectedCost, SingleChainMatchesKlcorePolicyCost) {
  std::mt19937_64 rng(43);
  auto m = grid_model(rng, 1, 5);
  auto cost = quadratic_spec(Vec::Constant(1, 0.4), 1.7);
  auto pol = solve_vkl(m, cost, {.tol = 1e-12});

  Vec q(5);
  for (int v = 0; v < 5; ++v) q(v) = cost.scale * cost.qtilde(m.weights[0].col(v));
  klcore::KlProblem prob(m.transitions[0], q, 1.0);
  EXPECT_NEAR(expected_cost(m, cost, pol).value,
              klcore::average_cost_of_policy(prob, pol.laws[0]), 1e-9);
}

TEST(ExpectedCost, MonteCarloAgreesWithExactSum) {
  std::mt19937_64 rng(47);
  auto m = grid_model(rng, 2, 2);
  auto cost = quadratic_spec((Vec(2) << 0.3, -0.2).finished(), 1.0);
  auto pol = solve_vkl(m, cost, {.tol = 1e-10});
  auto exact = expected_cost(m, cost, pol, 4096);
  auto mc = expected_cost(m, cost, pol, 2, 40000, 7);  // force the sampling path
  ASSERT_FALSE(mc.exact);
  EXPECT_NEAR(mc.value, exact.value, 3.0 * mc.std_error + 1e-12);
}

TEST(ControlStep, UncontrolledPolicyGivesExactlyZeroControl) {
  std::mt19937_64 rng(53);
  auto m = grid_model(rng, 2, 4);
  FactoredPolicy pol;
  pol.laws = m.transitions;
  for (int c = 0; c < 2; ++c)
    pol.stationaries.push_back(klcore::stationary_distribution(m.transitions[c], 1e-12));
  Mat window(3, 2);
  window << 0.1, -0.2, 0.15, -0.1, 0.2, 0.0;
  auto res = control_step_fhmm(m, pol, nullptr, window, 5.0 * Mat::Identity(2, 2), 32, 99);
  // common random numbers make the paired samples identical
  EXPECT_EQ(res.tau(0), 0.0);
  EXPECT_EQ(res.tau(1), 0.0);
  EXPECT_TRUE(res.ybar_u == res.ybar_p);
}

TEST(ControlStep, ZeroGainGivesZeroControl) {
  std::mt19937_64 rng(59);
  auto m = grid_model(rng, 2, 3);
  auto cost = quadratic_spec(Vec::Zero(2), 1.0);
  auto pol = solve_vkl(m, cost, {});
  Mat window(1, 2);
  window << 0.3, 0.3;
  auto res = control_step_fhmm(m, pol, nullptr, window, Mat::Zero(2, 2), 16, 3);
  EXPECT_EQ(res.tau.cwiseAbs().maxCoeff(), 0.0);
}

TEST(ControlStep, SampledMeanConvergesToExactMixtureMean) {
  std::mt19937_64 rng(61);
  auto m = grid_model(rng, 2, 2);
  auto cost = quadratic_spec((Vec(2) << 0.5, 0.5).finished(), 2.0);
  auto pol = solve_vkl(m, cost, {});
  Mat window(2, 2);
  window << 0.2, -0.3, 0.25, -0.2;

  auto filt = fhmm::windowed_filter(m, pol.laws, nullptr, window, {});
  Vec exact_mean = Vec::Zero(2);
  double var_bound = 0;
  for (int c = 0; c < 2; ++c) {
    const Vec rho = pol.laws[c].transpose() * filt.final_marginals[c];
    exact_mean += m.weights[c] * rho;
    var_bound += m.weights[c].cwiseAbs().maxCoeff() * m.weights[c].cwiseAbs().maxCoeff();
  }
  const int l = 200000;
  auto res = control_step_fhmm(m, pol, nullptr, window, Mat::Identity(2, 2), l, 17);
  const double sigma = std::sqrt(var_bound);
  EXPECT_LT((res.ybar_u - exact_mean).cwiseAbs().maxCoeff(), 3.0 * sigma / std::sqrt(double(l)));
}

TEST(ControlStep, SampledMeanIsTranslationEquivariant) {
  std::mt19937_64 rng(67);
  auto m = grid_model(rng, 3, 3);
  FactoredPolicy pol;
  pol.laws = m.transitions;
  for (int c = 0; c < 3; ++c)
    pol.stationaries.push_back(klcore::stationary_distribution(m.transitions[c], 1e-12));
  Mat window(2, 3);
  window.setConstant(0.1);

  auto base = control_step_fhmm(m, pol, nullptr, window, Mat::Identity(3, 3), 64, 5);
  Vec shift(3);
  shift << 0.2, -0.1, 0.3;
  auto shifted_model = m;
  for (int c = 0; c < 3; ++c) shifted_model.weights[c].colwise() += shift;
  // identical observations => identical likelihood offsets cancel in the
  // filter only if the shift is compensated; shift observations as well
  Mat window2 = window;
  window2.rowwise() += (3.0 * shift).transpose();
  auto moved = control_step_fhmm(shifted_model, pol, nullptr, window2, Mat::Identity(3, 3), 64, 5);
  EXPECT_LT((moved.ybar_u - (base.ybar_u + 3.0 * shift)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ExactController, MatchesMaterializedHmmController) {
  std::mt19937_64 rng(71);
  auto m = grid_model(rng, 2, 2);
  auto cost = quadratic_spec((Vec(2) << 0.6, -0.6).finished(), 2.0);
  auto sol = solve_exact(m, cost, 1e-12);

  const Mat gain = 2.0 * Mat::Identity(2, 2);
  ExactFhmmController structured(m, cost, sol.desirability, gain);

  auto flat = fhmm::flatten_to_hmm(m);
  hmmctl::QuadraticCost qc = std::get<hmmctl::QuadraticCost>(cost.fn);
  qc.scale = cost.scale;
  hmmctl::HmmController materialized(flat, sol, gain, qc);

  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int t = 0; t < 25; ++t) {
    Vec y(2);
    y << u(rng), u(rng);
    const Vec a = structured.step(y);
    const Vec b = hmmctl::control_step(materialized, y);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-10) << "step " << t;
  }
}

TEST(FhmmControllerLoop, SlidingWindowAndAnchorAdvanceDeterministically) {
  std::mt19937_64 rng(73);
  auto m = grid_model(rng, 2, 3);
  auto cost = quadratic_spec((Vec(2) << 0.4, 0.4).finished(), 1.0);
  auto pol = solve_avkl(m, cost, {});
  auto make = [&]() {
    FhmmController ctl;
    ctl.model = m;
    ctl.policy = pol;
    ctl.gain = Mat::Identity(2, 2);
    ctl.window_cap = 4;
    ctl.n_samples = 50;
    ctl.seed = 1234;
    return ctl;
  };
  auto c1 = make(), c2 = make();
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int t = 0; t < 12; ++t) {
    Vec y(2);
    y << u(rng), u(rng);
    const Vec a = c1.step(y);
    const Vec b = c2.step(y);
    EXPECT_TRUE(a == b);
  }
  EXPECT_EQ(static_cast<int>(c1.buffer.size()), 4);
}

TEST(Serialization, FactoredPolicyRoundTripWithProvenance) {
  std::mt19937_64 rng(79);
  auto m = grid_model(rng, 2, 3);
  auto cost = quadratic_spec(Vec::Zero(2), 1.2);
  auto pol = solve_vkl(m, cost, {});
  auto back = factored_policy_from_json(to_json(pol));
  EXPECT_EQ(back.solver, "vkl");
  EXPECT_EQ(back.outer_iterations, pol.outer_iterations);
  EXPECT_EQ(back.objective_trace, pol.objective_trace);
  for (int c = 0; c < 2; ++c) {
    EXPECT_TRUE(back.laws[c] == pol.laws[c]);
    EXPECT_TRUE(back.stationaries[c] == pol.stationaries[c]);
  }
}

}  // namespace
