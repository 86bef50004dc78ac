#pragma once

// Latent KL control on factorial HMMs, three ways: exact on the flattened
// K^M joint chain, VKL (coordinate descent over per-chain laws with the
// cross-chain cost marginalized exactly) and AVKL (cross-chain cost
// collapsed onto the other chains' stationary means). Plus the
// observed-space control loop with windowed mean-field filtering and
// sampled predictive means.

#include <lkc/common.hpp>
#include <lkc/fhmm.hpp>
#include <lkc/hmmctl.hpp>
#include <lkc/klcore.hpp>

#include <cmath>
#include <deque>
#include <functional>
#include <random>
#include <variant>

namespace lkc::fhmmctl {

// ---------------------------------------------------------------------------
// Cost specification

/// End-effector distance cost ||target - T(v)|| on a joint-angle vector.
struct ReachingCost {
  Vec target;
};

/// Arbitrary nonnegative observation cost; not serializable, intended for
/// tests and experiments.
struct CustomCost {
  std::function<double(const Vec&)> qtilde;
};

/// Latent cost q(x) = scale * qtilde(sum_m W^(m) x^(m)).
struct LatentCostSpec {
  double scale = 1.0;
  std::variant<hmmctl::QuadraticCost, ReachingCost, CustomCost> fn;

  double qtilde(const Vec& v) const {
    if (const auto* q = std::get_if<hmmctl::QuadraticCost>(&fn)) return q->qtilde(v);
    if (const auto* r = std::get_if<ReachingCost>(&fn)) return (r->target - forward_kin(v)).norm();
    return std::get<CustomCost>(fn).qtilde(v);
  }

  static Vec forward_kin(const Vec& angles) {
    Vec p = Vec::Zero(2);
    double acc = 0;
    for (Eigen::Index i = 0; i < angles.size(); ++i) {
      acc += angles(i);
      p(0) += std::cos(acc);
      p(1) += std::sin(acc);
    }
    return p;
  }
};

// ---------------------------------------------------------------------------
// Joint-space helpers (chain 0 fastest-varying, as in fhmm::flatten_to_hmm)

namespace detail {

inline long joint_count(const fhmm::FactorialHmm& m) {
  long n = 1;
  for (int c = 0; c < m.n_chains; ++c) n *= m.n_values;
  return n;
}

/// Applies the Kronecker-product operator (chain matrices along their
/// modes) to a joint-state vector without materializing the K^M x K^M
/// matrix: z'(x) = sum_{x'} prod_m A^(m)(x_m, x'_m) z(x').
inline Vec apply_chain_kronecker(const std::vector<Mat>& mats, const Vec& z, int k,
                                 bool transpose) {
  const int m_chains = static_cast<int>(mats.size());
  Vec cur = z;
  Vec next(z.size());
  long inner = 1;  // K^m
  for (int m = 0; m < m_chains; ++m) {
    const long outer = z.size() / (inner * k);
    const Mat& a = transpose ? Mat(mats[m].transpose()) : mats[m];
    for (long o = 0; o < outer; ++o) {
      for (long i = 0; i < inner; ++i) {
        const long base = o * inner * k + i;
        for (int row = 0; row < k; ++row) {
          double acc = 0;
          for (int col = 0; col < k; ++col) acc += a(row, col) * cur(base + col * inner);
          next(base + row * inner) = acc;
        }
      }
    }
    std::swap(cur, next);
    inner *= k;
  }
  return cur;
}

/// Emission mean of every joint state, one row per state.
inline Mat joint_means(const fhmm::FactorialHmm& model) {
  const long n = joint_count(model);
  Mat means(n, model.dim());
  for (long j = 0; j < n; ++j) {
    Vec mean = Vec::Zero(model.dim());
    long rem = j;
    for (int m = 0; m < model.n_chains; ++m) {
      mean += model.weights[m].col(rem % model.n_values);
      rem /= model.n_values;
    }
    means.row(j) = mean.transpose();
  }
  return means;
}

inline double kl_divergence_row(const Vec& u, const Vec& p) {
  double kl = 0;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    if (u(i) > 0) {
      if (p(i) == 0) return std::numeric_limits<double>::infinity();
      kl += u(i) * std::log(u(i) / p(i));
    }
  }
  return kl;
}

}  // namespace detail

/// State costs q(x) = scale * qtilde(joint mean) over all joint states.
inline Vec joint_state_costs(const fhmm::FactorialHmm& model, const LatentCostSpec& cost,
                             long* eval_counter = nullptr) {
  const Mat means = detail::joint_means(model);
  Vec q(means.rows());
  for (Eigen::Index j = 0; j < means.rows(); ++j) q(j) = cost.scale * cost.qtilde(means.row(j).transpose());
  if (eval_counter) *eval_counter += means.rows();
  return q;
}

// ---------------------------------------------------------------------------
// Exact solver on the flattened joint chain

/// Solves the joint eigenproblem lambda z = G P z with the Kronecker
/// structure of P applied implicitly, so only O(K^M) memory is needed.
/// The optimal control matrix is materialized only below the given
/// threshold; above it the solution keeps z alone and controllers apply
/// u* implicitly.
inline klcore::KlSolution solve_exact(const fhmm::FactorialHmm& model, const LatentCostSpec& cost,
                                      double tol = 1e-8, int max_iter = 200000, long cap = 4096,
                                      long materialize_threshold = 4096) {
  model.validate();
  const long n = detail::joint_count(model);
  if (n > cap)
    throw CapExceeded("solve_exact: K^M = " + std::to_string(n) + " exceeds cap " +
                      std::to_string(cap));
  const Vec q = joint_state_costs(model, cost);
  const Vec g = (-q).array().exp();
  auto apply = [&](const Vec& z) -> Vec {
    return g.cwiseProduct(
        detail::apply_chain_kronecker(model.transitions, z, model.n_values, false));
  };
  auto pi = klcore::power_iteration(apply, static_cast<int>(n), tol, max_iter);
  if (!pi.converged && pi.residual > tol)
    throw NonConvergence("solve_exact: residual " + std::to_string(pi.residual));

  klcore::KlSolution sol;
  sol.desirability = pi.vector;
  sol.eigenvalue = pi.eigenvalue;
  sol.average_cost = -std::log(pi.eigenvalue);
  sol.iterations = pi.iterations;
  sol.residual = pi.residual;
  sol.cost_to_go = Vec(n);
  for (long i = 0; i < n; ++i)
    sol.cost_to_go(i) =
        pi.vector(i) > 0 ? -std::log(pi.vector(i)) : std::numeric_limits<double>::infinity();
  if (n <= materialize_threshold) {
    const auto flat = fhmm::flatten_to_hmm(model, cap);
    klcore::KlProblem prob(flat.transition, q, 1.0);
    sol.optimal_control = klcore::optimal_control_from_z(prob, pi.vector, &sol.dead_end_rows);
  }
  return sol;
}

// ---------------------------------------------------------------------------
// Factored policies and their expected cost

/// Per-chain optimal transition laws with their stationary distributions
/// and the achieved decomposed expected cost, plus solver provenance.
struct FactoredPolicy {
  std::vector<Mat> laws;          // u_ap^(m)
  std::vector<Vec> stationaries;  // Pi_ap^(m)
  double expected_cost = 0;
  std::string solver;
  int outer_iterations = 0;
  std::vector<double> objective_trace;
  bool trace_is_exact = true;  // exact decomposed objective vs AVKL surrogate
  long cost_evaluations = 0;   // qtilde calls made by the solver

  void validate(const fhmm::FactorialHmm& model) const {
    if (laws.size() != stationaries.size() ||
        static_cast<int>(laws.size()) != model.n_chains)
      throw InvalidModel("FactoredPolicy: chain count mismatch");
    for (std::size_t m = 0; m < laws.size(); ++m) {
      for (int i = 0; i < laws[m].rows(); ++i) {
        if (std::abs(laws[m].row(i).sum() - 1.0) > 1e-12)
          throw InvalidModel("FactoredPolicy: law row does not sum to 1");
        for (int j = 0; j < laws[m].cols(); ++j)
          if (laws[m](i, j) > 0 && model.transitions[m](i, j) == 0)
            throw InvalidModel("FactoredPolicy: law not absolutely continuous");
      }
      const Vec fix = laws[m].transpose() * stationaries[m];
      if ((fix - stationaries[m]).cwiseAbs().maxCoeff() > 1e-10)
        throw InvalidModel("FactoredPolicy: stationary vector is not a fixed point");
    }
  }
};

struct ExpectedCostResult {
  double value = 0;
  double std_error = 0;  // zero for the exact evaluation
  bool exact = true;
};

/// Decomposed expected cost
///   sum_x Pi_ap(x) [ q(x) + sum_m KL(u^(m)(.|x^(m)) || P^(m)(.|x^(m))) ],
/// evaluated exactly when K^M fits the budget and by Monte Carlo over the
/// product stationary distribution otherwise.
inline ExpectedCostResult expected_cost(const fhmm::FactorialHmm& model,
                                        const LatentCostSpec& cost, const FactoredPolicy& policy,
                                        long exact_cap = 4096, int mc_samples = 20000,
                                        std::uint64_t mc_seed = 1) {
  const int k = model.n_values;
  const int m_chains = model.n_chains;
  double kl_term = 0;
  for (int m = 0; m < m_chains; ++m)
    for (int i = 0; i < k; ++i)
      kl_term += policy.stationaries[m](i) *
                 detail::kl_divergence_row(policy.laws[m].row(i).transpose(),
                                           model.transitions[m].row(i).transpose());

  ExpectedCostResult res;
  const long n = detail::joint_count(model);
  if (n <= exact_cap) {
    double state_term = 0;
    for (long j = 0; j < n; ++j) {
      long rem = j;
      double w = 1.0;
      Vec v = Vec::Zero(model.dim());
      for (int m = 0; m < m_chains; ++m) {
        const int idx = static_cast<int>(rem % k);
        rem /= k;
        w *= policy.stationaries[m](idx);
        v += model.weights[m].col(idx);
      }
      if (w > 0) state_term += w * cost.scale * cost.qtilde(v);
    }
    res.value = state_term + kl_term;
    return res;
  }

  std::mt19937_64 rng(mc_seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double acc = 0, acc2 = 0;
  for (int s = 0; s < mc_samples; ++s) {
    Vec v = Vec::Zero(model.dim());
    for (int m = 0; m < m_chains; ++m) {
      double cdf = 0;
      const double draw = u(rng);
      int idx = k - 1;
      for (int i = 0; i < k; ++i) {
        cdf += policy.stationaries[m](i);
        if (draw <= cdf) {
          idx = i;
          break;
        }
      }
      v += model.weights[m].col(idx);
    }
    const double val = cost.scale * cost.qtilde(v);
    acc += val;
    acc2 += val * val;
  }
  const double mean = acc / mc_samples;
  res.value = mean + kl_term;
  res.std_error = std::sqrt(std::max(0.0, acc2 / mc_samples - mean * mean) / mc_samples);
  res.exact = false;
  return res;
}

// ---------------------------------------------------------------------------
// VKL / AVKL coordinate descent

struct VklOptions {
  int max_outer = 50;
  double tol = 1e-6;            // relative objective improvement
  double eigen_tol = 1e-8;
  int eigen_max_iter = 100000;
  double stationary_tol = 1e-12;
  long marginalization_budget = 1000000;  // guard on K^(M-1) per VKL update
  long objective_cap = 4096;              // exact decomposed objective when K^M fits
};

namespace detail {

/// Solves the K-state KL subproblem for one chain. Costs may carry an
/// additive offset (e.g. other chains' contributions); shifting them to
/// min zero leaves the optimal law and stationary distribution unchanged.
inline void chain_subproblem(const Mat& uncontrolled, Vec q, const VklOptions& opt, Mat* law,
                             Vec* stationary) {
  const double shift = q.minCoeff();
  if (shift != 0.0) q.array() -= shift;
  klcore::KlProblem sub(uncontrolled, q, 1.0);
  auto sol = klcore::solve_power_iteration(sub, opt.eigen_tol, opt.eigen_max_iter);
  *law = sol.optimal_control;
  *stationary = klcore::stationary_distribution(*law, opt.stationary_tol);
}

/// AVKL surrogate objective: per-chain expected cost with the other
/// chains collapsed onto their stationary means (averaged over chains so
/// the state cost is counted once), plus the exact KL term.
inline double surrogate_objective(const fhmm::FactorialHmm& model, const LatentCostSpec& cost,
                                  const std::vector<Mat>& laws, const std::vector<Vec>& pis,
                                  long* evals) {
  const int m_chains = model.n_chains;
  const int k = model.n_values;
  std::vector<Vec> chain_means(m_chains);
  Vec total_mean = Vec::Zero(model.dim());
  for (int m = 0; m < m_chains; ++m) {
    chain_means[m] = model.weights[m] * pis[m];
    total_mean += chain_means[m];
  }
  double state_term = 0;
  for (int m = 0; m < m_chains; ++m) {
    const Vec others = total_mean - chain_means[m];
    double acc = 0;
    for (int i = 0; i < k; ++i) {
      acc += pis[m](i) * cost.scale * cost.qtilde(others + model.weights[m].col(i));
      if (evals) ++*evals;
    }
    state_term += acc;
  }
  state_term /= m_chains;
  double kl_term = 0;
  for (int m = 0; m < m_chains; ++m)
    for (int i = 0; i < k; ++i)
      kl_term += pis[m](i) * kl_divergence_row(laws[m].row(i).transpose(),
                                               model.transitions[m].row(i).transpose());
  return state_term + kl_term;
}

}  // namespace detail

enum class VklVariant { exact_marginalization, stationary_mean };

/// Coordinate descent over per-chain transition laws. Each chain update
/// solves a K-state eigenproblem against its marginal state cost:
/// exact_marginalization sums the cost over all configurations of the
/// other chains weighted by their stationary distributions (VKL);
/// stationary_mean replaces the other chains by their mean contribution
/// (AVKL), needing only K cost terms per chain.
inline FactoredPolicy solve_variational(const fhmm::FactorialHmm& model,
                                        const LatentCostSpec& cost, VklVariant variant,
                                        const VklOptions& opt = {}) {
  model.validate();
  const int m_chains = model.n_chains;
  const int k = model.n_values;
  const long n = detail::joint_count(model);

  if (variant == VklVariant::exact_marginalization) {
    const long per_update = n / k;  // K^(M-1)
    if (per_update > opt.marginalization_budget)
      throw BudgetExceeded("solve_vkl: K^(M-1) = " + std::to_string(per_update) +
                           " exceeds the marginalization budget");
  }

  FactoredPolicy pol;
  pol.solver = variant == VklVariant::exact_marginalization ? "vkl" : "avkl";
  pol.laws = model.transitions;
  pol.stationaries.resize(m_chains);
  for (int m = 0; m < m_chains; ++m)
    pol.stationaries[m] = klcore::stationary_distribution(pol.laws[m], opt.stationary_tol);

  const bool exact_obj = n <= opt.objective_cap;
  pol.trace_is_exact = exact_obj;
  auto objective = [&]() {
    if (exact_obj)
      return expected_cost(model, cost, pol, opt.objective_cap).value;
    // objective bookkeeping does not count toward the solver's
    // cost-evaluation totals
    return detail::surrogate_objective(model, cost, pol.laws, pol.stationaries, nullptr);
  };
  pol.objective_trace.push_back(objective());

  for (int outer = 0; outer < opt.max_outer; ++outer) {
    for (int m = 0; m < m_chains; ++m) {
      Vec q_m = Vec::Zero(k);
      if (variant == VklVariant::stationary_mean) {
        Vec others = Vec::Zero(model.dim());
        for (int i = 0; i < m_chains; ++i)
          if (i != m) others += model.weights[i] * pol.stationaries[i];
        for (int v = 0; v < k; ++v) {
          q_m(v) = cost.scale * cost.qtilde(others + model.weights[m].col(v));
          ++pol.cost_evaluations;
        }
      } else {
        // enumerate the other chains' configurations with product weights
        std::vector<int> idx(m_chains, 0);
        const long combos = n / k;
        for (long c = 0; c < combos; ++c) {
          long rem = c;
          double w = 1.0;
          Vec others = Vec::Zero(model.dim());
          for (int i = 0; i < m_chains; ++i) {
            if (i == m) continue;
            const int vi = static_cast<int>(rem % k);
            rem /= k;
            w *= pol.stationaries[i](vi);
            others += model.weights[i].col(vi);
          }
          if (w == 0.0) continue;
          for (int v = 0; v < k; ++v) {
            q_m(v) += w * cost.scale * cost.qtilde(others + model.weights[m].col(v));
            ++pol.cost_evaluations;
          }
        }
      }
      detail::chain_subproblem(model.transitions[m], q_m, opt, &pol.laws[m],
                               &pol.stationaries[m]);
    }
    const double obj = objective();
    const double prev = pol.objective_trace.back();
    pol.objective_trace.push_back(obj);
    pol.outer_iterations = outer + 1;
    if (obj > prev + 1e-8 * std::max(1.0, std::abs(prev)))
      throw CostIncrease(pol.solver + ": objective rose from " + std::to_string(prev) + " to " +
                         std::to_string(obj));
    if (prev - obj < opt.tol * std::max(1.0, std::abs(obj))) break;
  }
  pol.expected_cost = expected_cost(model, cost, pol, opt.objective_cap).value;
  return pol;
}

inline FactoredPolicy solve_vkl(const fhmm::FactorialHmm& model, const LatentCostSpec& cost,
                                const VklOptions& opt = {}) {
  return solve_variational(model, cost, VklVariant::exact_marginalization, opt);
}

inline FactoredPolicy solve_avkl(const fhmm::FactorialHmm& model, const LatentCostSpec& cost,
                                 const VklOptions& opt = {}) {
  return solve_variational(model, cost, VklVariant::stationary_mean, opt);
}

// ---------------------------------------------------------------------------
// Observed-space control with sampled predictive means

struct FhmmControlResult {
  Vec tau;
  std::vector<Vec> marginals;    // u^(m)(x_t | window)
  std::vector<Vec> next_anchor;  // filtered estimate at the window start
  Vec ybar_u;
  Vec ybar_p;
};

/// Draws a value index by inverse CDF; the same uniform drives the
/// controlled and uncontrolled draws (common random numbers), so equal
/// laws produce exactly equal samples.
inline int categorical_from_uniform(const Vec& p, double u) {
  double cdf = 0;
  for (int i = 0; i < p.size(); ++i) {
    cdf += p(i);
    if (u <= cdf) return i;
  }
  return static_cast<int>(p.size()) - 1;
}

/// One control step: windowed mean-field filtering under the controlled
/// laws, one-step propagation of each chain under u_ap and under P, then
/// tau = K (ybar_u - ybar_p) with both predictive means estimated from L
/// paired samples.
inline FhmmControlResult control_step_fhmm(const fhmm::FactorialHmm& model,
                                           const FactoredPolicy& policy,
                                           const std::vector<Vec>* filter_anchor,
                                           const Mat& window, const Mat& gain, int n_samples,
                                           std::uint64_t seed, const fhmm::SmfOptions& opt = {}) {
  if (n_samples < 1) throw InvalidModel("control_step_fhmm: need at least one sample");
  auto filt = fhmm::windowed_filter(model, policy.laws, filter_anchor, window, opt);

  FhmmControlResult res;
  res.marginals = filt.final_marginals;
  res.next_anchor = filt.next_anchor;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  res.ybar_u = Vec::Zero(model.dim());
  res.ybar_p = Vec::Zero(model.dim());
  for (int m = 0; m < model.n_chains; ++m) {
    const Vec rho_u = policy.laws[m].transpose() * filt.final_marginals[m];
    const Vec rho_p = model.transitions[m].transpose() * filt.final_marginals[m];
    for (int s = 0; s < n_samples; ++s) {
      const double u = uni(rng);
      res.ybar_u += model.weights[m].col(categorical_from_uniform(rho_u, u));
      res.ybar_p += model.weights[m].col(categorical_from_uniform(rho_p, u));
    }
  }
  res.ybar_u /= n_samples;
  res.ybar_p /= n_samples;
  res.tau = gain * (res.ybar_u - res.ybar_p);
  return res;
}

/// Stateful wrapper around control_step_fhmm that maintains the sliding
/// observation window and the factored anchor across an episode.
struct FhmmController {
  fhmm::FactorialHmm model;
  FactoredPolicy policy;
  Mat gain;
  int window_cap = 2;
  int n_samples = 100;
  fhmm::SmfOptions filter_opts;
  std::uint64_t seed = 0;

  std::deque<Vec> buffer;
  std::vector<Vec> anchor;
  bool have_anchor = false;
  std::vector<Vec> pending_anchor;
  long step_count = 0;

  Vec step(const Vec& observation) {
    buffer.push_back(observation);
    if (static_cast<int>(buffer.size()) > window_cap) {
      buffer.pop_front();
      anchor = pending_anchor;  // filtered estimate at the dropped position
      have_anchor = true;
    }
    Mat window(buffer.size(), model.dim());
    for (std::size_t i = 0; i < buffer.size(); ++i) window.row(i) = buffer[i].transpose();
    auto res = control_step_fhmm(model, policy, have_anchor ? &anchor : nullptr, window, gain,
                                 n_samples, derive_seed(seed, static_cast<std::uint64_t>(step_count)),
                                 filter_opts);
    ++step_count;
    pending_anchor = res.next_anchor;
    return res.tau;
  }
};

/// Exact-control counterpart for the flattened joint chain: Bayes filter
/// and predictive means on K^M states, with the optimal law applied
/// through z and the Kronecker structure, so nothing K^M x K^M is ever
/// formed. u*^T w = z .* P^T (w ./ P z) up to normalization.
struct ExactFhmmController {
  fhmm::FactorialHmm model;
  LatentCostSpec cost;
  Vec desirability;
  Mat gain;

  Vec log_g;      // -q over joint states
  Mat means;      // joint emission means
  Mat inv_cov;
  double log_norm = 0;
  Vec filter;
  Vec initial;
  bool initialized = false;

  ExactFhmmController(fhmm::FactorialHmm m, LatentCostSpec c, Vec z, Mat k_gain)
      : model(std::move(m)), cost(std::move(c)), desirability(std::move(z)),
        gain(std::move(k_gain)) {
    const long n = detail::joint_count(model);
    means = detail::joint_means(model);
    Eigen::LLT<Mat> llt(model.obs_cov);
    inv_cov = llt.solve(Mat::Identity(model.dim(), model.dim()));
    double logdet = 0;
    for (int i = 0; i < model.dim(); ++i) logdet += 2.0 * std::log(Mat(llt.matrixL())(i, i));
    log_norm = -0.5 * (model.dim() * std::log(2.0 * M_PI) + logdet);
    initial.resize(n);
    for (long j = 0; j < n; ++j) {
      long rem = j;
      double p = 1.0;
      for (int m2 = 0; m2 < model.n_chains; ++m2) {
        p *= model.initials[m2](rem % model.n_values);
        rem /= model.n_values;
      }
      initial(j) = p;
    }
  }

  Vec log_emission(const Vec& y) const {
    Vec lb(means.rows());
    for (Eigen::Index j = 0; j < means.rows(); ++j) {
      const Vec d = y - means.row(j).transpose();
      lb(j) = log_norm - 0.5 * d.dot(inv_cov * d);
    }
    return lb;
  }

  Vec apply_p(const Vec& v, bool transpose) const {
    return detail::apply_chain_kronecker(model.transitions, v, model.n_values, transpose);
  }

  Vec step(const Vec& observation) {
    const Vec lb = log_emission(observation);
    const Vec b = (lb.array() - lb.maxCoeff()).exp();
    Vec w;
    if (!initialized) {
      w = b.cwiseProduct(initial);
      initialized = true;
    } else {
      const Vec pz = apply_p(desirability, false);
      Vec ratio(filter.size());
      for (Eigen::Index i = 0; i < filter.size(); ++i)
        ratio(i) = pz(i) > 0 ? filter(i) / pz(i) : 0.0;
      const Vec pred_u = desirability.cwiseProduct(apply_p(ratio, true));
      w = b.cwiseProduct(pred_u);
    }
    const double norm = w.sum();
    if (!(norm > 0)) throw ZeroLikelihood("ExactFhmmController: zero posterior mass");
    filter = w / norm;

    const Vec pz = apply_p(desirability, false);
    Vec ratio(filter.size());
    for (Eigen::Index i = 0; i < filter.size(); ++i)
      ratio(i) = pz(i) > 0 ? filter(i) / pz(i) : 0.0;
    Vec pred_u = desirability.cwiseProduct(apply_p(ratio, true));
    pred_u /= pred_u.sum();
    const Vec pred_p = apply_p(filter, true);
    const Vec ybar_u = means.transpose() * pred_u;
    const Vec ybar_p = means.transpose() * pred_p;
    return gain * (ybar_u - ybar_p);
  }
};

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const FactoredPolicy& p) {
  json laws = json::array(), pis = json::array(), trace = json::array();
  for (const auto& l : p.laws) laws.push_back(matrix_to_json(l));
  for (const auto& s : p.stationaries) pis.push_back(vector_to_json(s));
  for (double v : p.objective_trace) trace.push_back(v);
  return json{{"format", "lkc.factored_policy"},
              {"version", 1},
              {"laws", laws},
              {"stationaries", pis},
              {"expected_cost", p.expected_cost},
              {"solver", p.solver},
              {"outer_iterations", p.outer_iterations},
              {"objective_trace", trace},
              {"trace_is_exact", p.trace_is_exact},
              {"cost_evaluations", p.cost_evaluations}};
}

inline FactoredPolicy factored_policy_from_json(const json& j) {
  expect_format(j, "lkc.factored_policy", 1);
  FactoredPolicy p;
  for (const auto& l : j.at("laws")) p.laws.push_back(matrix_from_json(l));
  for (const auto& s : j.at("stationaries")) p.stationaries.push_back(vector_from_json(s));
  p.expected_cost = j.at("expected_cost").get<double>();
  p.solver = j.at("solver").get<std::string>();
  p.outer_iterations = j.at("outer_iterations").get<int>();
  for (const auto& v : j.at("objective_trace")) p.objective_trace.push_back(v.get<double>());
  p.trace_is_exact = j.at("trace_is_exact").get<bool>();
  p.cost_evaluations = j.at("cost_evaluations").get<long>();
  return p;
}

}  // namespace lkc::fhmmctl
