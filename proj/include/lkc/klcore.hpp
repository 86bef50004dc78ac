#pragma once

// Discrete KL-control problems in the infinite-horizon average-cost
// setting. The controlled process pays alpha*q(x) per step plus the KL
// divergence of its transition law from the uncontrolled law P. The
// optimal exponentiated cost-to-go z is the principal eigenvector of
// G*P with G = diag(exp(-alpha*q)), and the optimal law tilts P by z.

#include <lkc/common.hpp>
#include <lkc/serialize.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

namespace lkc::klcore {

// ---------------------------------------------------------------------------
// Ergodicity analysis

struct CommClass {
  std::vector<int> states;
  bool closed = false;  // no transitions leave the class
};

struct ErgodicityReport {
  bool ergodic = false;
  std::vector<CommClass> classes;
  std::vector<int> transient_states;  // states outside every closed class
};

namespace detail {

/// Iterative Tarjan SCC over the directed graph of nonzero transitions.
inline std::vector<std::vector<int>> strongly_connected_components(const Mat& t) {
  const int n = static_cast<int>(t.rows());
  std::vector<std::vector<int>> adj(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (t(i, j) > 0.0) adj[i].push_back(j);

  std::vector<int> index(n, -1), low(n, 0);
  std::vector<bool> on_stack(n, false);
  std::vector<int> stack;
  std::vector<std::vector<int>> comps;
  int counter = 0;

  struct Frame { int v; std::size_t edge; };
  for (int root = 0; root < n; ++root) {
    if (index[root] != -1) continue;
    std::vector<Frame> call;
    call.push_back({root, 0});
    index[root] = low[root] = counter++;
    stack.push_back(root);
    on_stack[root] = true;
    while (!call.empty()) {
      Frame& f = call.back();
      if (f.edge < adj[f.v].size()) {
        int w = adj[f.v][f.edge++];
        if (index[w] == -1) {
          index[w] = low[w] = counter++;
          stack.push_back(w);
          on_stack[w] = true;
          call.push_back({w, 0});
        } else if (on_stack[w]) {
          low[f.v] = std::min(low[f.v], index[w]);
        }
      } else {
        if (low[f.v] == index[f.v]) {
          std::vector<int> comp;
          for (;;) {
            int w = stack.back();
            stack.pop_back();
            on_stack[w] = false;
            comp.push_back(w);
            if (w == f.v) break;
          }
          std::sort(comp.begin(), comp.end());
          comps.push_back(std::move(comp));
        }
        int v = f.v;
        call.pop_back();
        if (!call.empty()) low[call.back().v] = std::min(low[call.back().v], low[v]);
      }
    }
  }
  return comps;
}

}  // namespace detail

/// A chain is accepted as ergodic when its nonzero-transition digraph has
/// exactly one recurrent (closed) communicating class. Transient states
/// and states unreachable from the recurrent class are reported.
inline ErgodicityReport check_ergodic(const Mat& transition) {
  ErgodicityReport rep;
  const int n = static_cast<int>(transition.rows());
  if (n == 0) return rep;
  auto comps = detail::strongly_connected_components(transition);

  std::vector<int> comp_of(n, -1);
  for (std::size_t c = 0; c < comps.size(); ++c)
    for (int v : comps[c]) comp_of[v] = static_cast<int>(c);

  int n_closed = 0;
  int closed_idx = -1;
  for (std::size_t c = 0; c < comps.size(); ++c) {
    CommClass cc;
    cc.states = comps[c];
    cc.closed = true;
    for (int v : comps[c])
      for (int j = 0; j < n; ++j)
        if (transition(v, j) > 0.0 && comp_of[j] != static_cast<int>(c)) cc.closed = false;
    if (cc.closed) {
      ++n_closed;
      closed_idx = static_cast<int>(c);
    }
    rep.classes.push_back(std::move(cc));
  }
  for (std::size_t c = 0; c < comps.size(); ++c)
    if (!rep.classes[c].closed)
      for (int v : comps[c]) rep.transient_states.push_back(v);
  std::sort(rep.transient_states.begin(), rep.transient_states.end());

  // every state drains into some closed class, so a unique closed class
  // makes the limit distribution independent of the start state
  rep.ergodic = (n_closed == 1);
  (void)closed_idx;
  return rep;
}

// ---------------------------------------------------------------------------
// Problem and solution types

/// Discrete KL-control problem: uncontrolled law P, state cost q >= 0 and
/// cost scale alpha. Forbidden states are tracked with a mask instead of
/// infinite costs so that exp(-alpha*q) stays NaN-free; their G entry is
/// exactly zero.
struct KlProblem {
  int n_states = 0;
  Mat uncontrolled;                // N x N, row-stochastic
  Vec state_cost;                  // length N, >= 0
  double cost_scale = 1.0;         // alpha
  std::vector<bool> forbidden;     // default: none

  KlProblem() = default;
  KlProblem(Mat p, Vec q, double alpha)
      : n_states(static_cast<int>(p.rows())),
        uncontrolled(std::move(p)),
        state_cost(std::move(q)),
        cost_scale(alpha),
        forbidden(static_cast<std::size_t>(n_states), false) {}

  /// Diagonal of G = exp(-alpha q), zero on forbidden states.
  Vec g_diagonal() const {
    Vec g(n_states);
    for (int i = 0; i < n_states; ++i)
      g(i) = forbidden[static_cast<std::size_t>(i)] ? 0.0 : std::exp(-cost_scale * state_cost(i));
    return g;
  }

  void validate() const {
    if (n_states <= 0 || uncontrolled.rows() != n_states || uncontrolled.cols() != n_states ||
        state_cost.size() != n_states || static_cast<int>(forbidden.size()) != n_states)
      throw InvalidModel("KlProblem: inconsistent dimensions");
    if (cost_scale < 0) throw InvalidModel("KlProblem: cost_scale must be >= 0");
    for (int i = 0; i < n_states; ++i) {
      double row = 0;
      for (int j = 0; j < n_states; ++j) {
        const double p = uncontrolled(i, j);
        if (p < 0.0 || p > 1.0) throw InvalidModel("KlProblem: transition entry outside [0,1]");
        row += p;
      }
      if (std::abs(row - 1.0) > 1e-12) throw InvalidModel("KlProblem: row does not sum to 1");
      if (!forbidden[static_cast<std::size_t>(i)] && state_cost(i) < 0)
        throw InvalidModel("KlProblem: negative state cost");
    }
    // single recurrent class among non-forbidden states
    std::vector<int> keep;
    for (int i = 0; i < n_states; ++i)
      if (!forbidden[static_cast<std::size_t>(i)]) keep.push_back(i);
    if (keep.empty()) throw DegenerateProblem("KlProblem: all states forbidden");
    Mat sub(keep.size(), keep.size());
    for (std::size_t a = 0; a < keep.size(); ++a)
      for (std::size_t b = 0; b < keep.size(); ++b) sub(a, b) = uncontrolled(keep[a], keep[b]);
    int n_closed = 0;
    for (const auto& cc : check_ergodic(sub).classes) n_closed += cc.closed ? 1 : 0;
    if (n_closed != 1)
      throw InvalidModel("KlProblem: non-forbidden chain lacks a unique recurrent class");
  }
};

/// Result of solving a KlProblem. `dead_end_rows` marks states whose
/// desirability-weighted successor mass vanished; their control row falls
/// back to the uncontrolled law.
struct KlSolution {
  Vec desirability;        // z*, normalized to max entry 1
  double eigenvalue = 0;   // lambda in (0, 1]
  double average_cost = 0; // -ln lambda
  Mat optimal_control;     // u*(x'|x); may be empty for very large problems
  Vec cost_to_go;          // -ln z, +inf where z == 0
  int iterations = 0;
  double residual = 0;     // final ||lambda z - G P z||_inf / ||z||_inf
  std::vector<int> dead_end_rows;
};

// ---------------------------------------------------------------------------
// Solvers

/// Power iteration on an abstract operator v -> A v with max-entry
/// normalization. Convergence is declared when successive normalized
/// iterates differ by less than tol in the infinity norm.
struct PowerIterationResult {
  Vec vector;
  double eigenvalue = 0;
  int iterations = 0;
  double residual = 0;
  bool converged = false;
};

inline PowerIterationResult power_iteration(const std::function<Vec(const Vec&)>& apply, int n,
                                            double tol, int max_iter) {
  Vec z = Vec::Ones(n);
  double lambda = 0;
  int it = 0;
  bool converged = false;
  for (; it < max_iter; ++it) {
    Vec w = apply(z);
    const double m = w.maxCoeff();
    if (!(m > 0.0)) throw DegenerateProblem("power iteration: operator image vanished");
    lambda = m / z.maxCoeff();
    Vec z_next = w / m;
    const double diff = (z_next - z).cwiseAbs().maxCoeff();
    z = std::move(z_next);
    if (diff < tol) {
      converged = true;
      ++it;
      break;
    }
  }
  PowerIterationResult res;
  res.vector = z;
  res.eigenvalue = lambda;
  res.iterations = it;
  res.residual = (lambda * z - apply(z)).cwiseAbs().maxCoeff() / z.cwiseAbs().maxCoeff();
  res.converged = converged;
  return res;
}

/// Optimal transition law from a desirability vector:
/// u*(x'|x) = p(x'|x) z(x') / sum_x'' p(x''|x) z(x'').
/// Rows whose normalizer vanishes are dead ends under z; they keep the
/// uncontrolled row and are reported. A dead end that is reachable from
/// the support of z signals an inconsistent z and raises ZeroNormalizer.
inline Mat optimal_control_from_z(const KlProblem& problem, const Vec& z,
                                  std::vector<int>* dead_end_rows = nullptr) {
  const int n = problem.n_states;
  if (z.size() != n) throw InvalidModel("optimal_control_from_z: size mismatch");
  if (z.minCoeff() < 0 || z.maxCoeff() <= 0)
    throw InvalidModel("optimal_control_from_z: z must be nonnegative and not identically zero");

  Mat u(n, n);
  std::vector<int> dead;
  for (int i = 0; i < n; ++i) {
    double norm = 0;
    for (int j = 0; j < n; ++j) norm += problem.uncontrolled(i, j) * z(j);
    if (norm > 0) {
      for (int j = 0; j < n; ++j) u(i, j) = problem.uncontrolled(i, j) * z(j) / norm;
    } else {
      u.row(i) = problem.uncontrolled.row(i);
      dead.push_back(i);
    }
  }
  if (!dead.empty()) {
    // reachable = reachable under P from the support of z
    std::vector<bool> reach(n, false);
    std::vector<int> todo;
    for (int i = 0; i < n; ++i)
      if (z(i) > 0) {
        reach[i] = true;
        todo.push_back(i);
      }
    while (!todo.empty()) {
      int v = todo.back();
      todo.pop_back();
      for (int j = 0; j < n; ++j)
        if (problem.uncontrolled(v, j) > 0 && !reach[j]) {
          reach[j] = true;
          todo.push_back(j);
        }
    }
    for (int i : dead)
      if (reach[i])
        throw ZeroNormalizer("optimal_control_from_z: zero successor mass at reachable state " +
                             std::to_string(i) + " (z is not a principal eigenvector?)");
  }
  if (dead_end_rows) *dead_end_rows = std::move(dead);
  return u;
}

/// Solves the eigenproblem lambda z = G P z by power iteration and
/// assembles the full solution.
inline KlSolution solve_power_iteration(const KlProblem& problem, double tol = 1e-8,
                                        int max_iter = 100000) {
  problem.validate();
  if (tol <= 0 || max_iter < 1) throw InvalidModel("solve_power_iteration: bad tol/max_iter");
  const Vec g = problem.g_diagonal();
  if (g.maxCoeff() <= 0.0) throw DegenerateProblem("solve_power_iteration: G P is identically zero");

  auto apply = [&](const Vec& z) -> Vec { return g.asDiagonal() * (problem.uncontrolled * z); };
  PowerIterationResult pi = power_iteration(apply, problem.n_states, tol, max_iter);
  if (!pi.converged && pi.residual > tol)
    throw NonConvergence("solve_power_iteration: residual " + std::to_string(pi.residual) +
                         " after " + std::to_string(pi.iterations) + " iterations");

  KlSolution sol;
  sol.desirability = pi.vector;
  sol.eigenvalue = pi.eigenvalue;
  sol.average_cost = -std::log(pi.eigenvalue);
  sol.iterations = pi.iterations;
  sol.residual = pi.residual;
  sol.cost_to_go = Vec(problem.n_states);
  for (int i = 0; i < problem.n_states; ++i)
    sol.cost_to_go(i) = pi.vector(i) > 0 ? -std::log(pi.vector(i))
                                         : std::numeric_limits<double>::infinity();
  sol.optimal_control = optimal_control_from_z(problem, pi.vector, &sol.dead_end_rows);
  return sol;
}

// ---------------------------------------------------------------------------
// Policy evaluation

/// Stationary distribution of a row-stochastic matrix with a unique
/// recurrent class: transient states get mass zero, the recurrent class is
/// solved by power iteration on the transpose (dense solve as fallback for
/// small chains, which also covers periodic recurrent classes).
inline Vec stationary_distribution(const Mat& transition, double tol = 1e-12,
                                   int max_iter = 200000, int dense_fallback_limit = 200) {
  const int n = static_cast<int>(transition.rows());
  auto rep = check_ergodic(transition);
  int closed = -1;
  int n_closed = 0;
  for (std::size_t c = 0; c < rep.classes.size(); ++c)
    if (rep.classes[c].closed) {
      ++n_closed;
      closed = static_cast<int>(c);
    }
  if (n_closed != 1)
    throw NonErgodicPolicy("stationary_distribution: " + std::to_string(n_closed) +
                           " recurrent classes");
  const auto& rec = rep.classes[closed].states;
  const int m = static_cast<int>(rec.size());
  Mat sub(m, m);
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b) sub(a, b) = transition(rec[a], rec[b]);

  Vec pi_sub;
  bool ok = false;
  {
    Vec mu = Vec::Constant(m, 1.0 / m);
    for (int it = 0; it < max_iter; ++it) {
      Vec nu = sub.transpose() * mu;
      nu /= nu.sum();
      const double diff = (nu - mu).cwiseAbs().maxCoeff();
      mu = nu;
      if (diff < tol) {
        ok = true;
        break;
      }
    }
    pi_sub = mu;
  }
  if (!ok) {
    if (m > dense_fallback_limit)
      throw NonErgodicPolicy("stationary_distribution: power iteration failed on large chain");
    // solve pi (P - I) = 0 with sum(pi) = 1 via a replaced equation
    Mat a = sub.transpose() - Mat::Identity(m, m);
    a.row(m - 1).setOnes();
    Vec b = Vec::Zero(m);
    b(m - 1) = 1.0;
    pi_sub = a.fullPivLu().solve(b);
    if ((a * pi_sub - b).cwiseAbs().maxCoeff() > 1e-9 || pi_sub.minCoeff() < -1e-12)
      throw NonErgodicPolicy("stationary_distribution: singular stationary system");
    pi_sub = pi_sub.cwiseMax(0.0);
    pi_sub /= pi_sub.sum();
  }
  Vec pi = Vec::Zero(n);
  for (int a = 0; a < m; ++a) pi(rec[a]) = pi_sub(a);
  return pi;
}

/// Average cost sum_x Pi(x) [alpha q(x) + KL(policy(.|x) || P(.|x))] of a
/// stationary Markov policy that rides on the uncontrolled support.
inline double average_cost_of_policy(const KlProblem& problem, const Mat& policy,
                                     double stationary_tol = 1e-12) {
  const int n = problem.n_states;
  if (policy.rows() != n || policy.cols() != n)
    throw InvalidModel("average_cost_of_policy: size mismatch");
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (policy(i, j) > 0 && problem.uncontrolled(i, j) == 0)
        throw NotAbsolutelyContinuous("average_cost_of_policy: policy leaves the support of P at (" +
                                      std::to_string(i) + "," + std::to_string(j) + ")");
  const Vec pi = stationary_distribution(policy, stationary_tol);
  double cost = 0;
  for (int i = 0; i < n; ++i) {
    if (pi(i) == 0) continue;
    if (problem.forbidden[static_cast<std::size_t>(i)])
      return std::numeric_limits<double>::infinity();
    double kl = 0;
    for (int j = 0; j < n; ++j)
      if (policy(i, j) > 0) kl += policy(i, j) * std::log(policy(i, j) / problem.uncontrolled(i, j));
    cost += pi(i) * (problem.cost_scale * problem.state_cost(i) + kl);
  }
  return cost;
}

// ---------------------------------------------------------------------------
// Value-iteration baseline on a fully discretized problem

/// Conventional MDP with explicit actions, used as the comparison baseline.
/// Transitions are stored sparsely per action.
struct ViProblem {
  int n_states = 0;
  int n_actions = 0;
  // transition[a] holds, for each state, the (successor, probability) list
  std::vector<std::vector<std::vector<std::pair<int, double>>>> transition;
  Mat immediate_cost;  // N x A

  void validate() const {
    if (n_states <= 0 || n_actions <= 0 ||
        static_cast<int>(transition.size()) != n_actions ||
        immediate_cost.rows() != n_states || immediate_cost.cols() != n_actions)
      throw InvalidModel("ViProblem: inconsistent dimensions");
    for (int a = 0; a < n_actions; ++a) {
      if (static_cast<int>(transition[a].size()) != n_states)
        throw InvalidModel("ViProblem: transition table size mismatch");
      for (int s = 0; s < n_states; ++s) {
        double sum = 0;
        for (auto [t, p] : transition[a][s]) {
          if (t < 0 || t >= n_states || p < 0) throw InvalidModel("ViProblem: bad transition entry");
          sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-12)
          throw InvalidModel("ViProblem: transition slice does not sum to 1");
      }
    }
  }
};

struct ViSolution {
  Vec value;                 // relative value, zero at the reference state
  std::vector<int> policy;   // greedy action per state, lowest index wins ties
  double average_cost = 0;
  int iterations = 0;
  double span = 0;
};

/// Relative value iteration for the average-cost criterion: iterate the
/// Bellman operator, re-anchor at state 0, stop when the span seminorm of
/// successive differences drops below tol.
inline ViSolution solve_value_iteration(const ViProblem& problem, double tol = 1e-8,
                                        int max_iter = 1000000) {
  problem.validate();
  if (tol <= 0) throw InvalidModel("solve_value_iteration: tol must be positive");
  const int n = problem.n_states;
  const int na = problem.n_actions;
  Vec h = Vec::Zero(n);
  Vec th(n), qa(n);
  ViSolution sol;
  sol.policy.assign(n, 0);
  bool converged = false;
  int it = 0;
  for (; it < max_iter; ++it) {
    for (int a = 0; a < na; ++a) {
      for (int s = 0; s < n; ++s) {
        double v = problem.immediate_cost(s, a);
        for (auto [t, p] : problem.transition[a][s]) v += p * h(t);
        qa(s) = v;
      }
      if (a == 0) {
        th = qa;
        for (int s = 0; s < n; ++s) sol.policy[s] = 0;
      } else {
        for (int s = 0; s < n; ++s)
          if (qa(s) < th(s)) {
            th(s) = qa(s);
            sol.policy[s] = a;
          }
      }
    }
    Vec diff = th - h;
    const double hi = diff.maxCoeff(), lo = diff.minCoeff();
    sol.span = hi - lo;
    sol.average_cost = 0.5 * (hi + lo);
    h = th.array() - th(0);
    if (sol.span < tol) {
      converged = true;
      ++it;
      break;
    }
  }
  if (!converged)
    throw NonConvergence("solve_value_iteration: span " + std::to_string(sol.span) + " after " +
                         std::to_string(it) + " sweeps");
  sol.value = h;
  sol.iterations = it;
  return sol;
}

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const KlProblem& p) {
  json forb = json::array();
  for (bool b : p.forbidden) forb.push_back(b);
  return json{{"format", "lkc.klproblem"},
              {"version", 1},
              {"n_states", p.n_states},
              {"uncontrolled", matrix_to_json(p.uncontrolled)},
              {"state_cost", vector_to_json(p.state_cost)},
              {"cost_scale", p.cost_scale},
              {"forbidden", forb}};
}

inline KlProblem klproblem_from_json(const json& j) {
  expect_format(j, "lkc.klproblem", 1);
  KlProblem p;
  p.n_states = j.at("n_states").get<int>();
  p.uncontrolled = matrix_from_json(j.at("uncontrolled"));
  p.state_cost = vector_from_json(j.at("state_cost"));
  p.cost_scale = j.at("cost_scale").get<double>();
  p.forbidden.clear();
  for (const auto& b : j.at("forbidden")) p.forbidden.push_back(b.get<bool>());
  return p;
}

inline json to_json(const KlSolution& s) {
  json j{{"format", "lkc.klsolution"},
         {"version", 1},
         {"desirability", vector_to_json(s.desirability)},
         {"eigenvalue", s.eigenvalue},
         {"average_cost", s.average_cost},
         {"cost_to_go", vector_to_json(s.cost_to_go)},
         {"iterations", s.iterations},
         {"residual", s.residual},
         {"dead_end_rows", s.dead_end_rows}};
  if (s.optimal_control.size() > 0) j["optimal_control"] = matrix_to_json(s.optimal_control);
  return j;
}

inline KlSolution klsolution_from_json(const json& j) {
  expect_format(j, "lkc.klsolution", 1);
  KlSolution s;
  s.desirability = vector_from_json(j.at("desirability"));
  s.eigenvalue = j.at("eigenvalue").get<double>();
  s.average_cost = j.at("average_cost").get<double>();
  s.cost_to_go = vector_from_json(j.at("cost_to_go"));
  s.iterations = j.at("iterations").get<int>();
  s.residual = j.at("residual").get<double>();
  s.dead_end_rows = j.at("dead_end_rows").get<std::vector<int>>();
  if (j.contains("optimal_control")) s.optimal_control = matrix_from_json(j.at("optimal_control"));
  return s;
}

}  // namespace lkc::klcore
