#pragma once

// Independent reference implementations used only from tests. These stay
// deliberately naive (dense eigendecomposition, enumeration, quadrature,
// Monte Carlo) so they do not share a code path with the library.

#include <lkc/common.hpp>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace oracles {

using lkc::Mat;
using lkc::Vec;

/// Principal (largest real eigenvalue) eigenpair of a general nonnegative
/// matrix via Eigen's dense solver; eigenvector sign-fixed and scaled to
/// max entry 1.
inline std::pair<double, Vec> principal_eigenpair(const Mat& a) {
  Eigen::EigenSolver<Mat> es(a);
  int best = -1;
  double best_re = -1e300;
  for (int i = 0; i < a.rows(); ++i) {
    const auto ev = es.eigenvalues()(i);
    if (std::abs(ev.imag()) < 1e-9 && ev.real() > best_re) {
      best_re = ev.real();
      best = i;
    }
  }
  Vec v = es.eigenvectors().col(best).real();
  if (v.sum() < 0) v = -v;
  v /= v.maxCoeff();
  return {best_re, v};
}

/// Kosaraju SCC, independent of the library's Tarjan implementation.
inline std::vector<std::vector<int>> scc_kosaraju(const Mat& t) {
  const int n = static_cast<int>(t.rows());
  std::vector<std::vector<int>> adj(n), radj(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (t(i, j) > 0) {
        adj[i].push_back(j);
        radj[j].push_back(i);
      }
  std::vector<int> order;
  std::vector<bool> seen(n, false);
  std::function<void(int)> dfs1 = [&](int v) {
    seen[v] = true;
    for (int w : adj[v])
      if (!seen[w]) dfs1(w);
    order.push_back(v);
  };
  for (int i = 0; i < n; ++i)
    if (!seen[i]) dfs1(i);
  std::vector<std::vector<int>> comps;
  std::fill(seen.begin(), seen.end(), false);
  std::function<void(int, std::vector<int>&)> dfs2 = [&](int v, std::vector<int>& comp) {
    seen[v] = true;
    comp.push_back(v);
    for (int w : radj[v])
      if (!seen[w]) dfs2(w, comp);
  };
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!seen[*it]) {
      comps.emplace_back();
      dfs2(*it, comps.back());
      std::sort(comps.back().begin(), comps.back().end());
    }
  return comps;
}

/// Stationary distribution by dense solve of pi P = pi, sum(pi) = 1.
inline Vec stationary_dense(const Mat& p) {
  const int n = static_cast<int>(p.rows());
  Mat a = p.transpose() - Mat::Identity(n, n);
  a.row(n - 1).setOnes();
  Vec b = Vec::Zero(n);
  b(n - 1) = 1.0;
  return a.fullPivLu().solve(b);
}

/// Gauss-Hermite nodes and weights for the weight function exp(-x^2),
/// from the Golub-Welsch eigen decomposition of the Jacobi matrix.
inline void gauss_hermite(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  Mat j = Mat::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double b = std::sqrt(i / 2.0);
    j(i - 1, i) = b;
    j(i, i - 1) = b;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(j);
  nodes.resize(n);
  weights.resize(n);
  const double sqrt_pi = std::sqrt(M_PI);
  for (int i = 0; i < n; ++i) {
    nodes[i] = es.eigenvalues()(i);
    const double v0 = es.eigenvectors()(0, i);
    weights[i] = sqrt_pi * v0 * v0;
  }
}

/// Integral of f against a Gaussian N(mu, cov) by tensorized Gauss-Hermite
/// quadrature (D = 1 or 2).
template <typename F>
double gauss_expectation(const F& f, const Vec& mu, const Mat& cov, int n_nodes = 40) {
  std::vector<double> x, w;
  gauss_hermite(n_nodes, x, w);
  const Eigen::LLT<Mat> llt(cov);
  const Mat l = llt.matrixL();
  const int d = static_cast<int>(mu.size());
  double total = 0;
  if (d == 1) {
    for (int i = 0; i < n_nodes; ++i) {
      Vec y = mu + std::sqrt(2.0) * l * Vec::Constant(1, x[i]);
      total += w[i] * f(y);
    }
    return total / std::sqrt(M_PI);
  }
  for (int i = 0; i < n_nodes; ++i)
    for (int j = 0; j < n_nodes; ++j) {
      Vec u(2);
      u << x[i], x[j];
      Vec y = mu + std::sqrt(2.0) * l * u;
      total += w[i] * w[j] * f(y);
    }
  return total / M_PI;
}

/// Row-stochastic matrix with i.i.d. uniform entries; strictly positive,
/// hence ergodic.
inline Mat random_stochastic(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Mat p(n, n);
  for (int i = 0; i < n; ++i) {
    double s = 0;
    for (int j = 0; j < n; ++j) {
      p(i, j) = u(rng);
      s += p(i, j);
    }
    p.row(i) /= s;
  }
  return p;
}

/// Draws an index from a discrete distribution using one uniform variate.
inline int sample_categorical(const Vec& p, double u) {
  double acc = 0;
  for (int i = 0; i < p.size(); ++i) {
    acc += p(i);
    if (u <= acc) return i;
  }
  return static_cast<int>(p.size()) - 1;
}

/// Generates (observations, hidden path) from a Gaussian HMM given as raw
/// parameters; the generator is the ground-truth oracle for EM recovery
/// tests.
inline std::pair<Mat, std::vector<int>> sample_gaussian_hmm(const Mat& transition, const Mat& means,
                                                            const std::vector<Mat>& covs,
                                                            const Vec& initial, int t_len,
                                                            std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  const int d = static_cast<int>(means.cols());
  std::vector<Eigen::LLT<Mat>> llt;
  for (const auto& c : covs) llt.emplace_back(c);
  Mat obs(t_len, d);
  std::vector<int> path(t_len);
  int x = sample_categorical(initial, u(rng));
  for (int t = 0; t < t_len; ++t) {
    path[t] = x;
    Vec eta(d);
    for (int i = 0; i < d; ++i) eta(i) = g(rng);
    obs.row(t) = (means.row(x).transpose() + Mat(llt[x].matrixL()) * eta).transpose();
    x = sample_categorical(transition.row(x).transpose(), u(rng));
  }
  return {obs, path};
}

/// Generates observations from a factorial HMM given raw per-chain
/// parameters; chains evolve independently, observations add their weight
/// contributions plus shared Gaussian noise.
inline Mat sample_fhmm(const std::vector<Mat>& transitions, const std::vector<Mat>& weights,
                       const Mat& obs_cov, const std::vector<Vec>& initials, int t_len,
                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  const int m_chains = static_cast<int>(transitions.size());
  const int d = static_cast<int>(obs_cov.rows());
  const Eigen::LLT<Mat> llt(obs_cov);
  std::vector<int> x(m_chains);
  for (int m = 0; m < m_chains; ++m) x[m] = sample_categorical(initials[m], u(rng));
  Mat obs(t_len, d);
  for (int t = 0; t < t_len; ++t) {
    Vec mean = Vec::Zero(d);
    for (int m = 0; m < m_chains; ++m) mean += weights[m].col(x[m]);
    Vec eta(d);
    for (int i = 0; i < d; ++i) eta(i) = g(rng);
    obs.row(t) = (mean + Mat(llt.matrixL()) * eta).transpose();
    for (int m = 0; m < m_chains; ++m)
      x[m] = sample_categorical(transitions[m].row(x[m]).transpose(), u(rng));
  }
  return obs;
}

inline double total_variation(const Vec& a, const Vec& b) {
  return 0.5 * (a - b).cwiseAbs().sum();
}

}  // namespace oracles
