#pragma once

// Factorial HMM with 1-of-K chain states and an additive Gaussian
// observation model y_t ~ N(sum_m W^(m) x_t^(m), Sigma). Learning and
// windowed online filtering both run structured mean field: each chain's
// variational factor stays a full HMM chain and the chains couple only
// through expected observation contributions. A flattening construction
// to an ordinary HMM provides the exact oracle for small instances.

#include <lkc/common.hpp>
#include <lkc/hmm.hpp>
#include <lkc/serialize.hpp>

#include <cmath>
#include <optional>
#include <vector>

namespace lkc::fhmm {

struct FactorialHmm {
  int n_chains = 0;  // M
  int n_values = 0;  // K
  std::vector<Mat> transitions;  // M row-stochastic K x K
  std::vector<Mat> weights;      // M of D x K, column k = contribution of value k
  Mat obs_cov;                   // shared D x D
  std::vector<Vec> initials;     // M probability vectors of length K
  std::optional<Vec> value_grid; // grid metadata when weights come from a value grid

  int dim() const { return static_cast<int>(obs_cov.rows()); }

  void validate() const {
    if (n_chains <= 0 || n_values <= 0 ||
        static_cast<int>(transitions.size()) != n_chains ||
        static_cast<int>(weights.size()) != n_chains ||
        static_cast<int>(initials.size()) != n_chains)
      throw InvalidModel("FactorialHmm: inconsistent dimensions");
    for (int m = 0; m < n_chains; ++m) {
      if (transitions[m].rows() != n_values || transitions[m].cols() != n_values)
        throw InvalidModel("FactorialHmm: transition size mismatch");
      for (int i = 0; i < n_values; ++i)
        if (std::abs(transitions[m].row(i).sum() - 1.0) > 1e-12)
          throw InvalidModel("FactorialHmm: transition row does not sum to 1");
      if (weights[m].rows() != dim() || weights[m].cols() != n_values)
        throw InvalidModel("FactorialHmm: weight matrix size mismatch");
      if (std::abs(initials[m].sum() - 1.0) > 1e-12)
        throw InvalidModel("FactorialHmm: initial does not sum to 1");
    }
    Eigen::LLT<Mat> llt(obs_cov);
    if (llt.info() != Eigen::Success)
      throw InvalidModel("FactorialHmm: observation covariance not positive definite");
  }
};

/// Variational posterior per chain: time-indexed marginals h^(m)_t, plus
/// (optionally) summed pairwise transition expectations and the pseudo
/// log-likelihoods of each chain's last update.
struct ChainMarginals {
  std::vector<Mat> marginals;       // M of T x K
  std::vector<Mat> pairwise;        // M of K x K (sum over t), when requested
  std::vector<Mat> pseudo_loglik;   // M of T x K, when requested
  std::vector<double> bound_trace;  // variational bound after each sweep

  double bound() const { return bound_trace.empty() ? 0.0 : bound_trace.back(); }

  void validate() const {
    for (const auto& h : marginals)
      for (Eigen::Index t = 0; t < h.rows(); ++t)
        if (std::abs(h.row(t).sum() - 1.0) > 1e-10 || h.row(t).minCoeff() < -1e-12)
          throw InvalidModel("ChainMarginals: row is not a distribution");
  }
};

struct SmfOptions {
  int n_sweeps = 10;
  double tol = 1e-6;           // stop when the bound gains less than this
  bool with_pairwise = false;
  bool with_pseudo_loglik = false;
};

namespace detail {

struct ChainFb {
  Mat marginals;  // T x K
  Mat xi_sum;     // K x K
  double log_z = 0;
};

/// Scaled forward-backward for one chain given pseudo log-likelihoods.
inline ChainFb forward_backward(const Mat& law, const Vec& initial, const Mat& loglik,
                                bool with_xi) {
  const int t_len = static_cast<int>(loglik.rows());
  const int k = static_cast<int>(loglik.cols());
  Mat w(t_len, k);
  Vec shifts(t_len);
  for (int t = 0; t < t_len; ++t) {
    shifts(t) = loglik.row(t).maxCoeff();
    w.row(t) = (loglik.row(t).array() - shifts(t)).exp();
  }
  Mat alpha(t_len, k);
  Vec scale(t_len);
  Vec a = initial.cwiseProduct(w.row(0).transpose());
  scale(0) = a.sum();
  if (!(scale(0) > 0)) throw NumericalUnderflow("forward_backward: lost all mass at t=0");
  alpha.row(0) = (a / scale(0)).transpose();
  for (int t = 1; t < t_len; ++t) {
    a = (law.transpose() * alpha.row(t - 1).transpose()).cwiseProduct(w.row(t).transpose());
    scale(t) = a.sum();
    if (!(scale(t) > 0)) throw NumericalUnderflow("forward_backward: lost all mass");
    alpha.row(t) = (a / scale(t)).transpose();
  }

  ChainFb out;
  out.log_z = scale.array().log().sum() + shifts.sum();
  out.marginals.resize(t_len, k);
  if (with_xi) out.xi_sum = Mat::Zero(k, k);
  Vec beta = Vec::Ones(k);
  for (int t = t_len - 1; t >= 0; --t) {
    out.marginals.row(t) = alpha.row(t).cwiseProduct(beta.transpose());
    if (t == 0) break;
    const Vec wb = w.row(t).transpose().cwiseProduct(beta) / scale(t);
    if (with_xi) out.xi_sum += law.cwiseProduct(alpha.row(t - 1).transpose() * wb.transpose());
    beta = law * wb;
  }
  return out;
}

}  // namespace detail

/// Structured mean field over a sequence of observations. Chains are
/// updated round-robin in index order; each update replaces the other
/// chains' contributions by their variational means, builds per-chain
/// pseudo log-likelihoods and reruns exact forward-backward on that chain.
/// The variational bound is evaluated explicitly after every sweep and
/// must not decrease.
///
/// `transition_laws` is the set of chain transition matrices to infer
/// under: the model's own for learning, controlled laws for filtering.
/// `initial_override` replaces the model initials (used by the windowed
/// filter); `warm_start` seeds the marginals (used by EM).
inline ChainMarginals smf_estep(const FactorialHmm& model, const Mat& observations,
                                const std::vector<Mat>& transition_laws,
                                const SmfOptions& opt = {},
                                const std::vector<Vec>* initial_override = nullptr,
                                const std::vector<Mat>* warm_start = nullptr) {
  const int m_chains = model.n_chains;
  const int k = model.n_values;
  const int d = model.dim();
  const int t_len = static_cast<int>(observations.rows());
  if (t_len == 0) throw InvalidModel("smf_estep: empty observation sequence");
  if (static_cast<int>(transition_laws.size()) != m_chains)
    throw InvalidModel("smf_estep: wrong number of transition laws");

  const Eigen::LLT<Mat> llt(model.obs_cov);
  if (llt.info() != Eigen::Success) throw InvalidModel("smf_estep: covariance not PD");
  const Mat inv_cov = llt.solve(Mat::Identity(d, d));
  double logdet = 0;
  for (int i = 0; i < d; ++i) logdet += 2.0 * std::log(Mat(llt.matrixL())(i, i));

  std::vector<Mat> a_m(m_chains);   // Sigma^{-1} W^(m)
  std::vector<Vec> diag_m(m_chains);  // w_k^T Sigma^{-1} w_k per value
  for (int m = 0; m < m_chains; ++m) {
    a_m[m] = inv_cov * model.weights[m];
    diag_m[m] = (model.weights[m].cwiseProduct(a_m[m])).colwise().sum().transpose();
  }
  auto initial_of = [&](int m) -> const Vec& {
    return initial_override ? (*initial_override)[m] : model.initials[m];
  };

  ChainMarginals res;
  res.marginals.resize(m_chains);
  std::vector<Mat> delta(m_chains, Mat::Zero(t_len, k));
  std::vector<double> log_z(m_chains, 0.0);

  if (warm_start) {
    res.marginals = *warm_start;
  } else {
    // prior chain marginals under the given laws
    for (int m = 0; m < m_chains; ++m) {
      Mat h(t_len, k);
      Vec cur = initial_of(m);
      h.row(0) = cur.transpose();
      for (int t = 1; t < t_len; ++t) {
        cur = transition_laws[m].transpose() * cur;
        h.row(t) = cur.transpose();
      }
      res.marginals[m] = std::move(h);
    }
  }
  // running sum of expected contributions S_t = sum_m W^(m) h^(m)_t
  Mat s = Mat::Zero(t_len, d);
  for (int m = 0; m < m_chains; ++m) s += res.marginals[m] * model.weights[m].transpose();

  // with stale (delta, logZ) the chain terms are only exact after a chain
  // has been updated once, so the first bound is recorded after sweep 1
  const double const_term = -0.5 * t_len * (d * std::log(2.0 * M_PI) + logdet);
  auto evaluate_bound = [&]() {
    double f = const_term;
    for (int t = 0; t < t_len; ++t) {
      const Vec r = observations.row(t).transpose() - s.row(t).transpose();
      f += -0.5 * r.dot(inv_cov * r);
    }
    for (int m = 0; m < m_chains; ++m) {
      const Mat& h = res.marginals[m];
      // per-chain variance correction of the quadratic term
      double corr = (h * diag_m[m]).sum();
      const Mat mean_contrib = h * model.weights[m].transpose();  // T x D
      corr -= (mean_contrib.cwiseProduct(mean_contrib * inv_cov)).sum();
      f += -0.5 * corr;
      f += log_z[m] - h.cwiseProduct(delta[m]).sum();
    }
    return f;
  };

  bool have_prev = false;
  double prev_bound = 0;
  for (int sweep = 0; sweep < opt.n_sweeps; ++sweep) {
    for (int m = 0; m < m_chains; ++m) {
      // residual with chain m's own contribution removed
      const Mat own = res.marginals[m] * model.weights[m].transpose();
      const Mat resid = observations - s + own;
      delta[m] = resid * a_m[m];
      delta[m].rowwise() -= 0.5 * diag_m[m].transpose();
      auto fb = detail::forward_backward(transition_laws[m], initial_of(m), delta[m],
                                         opt.with_pairwise);
      log_z[m] = fb.log_z;
      if (opt.with_pairwise) {
        if (static_cast<int>(res.pairwise.size()) != m_chains) res.pairwise.resize(m_chains);
        res.pairwise[m] = fb.xi_sum;
      }
      s += (fb.marginals - res.marginals[m]) * model.weights[m].transpose();
      res.marginals[m] = std::move(fb.marginals);
    }
    const double bound = evaluate_bound();
    res.bound_trace.push_back(bound);
    if (have_prev && bound < prev_bound - 1e-8 * std::max(1.0, std::abs(prev_bound)))
      throw BoundDecrease("smf_estep: bound fell from " + std::to_string(prev_bound) + " to " +
                          std::to_string(bound));
    if (have_prev && bound - prev_bound < opt.tol * std::max(1.0, std::abs(bound))) {
      prev_bound = bound;
      break;
    }
    prev_bound = bound;
    have_prev = true;
  }
  if (opt.with_pseudo_loglik) res.pseudo_loglik = std::move(delta);
  return res;
}

// ---------------------------------------------------------------------------
// Windowed online filtering

struct WindowedFilterResult {
  std::vector<Vec> final_marginals;  // u^(m)(x_t | y_{1:t})
  std::vector<Vec> next_anchor;      // filtered estimate at the window start
  ChainMarginals window;
};

/// Offline structured mean field over the last H observations, anchored on
/// the factored filtered estimate at the window start minus one. The
/// anchor is treated as an exact factored prior; no smoothing crosses it.
/// Passing no anchor means the window starts the sequence and the model
/// initials apply.
inline WindowedFilterResult windowed_filter(const FactorialHmm& model,
                                            const std::vector<Mat>& transition_laws,
                                            const std::vector<Vec>* anchor, const Mat& window,
                                            const SmfOptions& opt_in = {}) {
  if (window.rows() < 1) throw InvalidModel("windowed_filter: empty window");
  SmfOptions opt = opt_in;
  opt.with_pseudo_loglik = true;
  std::vector<Vec> init;
  init.reserve(model.n_chains);
  for (int m = 0; m < model.n_chains; ++m)
    init.push_back(anchor ? Vec(transition_laws[m].transpose() * (*anchor)[m])
                          : model.initials[m]);

  WindowedFilterResult res;
  res.window = smf_estep(model, window, transition_laws, opt, &init);
  const int last = static_cast<int>(window.rows()) - 1;
  for (int m = 0; m < model.n_chains; ++m) {
    res.final_marginals.push_back(res.window.marginals[m].row(last).transpose());
    // forward-only (filtered, not smoothed) marginal at the window start
    const Vec lb = res.window.pseudo_loglik[m].row(0).transpose();
    Vec w0 = (lb.array() - lb.maxCoeff()).exp().matrix().cwiseProduct(init[m]);
    res.next_anchor.push_back(w0 / w0.sum());
  }
  return res;
}

// ---------------------------------------------------------------------------
// Exact flattening

/// Joint index of per-chain values with chain 0 fastest-varying:
/// j = idx_0 + K idx_1 + K^2 idx_2 + ...
inline std::vector<int> unflatten_index(int joint, int m_chains, int k) {
  std::vector<int> idx(m_chains);
  for (int m = 0; m < m_chains; ++m) {
    idx[m] = joint % k;
    joint /= k;
  }
  return idx;
}

/// Exact product construction on the K^M joint states. Transition entries
/// are per-chain products, the emission mean of a tuple sums the selected
/// weight columns, and every joint state shares obs_cov.
inline hmm::GaussianHmm flatten_to_hmm(const FactorialHmm& model, long cap = 4096) {
  model.validate();
  long n = 1;
  for (int m = 0; m < model.n_chains; ++m) {
    n *= model.n_values;
    if (n > cap)
      throw CapExceeded("flatten_to_hmm: K^M = " + std::to_string(n) + "+ exceeds cap " +
                        std::to_string(cap));
  }
  const int nn = static_cast<int>(n);
  const int k = model.n_values;
  hmm::GaussianHmm out;
  out.n_states = nn;
  out.transition.resize(nn, nn);
  out.means.resize(nn, model.dim());
  out.covariances.assign(nn, model.obs_cov);
  out.initial.resize(nn);
  std::vector<std::vector<int>> idx(nn);
  for (int j = 0; j < nn; ++j) idx[j] = unflatten_index(j, model.n_chains, k);
  for (int j = 0; j < nn; ++j) {
    Vec mean = Vec::Zero(model.dim());
    double init = 1.0;
    for (int m = 0; m < model.n_chains; ++m) {
      mean += model.weights[m].col(idx[j][m]);
      init *= model.initials[m](idx[j][m]);
    }
    out.means.row(j) = mean.transpose();
    out.initial(j) = init;
    for (int j2 = 0; j2 < nn; ++j2) {
      double p = 1.0;
      for (int m = 0; m < model.n_chains; ++m) p *= model.transitions[m](idx[j][m], idx[j2][m]);
      out.transition(j, j2) = p;
    }
  }
  return out;
}

/// Per-chain marginals of a distribution over flattened joint states.
inline std::vector<Vec> marginalize_joint(const Vec& joint, int m_chains, int k) {
  std::vector<Vec> out(m_chains, Vec::Zero(k));
  for (int j = 0; j < joint.size(); ++j) {
    const auto idx = unflatten_index(j, m_chains, k);
    for (int m = 0; m < m_chains; ++m) out[m](idx[m]) += joint(j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// EM

struct FhmmEmOptions {
  int max_iter = 50;
  double tol = 1e-6;  // relative bound improvement
  bool learn_transitions = true;
  bool learn_initials = true;
  bool learn_weights = false;  // matches training where weights encode a grid
  bool learn_obs_cov = false;
  SmfOptions smf;
};

struct FhmmEmResult {
  FactorialHmm model;
  std::vector<double> bound;  // variational bound per EM iteration
  int iterations = 0;
};

/// EM with structured mean-field E-steps. E-steps warm-start from the
/// previous posterior so the recorded bound ascends across iterations as
/// well as within sweeps.
inline FhmmEmResult em_fit(const std::vector<Mat>& data, const FactorialHmm& init,
                           const FhmmEmOptions& opt = {}) {
  if (data.empty()) throw InvalidModel("em_fit: no data");
  init.validate();
  const int m_chains = init.n_chains;
  const int k = init.n_values;
  const int d = init.dim();

  FhmmEmResult res;
  res.model = init;
  std::vector<std::vector<Mat>> warm(data.size());
  double prev = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < opt.max_iter; ++it) {
    SmfOptions sopt = opt.smf;
    sopt.with_pairwise = true;
    auto estep = parallel_map<ChainMarginals>(data.size(), [&](std::size_t s) {
      return smf_estep(res.model, data[s], res.model.transitions, sopt, nullptr,
                       warm[s].empty() ? nullptr : &warm[s]);
    });
    double bound = 0;
    for (const auto& e : estep) bound += e.bound();
    res.bound.push_back(bound);
    res.iterations = it + 1;
    for (std::size_t s = 0; s < data.size(); ++s) warm[s] = estep[s].marginals;

    // M-step
    if (opt.learn_transitions) {
      for (int m = 0; m < m_chains; ++m) {
        Mat xi = Mat::Zero(k, k);
        for (const auto& e : estep) xi += e.pairwise[m];
        for (int i = 0; i < k; ++i) {
          const double rs = xi.row(i).sum();
          if (rs > 0) res.model.transitions[m].row(i) = xi.row(i) / rs;
        }
      }
    }
    if (opt.learn_initials) {
      for (int m = 0; m < m_chains; ++m) {
        Vec g = Vec::Zero(k);
        for (const auto& e : estep) g += e.marginals[m].row(0).transpose();
        res.model.initials[m] = g / g.sum();
      }
    }
    if (opt.learn_weights) {
      Mat xy = Mat::Zero(d, m_chains * k);
      Mat xx = Mat::Zero(m_chains * k, m_chains * k);
      for (std::size_t s = 0; s < data.size(); ++s) {
        const Mat& y = data[s];
        for (int m = 0; m < m_chains; ++m) {
          const Mat& hm = estep[s].marginals[m];
          xy.middleCols(m * k, k) += y.transpose() * hm;
          xx.block(m * k, m * k, k, k) += Mat(hm.colwise().sum().asDiagonal());
          for (int i = m + 1; i < m_chains; ++i) {
            const Mat cross = hm.transpose() * estep[s].marginals[i];
            xx.block(m * k, i * k, k, k) += cross;
            xx.block(i * k, m * k, k, k) += cross.transpose();
          }
        }
      }
      // tiny ridge keeps the normal equations solvable when some values
      // were never visited
      xx += 1e-12 * xx.diagonal().maxCoeff() * Mat::Identity(m_chains * k, m_chains * k);
      const Mat w_all = xx.ldlt().solve(xy.transpose()).transpose();
      for (int m = 0; m < m_chains; ++m) res.model.weights[m] = w_all.middleCols(m * k, k);
    }
    if (opt.learn_obs_cov) {
      Mat acc = Mat::Zero(d, d);
      long total = 0;
      for (std::size_t s = 0; s < data.size(); ++s) {
        const Mat& y = data[s];
        const int t_len = static_cast<int>(y.rows());
        total += t_len;
        Mat stot = Mat::Zero(t_len, d);
        for (int m = 0; m < m_chains; ++m)
          stot += estep[s].marginals[m] * res.model.weights[m].transpose();
        const Mat r = y - stot;
        acc += r.transpose() * r;
        for (int m = 0; m < m_chains; ++m) {
          const Mat& hm = estep[s].marginals[m];
          const Mat mw = hm * res.model.weights[m].transpose();
          acc += res.model.weights[m] * hm.colwise().sum().asDiagonal() *
                     res.model.weights[m].transpose() -
                 mw.transpose() * mw;
        }
      }
      Mat cov = acc / static_cast<double>(total);
      cov = 0.5 * (cov + cov.transpose());
      Eigen::SelfAdjointEigenSolver<Mat> es(cov);
      const double floor = 1e-10 * std::max(1.0, es.eigenvalues().maxCoeff());
      if (es.eigenvalues().minCoeff() < floor)
        cov += (floor - es.eigenvalues().minCoeff()) * Mat::Identity(d, d);
      res.model.obs_cov = cov;
    }

    if (it > 0 && bound - prev < opt.tol * std::max(1.0, std::abs(prev))) break;
    prev = bound;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const FactorialHmm& m) {
  json trans = json::array(), wts = json::array(), inits = json::array();
  for (const auto& t : m.transitions) trans.push_back(matrix_to_json(t));
  for (const auto& w : m.weights) wts.push_back(matrix_to_json(w, "col"));
  for (const auto& i : m.initials) inits.push_back(vector_to_json(i));
  json j{{"format", "lkc.fhmm"},
         {"version", 1},
         {"n_chains", m.n_chains},
         {"n_values", m.n_values},
         {"transitions", trans},
         {"weights", wts},
         {"obs_cov", matrix_to_json(m.obs_cov)},
         {"initials", inits}};
  if (m.value_grid) j["value_grid"] = vector_to_json(*m.value_grid);
  return j;
}

inline FactorialHmm fhmm_from_json(const json& j) {
  expect_format(j, "lkc.fhmm", 1);
  FactorialHmm m;
  m.n_chains = j.at("n_chains").get<int>();
  m.n_values = j.at("n_values").get<int>();
  for (const auto& t : j.at("transitions")) m.transitions.push_back(matrix_from_json(t));
  for (const auto& w : j.at("weights")) m.weights.push_back(matrix_from_json(w));
  m.obs_cov = matrix_from_json(j.at("obs_cov"));
  for (const auto& i : j.at("initials")) m.initials.push_back(vector_from_json(i));
  if (j.contains("value_grid")) m.value_grid = vector_from_json(j.at("value_grid"));
  return m;
}

}  // namespace lkc::fhmm
