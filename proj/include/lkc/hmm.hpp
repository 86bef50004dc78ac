#pragma once

// Gaussian-emission hidden Markov model: Baum-Welch learning from
// exploration rollouts, per-step rescaled forward filtering, and filtering
// under a substituted (controlled) latent transition law.

#include <lkc/common.hpp>
#include <lkc/serialize.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace lkc::hmm {

struct GaussianHmm {
  int n_states = 0;
  Mat transition;                  // N x N row-stochastic
  Mat means;                       // N x D, one row per state
  std::vector<Mat> covariances;    // N symmetric positive-definite D x D
  Vec initial;                     // length N

  int dim() const { return static_cast<int>(means.cols()); }

  void validate(double cov_floor = 0.0) const {
    if (n_states <= 0 || transition.rows() != n_states || transition.cols() != n_states ||
        means.rows() != n_states || static_cast<int>(covariances.size()) != n_states ||
        initial.size() != n_states)
      throw InvalidModel("GaussianHmm: inconsistent dimensions");
    for (int i = 0; i < n_states; ++i) {
      if (std::abs(transition.row(i).sum() - 1.0) > 1e-12)
        throw InvalidModel("GaussianHmm: transition row does not sum to 1");
      if ((covariances[i] - covariances[i].transpose()).cwiseAbs().maxCoeff() > 1e-10)
        throw InvalidModel("GaussianHmm: covariance not symmetric");
      Eigen::SelfAdjointEigenSolver<Mat> es(covariances[i]);
      if (es.eigenvalues().minCoeff() < cov_floor - 1e-15)
        throw InvalidModel("GaussianHmm: covariance below regularization floor");
    }
    if (std::abs(initial.sum() - 1.0) > 1e-12)
      throw InvalidModel("GaussianHmm: initial does not sum to 1");
  }
};

/// Precomputed emission terms for fast repeated density evaluation.
struct EmissionCache {
  std::vector<Mat> inv_cov;
  Vec log_norm;  // -0.5 (D log 2pi + logdet)

  explicit EmissionCache(const GaussianHmm& m) {
    const int n = m.n_states, d = m.dim();
    inv_cov.resize(n);
    log_norm.resize(n);
    for (int i = 0; i < n; ++i) {
      Eigen::LLT<Mat> llt(m.covariances[i]);
      if (llt.info() != Eigen::Success)
        throw SingularCovariance("EmissionCache: covariance of state " + std::to_string(i) +
                                 " is not positive definite");
      inv_cov[i] = llt.solve(Mat::Identity(d, d));
      double logdet = 0;
      for (int k = 0; k < d; ++k) logdet += 2.0 * std::log(llt.matrixL()(k, k));
      log_norm(i) = -0.5 * (d * std::log(2.0 * M_PI) + logdet);
    }
  }
};

/// Per-state Gaussian log densities of one observation.
inline Vec log_emission(const GaussianHmm& m, const EmissionCache& cache, const Vec& y) {
  Vec out(m.n_states);
  for (int i = 0; i < m.n_states; ++i) {
    const Vec d = y - m.means.row(i).transpose();
    out(i) = cache.log_norm(i) - 0.5 * d.dot(cache.inv_cov[i] * d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filtering

struct FilterState {
  Vec weights;
  double log_evidence = 0.0;

  void validate() const {
    if (weights.minCoeff() < 0 || std::abs(weights.sum() - 1.0) > 1e-10)
      throw InvalidModel("FilterState: weights not a distribution");
  }
};

/// Core update u(x_t) ∝ exp(logb(x_t)) sum_{x'} law(x_t|x') prior(x').
/// Shared by the public filter and by tests that inject log offsets.
inline FilterState filter_step_from_loglik(const FilterState& prior, const Mat& transition_law,
                                           const Vec& logb) {
  const Vec pred = transition_law.transpose() * prior.weights;
  const double shift = logb.maxCoeff();
  const Vec w = (logb.array() - shift).exp().matrix().cwiseProduct(pred);
  const double norm = w.sum();
  if (!(norm > 0.0))
    throw ZeroLikelihood("filter_step: zero posterior mass (max log-density " +
                         std::to_string(shift) + ")");
  FilterState out;
  out.weights = w / norm;
  out.log_evidence = prior.log_evidence + std::log(norm) + shift;
  return out;
}

/// One Bayes update of the filtered posterior under an arbitrary latent
/// transition law; passing model.transition gives the standard HMM filter.
inline FilterState filter_step(const GaussianHmm& model, const EmissionCache& cache,
                               const FilterState& prior, const Mat& transition_law,
                               const Vec& observation) {
  return filter_step_from_loglik(prior, transition_law, log_emission(model, cache, observation));
}

/// Posterior at t = 0: initial distribution times first-observation
/// likelihood.
inline FilterState filter_init(const GaussianHmm& model, const EmissionCache& cache,
                               const Vec& observation) {
  const Vec logb = log_emission(model, cache, observation);
  const double shift = logb.maxCoeff();
  const Vec w = (logb.array() - shift).exp().matrix().cwiseProduct(model.initial);
  const double norm = w.sum();
  if (!(norm > 0.0)) throw ZeroLikelihood("filter_init: zero posterior mass");
  FilterState out;
  out.weights = w / norm;
  out.log_evidence = std::log(norm) + shift;
  return out;
}

/// Exact mean of the one-step predictive mixture
/// sum_{x'} mu_{x'} [law^T filtered](x').
inline Vec predictive_mean(const GaussianHmm& model, const FilterState& filtered,
                           const Mat& transition_law) {
  return model.means.transpose() * (transition_law.transpose() * filtered.weights);
}

/// Log-likelihood of a sequence under the model (standard filter).
inline double sequence_log_likelihood(const GaussianHmm& model, const Mat& seq) {
  EmissionCache cache(model);
  FilterState f = filter_init(model, cache, seq.row(0).transpose());
  for (Eigen::Index t = 1; t < seq.rows(); ++t)
    f = filter_step(model, cache, f, model.transition, seq.row(t).transpose());
  return f.log_evidence;
}

// ---------------------------------------------------------------------------
// K-means initialization

struct KmeansResult {
  Mat means;                     // K x D
  std::vector<Mat> covariances;  // per-cluster, floored
  std::vector<int> assignments;
};

namespace detail {

/// Floor eps = scale * (median squared deviation of the data), the
/// covariance regularizer used by both k-means and EM.
inline double covariance_floor(const Mat& data, double scale) {
  const Vec mean = data.colwise().mean();
  std::vector<double> sq;
  sq.reserve(static_cast<std::size_t>(data.size()));
  for (Eigen::Index t = 0; t < data.rows(); ++t)
    for (Eigen::Index j = 0; j < data.cols(); ++j) {
      const double d = data(t, j) - mean(j);
      sq.push_back(d * d);
    }
  std::nth_element(sq.begin(), sq.begin() + sq.size() / 2, sq.end());
  const double med = sq[sq.size() / 2];
  return scale * std::max(med, 1e-300);
}

inline Mat floor_covariance(Mat cov, double floor, int* hits = nullptr) {
  cov = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(cov);
  if (es.eigenvalues().minCoeff() >= floor) return cov;
  if (hits) ++*hits;
  return cov + (floor - es.eigenvalues().minCoeff()) * Mat::Identity(cov.rows(), cov.cols());
}

}  // namespace detail

/// Lloyd's algorithm to local convergence with seeded initialization from
/// distinct data points. Empty clusters are re-seeded a bounded number of
/// times before EmptyCluster is raised.
inline KmeansResult kmeans_init(const Mat& data, int n_states, std::uint64_t seed,
                                int max_iter = 100, int reseed_limit = 20,
                                double floor_scale = 1e-6) {
  const int n = static_cast<int>(data.rows());
  const int d = static_cast<int>(data.cols());
  if (n_states < 1) throw InvalidModel("kmeans_init: need at least one state");

  // distinct rows, for initialization and the feasibility check
  std::vector<int> distinct;
  {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      for (int j = 0; j < d; ++j) {
        if (data(a, j) < data(b, j)) return true;
        if (data(a, j) > data(b, j)) return false;
      }
      return false;
    });
    for (int i = 0; i < n; ++i)
      if (distinct.empty() || (data.row(idx[i]) - data.row(distinct.back())).cwiseAbs().maxCoeff() > 0)
        distinct.push_back(idx[i]);
  }
  if (static_cast<int>(distinct.size()) < n_states)
    throw EmptyCluster("kmeans_init: only " + std::to_string(distinct.size()) +
                       " distinct points for " + std::to_string(n_states) + " clusters");

  std::mt19937_64 rng(seed);
  std::shuffle(distinct.begin(), distinct.end(), rng);
  Mat centers(n_states, d);
  for (int k = 0; k < n_states; ++k) centers.row(k) = data.row(distinct[k]);

  std::vector<int> assign(n, -1);
  int reseeds = 0;
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (data.row(i) - centers.row(0)).squaredNorm();
      for (int k = 1; k < n_states; ++k) {
        const double dist = (data.row(i) - centers.row(k)).squaredNorm();
        if (dist < best_d) {
          best_d = dist;
          best = k;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    Mat sums = Mat::Zero(n_states, d);
    std::vector<int> counts(n_states, 0);
    for (int i = 0; i < n; ++i) {
      sums.row(assign[i]) += data.row(i);
      ++counts[assign[i]];
    }
    bool reseeded = false;
    std::uniform_int_distribution<int> pick(0, n - 1);
    for (int k = 0; k < n_states; ++k) {
      if (counts[k] == 0) {
        if (++reseeds > reseed_limit)
          throw EmptyCluster("kmeans_init: cluster emptied beyond the retry limit");
        centers.row(k) = data.row(pick(rng));
        reseeded = true;
      } else {
        centers.row(k) = sums.row(k) / counts[k];
      }
    }
    if (!changed && !reseeded) break;
  }

  const double floor = detail::covariance_floor(data, floor_scale);
  KmeansResult res;
  res.means = centers;
  res.assignments = assign;
  res.covariances.resize(n_states);
  for (int k = 0; k < n_states; ++k) {
    Mat cov = Mat::Zero(d, d);
    int count = 0;
    for (int i = 0; i < n; ++i)
      if (assign[i] == k) {
        const Vec diff = (data.row(i) - centers.row(k)).transpose();
        cov += diff * diff.transpose();
        ++count;
      }
    if (count > 0) cov /= count;
    res.covariances[k] = detail::floor_covariance(cov, floor);
  }
  return res;
}

// ---------------------------------------------------------------------------
// EM (Baum-Welch)

struct EmOptions {
  int max_iter = 200;
  double tol = 1e-6;  // relative log-likelihood improvement
  bool learn_transition = true;
  bool learn_means = true;
  bool learn_covariances = true;
  bool learn_initial = true;
  double cov_floor_scale = 1e-6;
};

struct EmResult {
  GaussianHmm model;
  std::vector<double> log_likelihood;  // one entry per EM iteration
  int cov_floor_hits = 0;
  int iterations = 0;
};

namespace detail {

struct SeqStats {
  double loglik = 0;
  Mat xi_numerator;  // sum_t a_t (w_{t+1} .* b_{t+1})^T / c_{t+1}, before .* P
  Vec gamma0;
  Vec occupancy;     // sum_t gamma_t
  Mat weighted_sum;  // sum_t gamma_t y_t, per state
  std::vector<Mat> weighted_sq;
};

inline SeqStats estep_sequence(const GaussianHmm& m, const EmissionCache& cache, const Mat& seq) {
  const int n = m.n_states;
  const int d = m.dim();
  const int t_len = static_cast<int>(seq.rows());
  Mat w(t_len, n);
  Vec shifts(t_len);
  for (int t = 0; t < t_len; ++t) {
    Vec lb = log_emission(m, cache, seq.row(t).transpose());
    shifts(t) = lb.maxCoeff();
    w.row(t) = (lb.array() - shifts(t)).exp().matrix().transpose();
  }

  Mat alpha(t_len, n);
  Vec scale(t_len);
  Vec a = m.initial.cwiseProduct(w.row(0).transpose());
  scale(0) = a.sum();
  if (!(scale(0) > 0)) throw NumericalUnderflow("em_fit: forward pass lost all mass at t=0");
  alpha.row(0) = (a / scale(0)).transpose();
  for (int t = 1; t < t_len; ++t) {
    a = (m.transition.transpose() * alpha.row(t - 1).transpose()).cwiseProduct(w.row(t).transpose());
    scale(t) = a.sum();
    if (!(scale(t) > 0)) throw NumericalUnderflow("em_fit: forward pass lost all mass");
    alpha.row(t) = (a / scale(t)).transpose();
  }

  SeqStats st;
  st.loglik = scale.array().log().sum() + shifts.sum();
  st.xi_numerator = Mat::Zero(n, n);
  st.occupancy = Vec::Zero(n);
  st.weighted_sum = Mat::Zero(n, d);
  st.weighted_sq.assign(n, Mat::Zero(d, d));

  Vec beta = Vec::Ones(n);
  for (int t = t_len - 1; t >= 0; --t) {
    const Vec gamma = alpha.row(t).transpose().cwiseProduct(beta);
    st.occupancy += gamma;
    st.weighted_sum += gamma * seq.row(t);
    for (int k = 0; k < n; ++k)
      if (gamma(k) > 0)
        st.weighted_sq[k] += gamma(k) * (seq.row(t).transpose() * seq.row(t));
    if (t == 0) {
      st.gamma0 = gamma;
      break;
    }
    const Vec wb = w.row(t).transpose().cwiseProduct(beta) / scale(t);
    st.xi_numerator += alpha.row(t - 1).transpose() * wb.transpose();
    beta = m.transition * wb;
  }
  return st;
}

}  // namespace detail

/// Baum-Welch with per-step rescaled forward-backward recursions. The
/// log-likelihood trace is nondecreasing up to floating-point slack; the
/// covariance eigenvalue floor guards against collapse onto single points.
inline EmResult em_fit(const std::vector<Mat>& data, const GaussianHmm& init,
                       const EmOptions& opt = {}) {
  if (data.empty()) throw InvalidModel("em_fit: no data");
  for (const auto& seq : data)
    if (seq.rows() == 0 || seq.cols() != init.dim())
      throw InvalidModel("em_fit: empty sequence or dimension mismatch");
  init.validate();

  Mat all(0, init.dim());
  for (const auto& seq : data) {
    Mat grown(all.rows() + seq.rows(), init.dim());
    grown << all, seq;
    all = std::move(grown);
  }
  const double floor = detail::covariance_floor(all, opt.cov_floor_scale);

  EmResult res;
  res.model = init;
  const int n = init.n_states;
  const int d = init.dim();
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < opt.max_iter; ++it) {
    EmissionCache cache(res.model);
    auto stats = parallel_map<detail::SeqStats>(
        data.size(), [&](std::size_t s) { return detail::estep_sequence(res.model, cache, data[s]); });

    detail::SeqStats total;
    total.xi_numerator = Mat::Zero(n, n);
    total.gamma0 = Vec::Zero(n);
    total.occupancy = Vec::Zero(n);
    total.weighted_sum = Mat::Zero(n, d);
    total.weighted_sq.assign(n, Mat::Zero(d, d));
    for (const auto& st : stats) {  // fixed order keeps the reduction deterministic
      total.loglik += st.loglik;
      total.xi_numerator += st.xi_numerator;
      total.gamma0 += st.gamma0;
      total.occupancy += st.occupancy;
      total.weighted_sum += st.weighted_sum;
      for (int k = 0; k < n; ++k) total.weighted_sq[k] += st.weighted_sq[k];
    }
    res.log_likelihood.push_back(total.loglik);
    res.iterations = it + 1;

    if (opt.learn_transition) {
      const Mat xi = res.model.transition.cwiseProduct(total.xi_numerator);
      for (int i = 0; i < n; ++i) {
        const double rs = xi.row(i).sum();
        if (rs > 0) res.model.transition.row(i) = xi.row(i) / rs;
      }
    }
    if (opt.learn_initial) {
      const double gs = total.gamma0.sum();
      if (gs > 0) res.model.initial = total.gamma0 / gs;
    }
    for (int k = 0; k < n; ++k) {
      if (total.occupancy(k) <= 1e-12) continue;  // never responsible: keep old parameters
      const Vec mu = total.weighted_sum.row(k).transpose() / total.occupancy(k);
      if (opt.learn_means) res.model.means.row(k) = mu.transpose();
      if (opt.learn_covariances) {
        const Vec mk = res.model.means.row(k).transpose();
        Mat cov = total.weighted_sq[k] / total.occupancy(k) - mu * mk.transpose() -
                  mk * mu.transpose() + mk * mk.transpose();
        res.model.covariances[k] = detail::floor_covariance(cov, floor, &res.cov_floor_hits);
      }
    }

    if (total.loglik - prev_ll < opt.tol * std::max(1.0, std::abs(prev_ll)) && it > 0) break;
    prev_ll = total.loglik;
  }
  return res;
}

/// Convenience initializer: k-means emissions plus empirical bigram
/// transitions (with additive smoothing) from the k-means assignments.
inline GaussianHmm init_from_kmeans(const std::vector<Mat>& data, int n_states, std::uint64_t seed,
                                    double transition_smoothing = 1e-3) {
  Mat all(0, data.at(0).cols());
  for (const auto& seq : data) {
    Mat grown(all.rows() + seq.rows(), all.cols());
    grown << all, seq;
    all = std::move(grown);
  }
  auto km = kmeans_init(all, n_states, seed);

  GaussianHmm m;
  m.n_states = n_states;
  m.means = km.means;
  m.covariances = km.covariances;
  m.transition = Mat::Constant(n_states, n_states, transition_smoothing);
  m.initial = Vec::Constant(n_states, 1.0 / n_states);
  std::size_t offset = 0;
  for (const auto& seq : data) {
    for (Eigen::Index t = 0; t + 1 < seq.rows(); ++t)
      m.transition(km.assignments[offset + t], km.assignments[offset + t + 1]) += 1.0;
    offset += static_cast<std::size_t>(seq.rows());
  }
  for (int i = 0; i < n_states; ++i) m.transition.row(i) /= m.transition.row(i).sum();
  return m;
}

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const GaussianHmm& m) {
  json covs = json::array();
  for (const auto& c : m.covariances) covs.push_back(matrix_to_json(c));
  return json{{"format", "lkc.hmm"},
              {"version", 1},
              {"n_states", m.n_states},
              {"transition", matrix_to_json(m.transition)},
              {"means", matrix_to_json(m.means)},
              {"covariances", covs},
              {"initial", vector_to_json(m.initial)}};
}

inline GaussianHmm hmm_from_json(const json& j) {
  expect_format(j, "lkc.hmm", 1);
  GaussianHmm m;
  m.n_states = j.at("n_states").get<int>();
  m.transition = matrix_from_json(j.at("transition"));
  m.means = matrix_from_json(j.at("means"));
  for (const auto& c : j.at("covariances")) m.covariances.push_back(matrix_from_json(c));
  m.initial = vector_from_json(j.at("initial"));
  return m;
}

}  // namespace lkc::hmm
