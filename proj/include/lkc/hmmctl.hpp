#pragma once

// Builds the latent KL-control problem from a learned HMM plus a quadratic
// cost in observation space, and runs the observed-space control loop
// tau = K (ybar_u - ybar_p) on the filtered latent state.

#include <lkc/common.hpp>
#include <lkc/hmm.hpp>
#include <lkc/klcore.hpp>

#include <cmath>

namespace lkc::hmmctl {

/// Quadratic observation-space cost qtilde(y) = (y - target)^T W (y - target)
/// with W = weight_inverse_cov, scaled by alpha when projected to the
/// latent space.
struct QuadraticCost {
  Vec target;              // mu_q
  Mat weight_inverse_cov;  // Sigma_q^{-1}, symmetric positive definite
  double scale = 1.0;      // alpha >= 0

  double qtilde(const Vec& y) const {
    const Vec d = y - target;
    return d.dot(weight_inverse_cov * d);
  }

  void validate() const {
    if (scale < 0) throw InvalidModel("QuadraticCost: scale must be >= 0");
    if ((weight_inverse_cov - weight_inverse_cov.transpose()).cwiseAbs().maxCoeff() > 1e-10)
      throw InvalidModel("QuadraticCost: weight matrix not symmetric");
    Eigen::LLT<Mat> llt(weight_inverse_cov);
    if (llt.info() != Eigen::Success)
      throw InvalidModel("QuadraticCost: weight matrix not positive definite");
  }
};

/// Latent state cost of a Gaussian state (mu_x, Sigma_x):
///   q = -ln{ |S|^{1/2} / |Sigma_x|^{1/2} exp[-1/2 ||mu_q - mu_x||^2_{M^{-1}}] }
/// with S = (alpha Sigma_q^{-1} + Sigma_x^{-1})^{-1} and
/// M = alpha^{-1} Sigma_q + Sigma_x; equivalently the closed form of
/// -ln E_{y ~ N(mu_x, Sigma_x)} exp(-(alpha/2) qtilde(y)). For alpha = 0 the
/// smoothing integral is 1 and the cost is exactly zero.
inline double latent_cost(const QuadraticCost& cost, const Vec& state_mean,
                          const Mat& state_cov) {
  if (cost.scale == 0.0) return 0.0;
  const int d = static_cast<int>(state_mean.size());

  Eigen::LLT<Mat> llt_x(state_cov);
  if (llt_x.info() != Eigen::Success)
    throw SingularCovariance("latent_cost: state covariance not positive definite");
  Eigen::LLT<Mat> llt_w(cost.weight_inverse_cov);
  if (llt_w.info() != Eigen::Success)
    throw SingularCovariance("latent_cost: cost weight matrix not positive definite");
  const Mat sigma_q = llt_w.solve(Mat::Identity(d, d));

  const Mat s_inv = cost.scale * cost.weight_inverse_cov + llt_x.solve(Mat::Identity(d, d));
  Eigen::LLT<Mat> llt_sinv(s_inv);
  if (llt_sinv.info() != Eigen::Success)
    throw SingularCovariance("latent_cost: S^{-1} not positive definite");

  const Mat m = sigma_q / cost.scale + state_cov;
  Eigen::LLT<Mat> llt_m(m);
  if (llt_m.info() != Eigen::Success) throw SingularCovariance("latent_cost: M not positive definite");

  auto logdet = [](const Eigen::LLT<Mat>& llt, int dim) {
    double ld = 0;
    for (int k = 0; k < dim; ++k) ld += 2.0 * std::log(llt.matrixL()(k, k));
    return ld;
  };
  // ln(|Sigma_x| / |S|) = ln|Sigma_x| + ln|S^{-1}|
  const double log_ratio = logdet(llt_x, d) + logdet(llt_sinv, d);
  const Vec diff = cost.target - state_mean;
  return 0.5 * log_ratio + 0.5 * diff.dot(llt_m.solve(diff));
}

/// Latent KL-control problem of a learned HMM: uncontrolled law is the
/// HMM transition matrix and the state cost is the Gaussian-smoothed
/// observation cost per state. alpha already enters the smoothing
/// integral, so the problem's own cost_scale is 1.
inline klcore::KlProblem build_latent_problem(const hmm::GaussianHmm& model,
                                              const QuadraticCost& cost) {
  model.validate();
  cost.validate();
  Vec q(model.n_states);
  for (int k = 0; k < model.n_states; ++k)
    q(k) = latent_cost(cost, model.means.row(k).transpose(), model.covariances[k]);
  return klcore::KlProblem(model.transition, q, 1.0);
}

/// Closed-loop controller state: learned model, latent solution, gain and
/// the controlled filter. The first observation initializes the filter
/// from the model's initial distribution; later observations advance it
/// under the optimal law. Both predictive means condition on the
/// controlled filtered state.
struct HmmController {
  hmm::GaussianHmm model;
  klcore::KlSolution solution;
  Mat gain;  // d x D
  QuadraticCost cost;
  hmm::FilterState filter;
  bool initialized = false;

  HmmController() = default;
  HmmController(hmm::GaussianHmm m, klcore::KlSolution s, Mat k, QuadraticCost c)
      : model(std::move(m)), solution(std::move(s)), gain(std::move(k)), cost(std::move(c)),
        cache_(std::make_shared<hmm::EmissionCache>(model)) {}

  const hmm::EmissionCache& cache() {
    if (!cache_) cache_ = std::make_shared<hmm::EmissionCache>(model);
    return *cache_;
  }

 private:
  std::shared_ptr<hmm::EmissionCache> cache_;
};

/// One control step: filter the new observation under u*, form the
/// one-step predictive means under u* and under P, return
/// tau = K (ybar_u - ybar_p).
inline Vec control_step(HmmController& ctl, const Vec& observation) {
  if (!ctl.initialized) {
    ctl.filter = hmm::filter_init(ctl.model, ctl.cache(), observation);
    ctl.initialized = true;
  } else {
    ctl.filter = hmm::filter_step(ctl.model, ctl.cache(), ctl.filter, ctl.solution.optimal_control,
                                  observation);
  }
  const Vec ybar_u = hmm::predictive_mean(ctl.model, ctl.filter, ctl.solution.optimal_control);
  const Vec ybar_p = hmm::predictive_mean(ctl.model, ctl.filter, ctl.model.transition);
  return ctl.gain * (ybar_u - ybar_p);
}

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const QuadraticCost& c) {
  return json{{"target", vector_to_json(c.target)},
              {"weight_inverse_cov", matrix_to_json(c.weight_inverse_cov)},
              {"scale", c.scale}};
}

inline QuadraticCost quadratic_cost_from_json(const json& j) {
  QuadraticCost c;
  c.target = vector_from_json(j.at("target"));
  c.weight_inverse_cov = matrix_from_json(j.at("weight_inverse_cov"));
  c.scale = j.at("scale").get<double>();
  return c;
}

/// Bundle of everything needed to replay a controlled episode.
inline json to_json(const HmmController& ctl) {
  return json{{"format", "lkc.controller"},
              {"version", 1},
              {"model", hmm::to_json(ctl.model)},
              {"solution", klcore::to_json(ctl.solution)},
              {"gain", matrix_to_json(ctl.gain)},
              {"cost", to_json(ctl.cost)}};
}

inline HmmController controller_from_json(const json& j) {
  expect_format(j, "lkc.controller", 1);
  return HmmController(hmm::hmm_from_json(j.at("model")),
                       klcore::klsolution_from_json(j.at("solution")),
                       matrix_from_json(j.at("gain")), quadratic_cost_from_json(j.at("cost")));
}

}  // namespace lkc::hmmctl
