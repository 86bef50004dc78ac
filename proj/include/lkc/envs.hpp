#pragma once

// Deterministic control-affine simulation environments
// y' = y + dt (f(y) + B(y) tau) under first-order Euler integration, plus
// exploration-noise rollout generation and trajectory file IO.

#include <lkc/common.hpp>

#include <Eigen/Eigenvalues>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace lkc::envs {

inline double wrap_angle(double theta) {
  // maps onto (-pi, pi]
  double w = std::fmod(theta + M_PI, 2.0 * M_PI);
  if (w <= 0.0) w += 2.0 * M_PI;
  return w - M_PI;
}

// ---------------------------------------------------------------------------
// Pendulum swing-up with limited torque. theta = 0 is upright; the torque
// limit is below the maximal load torque m*g*l, so swinging is required.

struct PendulumEnv {
  double mass = 1.0;
  double length = 1.0;
  double gravity = 9.8;
  double damping = 0.25;
  double torque_limit = 5.0;
  double dt = 0.01;
  double omega_limit = 4.0 * M_PI;
  Vec sigma_q = (Vec(2) << 0.005, 0.02).finished();  // task cost weights

  Vec step(const Vec& y, const Vec& tau_in) const {
    const double ml2 = mass * length * length;
    const double tau = std::clamp(tau_in(0), -torque_limit, torque_limit);
    Vec out(2);
    out(0) = wrap_angle(y(0) + dt * y(1));
    out(1) = y(1) + dt * (gravity / length * std::sin(y(0)) - damping / ml2 * y(1) + tau / ml2);
    out(1) = std::clamp(out(1), -omega_limit, omega_limit);
    return out;
  }

  bool admissible(const Vec& y) const {
    return std::abs(y(0)) <= M_PI + 1e-12 && std::abs(y(1)) <= omega_limit + 1e-12;
  }

  double task_cost(const Vec& y) const {
    return y(0) * y(0) / sigma_q(0) + y(1) * y(1) / sigma_q(1);
  }

  double energy(const Vec& y) const {
    const double ml2 = mass * length * length;
    return 0.5 * ml2 * y(1) * y(1) + mass * gravity * length * std::cos(y(0));
  }

  Vec random_state(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> th(-M_PI, M_PI), om(-omega_limit, omega_limit);
    Vec y(2);
    y << wrap_angle(th(rng)), om(rng);
    return y;
  }

  /// Evaluation-episode start: random angle at rest. Exploration keeps
  /// the full-velocity-range draw above for phase-plane coverage.
  Vec random_task_state(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> th(-M_PI, M_PI);
    Vec y(2);
    y << wrap_angle(th(rng)), 0.0;
    return y;
  }
};

// ---------------------------------------------------------------------------
// Two-link arm under velocity control with a disc obstacle in the
// workspace. Steps that would collide or leave the joint limits are
// rejected and the state held, so the uncontrolled dynamics stays a valid
// Markov kernel on the admissible set.

struct TwoLinkArmEnv {
  double dt = 0.01;
  double joint_limit = M_PI;
  double link_length = 1.0;
  Vec obstacle_center = (Vec(2) << 1.6, 0.0).finished();
  double obstacle_radius = 0.35;
  Vec goal = (Vec(2) << -M_PI / 2.0, M_PI / 2.0).finished();
  Vec sigma_q = (Vec(2) << 0.01, 0.01).finished();

  bool collision(const Vec& y) const {
    const double r = obstacle_radius;
    Vec p0 = Vec::Zero(2);
    Vec p1(2), p2(2);
    p1 << link_length * std::cos(y(0)), link_length * std::sin(y(0));
    p2 = p1;
    p2(0) += link_length * std::cos(y(0) + y(1));
    p2(1) += link_length * std::sin(y(0) + y(1));
    return segment_point_distance(p0, p1, obstacle_center) < r ||
           segment_point_distance(p1, p2, obstacle_center) < r;
  }

  bool admissible(const Vec& y) const {
    return std::abs(y(0)) <= joint_limit && std::abs(y(1)) <= joint_limit && !collision(y);
  }

  Vec step(const Vec& y, const Vec& tau) const {
    Vec cand = y + dt * tau;  // f == 0, B == I
    return admissible(cand) ? cand : y;
  }

  double task_cost(const Vec& y) const {
    const Vec d = y - goal;
    return d(0) * d(0) / sigma_q(0) + d(1) * d(1) / sigma_q(1);
  }

  Vec random_state(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> u(-joint_limit, joint_limit);
    for (int tries = 0; tries < 10000; ++tries) {
      Vec y(2);
      y << u(rng), u(rng);
      if (admissible(y)) return y;
    }
    throw Error("TwoLinkArmEnv: could not sample an admissible state");
  }

  static double segment_point_distance(const Vec& a, const Vec& b, const Vec& p) {
    const Vec ab = b - a;
    const double len2 = ab.squaredNorm();
    double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return (a + t * ab - p).norm();
  }
};

// ---------------------------------------------------------------------------
// Planar redundant arm with J unit links, velocity control and joint
// limits enforced by clamping.

/// End-effector position of a chain of unit links:
/// T(y) = [sum_n cos(sum_{j<=n} y_j), sum_n sin(sum_{j<=n} y_j)].
inline Vec forward_kinematics(const Vec& angles) {
  Vec p = Vec::Zero(2);
  double acc = 0;
  for (Eigen::Index i = 0; i < angles.size(); ++i) {
    acc += angles(i);
    p(0) += std::cos(acc);
    p(1) += std::sin(acc);
  }
  return p;
}

struct ReachArmEnv {
  int joints = 2;
  double dt = 0.01;
  double joint_limit = M_PI / 2.0;
  Vec target = (Vec(2) << 2.0, 0.0).finished();

  Vec step(const Vec& y, const Vec& tau) const {
    Vec out = y + dt * tau;
    for (int i = 0; i < joints; ++i) out(i) = std::clamp(out(i), -joint_limit, joint_limit);
    return out;
  }

  bool admissible(const Vec& y) const {
    return (y.cwiseAbs().array() <= joint_limit + 1e-12).all();
  }

  double task_cost(const Vec& y) const { return (target - forward_kinematics(y)).norm(); }

  Vec random_state(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> u(-joint_limit, joint_limit);
    Vec y(joints);
    for (int i = 0; i < joints; ++i) y(i) = u(rng);
    return y;
  }
};

// ---------------------------------------------------------------------------
// Runtime-polymorphic environment handle

using Environment = std::variant<PendulumEnv, TwoLinkArmEnv, ReachArmEnv>;

inline Vec step(const Environment& env, const Vec& y, const Vec& tau) {
  return std::visit([&](const auto& e) { return e.step(y, tau); }, env);
}
inline bool admissible(const Environment& env, const Vec& y) {
  return std::visit([&](const auto& e) { return e.admissible(y); }, env);
}
inline double task_cost(const Environment& env, const Vec& y) {
  return std::visit([&](const auto& e) { return e.task_cost(y); }, env);
}
inline Vec random_state(const Environment& env, std::mt19937_64& rng) {
  return std::visit([&](const auto& e) { return e.random_state(rng); }, env);
}
inline Vec random_task_state(const Environment& env, std::mt19937_64& rng) {
  if (const auto* p = std::get_if<PendulumEnv>(&env)) return p->random_task_state(rng);
  return random_state(env, rng);
}
inline int state_dim(const Environment& env) {
  if (std::holds_alternative<ReachArmEnv>(env)) return std::get<ReachArmEnv>(env).joints;
  return 2;
}
inline int control_dim(const Environment& env) {
  if (std::holds_alternative<PendulumEnv>(env)) return 1;
  return state_dim(env);
}
inline double env_dt(const Environment& env) {
  return std::visit([](const auto& e) { return e.dt; }, env);
}
inline std::string env_tag(const Environment& env) {
  if (std::holds_alternative<PendulumEnv>(env)) return "pendulum";
  if (std::holds_alternative<TwoLinkArmEnv>(env)) return "two_link_arm";
  return "reach_arm";
}

// ---------------------------------------------------------------------------
// Exploration rollouts and trajectory files

/// Time-indexed record of one rollout: y_t is the state at which tau_t was
/// applied. Carries the environment (with its parameters) and the RNG seed
/// that produced it.
struct Trajectory {
  Environment env;
  std::uint64_t seed = 0;
  std::vector<Vec> states;
  std::vector<Vec> controls;

  int length() const { return static_cast<int>(states.size()); }
  double dt() const { return env_dt(env); }

  void validate() const {
    if (states.size() != controls.size()) throw InvalidModel("Trajectory: length mismatch");
    for (const auto& y : states)
      if (!admissible(env, y)) throw InvalidModel("Trajectory: inadmissible state");
  }
};

/// Symmetric PSD square root, tolerant of zero and rank-deficient noise
/// covariances.
inline Mat psd_sqrt(const Mat& s) {
  Eigen::SelfAdjointEigenSolver<Mat> es(s);
  if (es.eigenvalues().minCoeff() < -1e-10) throw InvalidModel("noise covariance not PSD");
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

/// Rollout driven purely by exploration noise tau_t ~ N(0, noise_cov).
/// Deterministic given the seed; the initial state is drawn from the
/// environment unless given explicitly.
inline Trajectory explore_rollout(const Environment& env, int steps, const Mat& noise_cov,
                                  std::uint64_t seed, const Vec* init_state = nullptr) {
  if (steps < 1) throw InvalidModel("explore_rollout: need at least one step");
  const int d = control_dim(env);
  if (noise_cov.rows() != d || noise_cov.cols() != d)
    throw InvalidModel("explore_rollout: noise covariance has wrong size");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Mat root = psd_sqrt(noise_cov);

  Trajectory traj;
  traj.env = env;
  traj.seed = seed;
  traj.states.reserve(steps);
  traj.controls.reserve(steps);
  Vec y = init_state ? *init_state : random_state(env, rng);
  for (int t = 0; t < steps; ++t) {
    Vec eta(d);
    for (int i = 0; i < d; ++i) eta(i) = gauss(rng);
    Vec tau = root * eta;
    traj.states.push_back(y);
    traj.controls.push_back(tau);
    y = step(env, y, tau);
  }
  return traj;
}

// --- text format -----------------------------------------------------------

namespace detail {

inline std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::vector<std::pair<std::string, double>> env_params(const Environment& env) {
  std::vector<std::pair<std::string, double>> p;
  if (const auto* e = std::get_if<PendulumEnv>(&env)) {
    p = {{"mass", e->mass},       {"length", e->length},
         {"gravity", e->gravity}, {"damping", e->damping},
         {"torque_limit", e->torque_limit}, {"omega_limit", e->omega_limit},
         {"sigma_q0", e->sigma_q(0)}, {"sigma_q1", e->sigma_q(1)}};
  } else if (const auto* e = std::get_if<TwoLinkArmEnv>(&env)) {
    p = {{"joint_limit", e->joint_limit},
         {"link_length", e->link_length},
         {"obstacle_x", e->obstacle_center(0)},
         {"obstacle_y", e->obstacle_center(1)},
         {"obstacle_radius", e->obstacle_radius},
         {"goal0", e->goal(0)},
         {"goal1", e->goal(1)},
         {"sigma_q0", e->sigma_q(0)},
         {"sigma_q1", e->sigma_q(1)}};
  } else if (const auto* e = std::get_if<ReachArmEnv>(&env)) {
    p = {{"joints", static_cast<double>(e->joints)},
         {"joint_limit", e->joint_limit},
         {"target_x", e->target(0)},
         {"target_y", e->target(1)}};
  }
  return p;
}

inline Environment env_from_params(const std::string& tag,
                                   const std::vector<std::pair<std::string, double>>& params,
                                   double dt) {
  auto get = [&](const std::string& k) {
    for (const auto& [key, v] : params)
      if (key == k) return v;
    throw IoError("trajectory header missing parameter " + k);
  };
  if (tag == "pendulum") {
    PendulumEnv e;
    e.dt = dt;
    e.mass = get("mass");
    e.length = get("length");
    e.gravity = get("gravity");
    e.damping = get("damping");
    e.torque_limit = get("torque_limit");
    e.omega_limit = get("omega_limit");
    e.sigma_q << get("sigma_q0"), get("sigma_q1");
    return e;
  }
  if (tag == "two_link_arm") {
    TwoLinkArmEnv e;
    e.dt = dt;
    e.joint_limit = get("joint_limit");
    e.link_length = get("link_length");
    e.obstacle_center << get("obstacle_x"), get("obstacle_y");
    e.obstacle_radius = get("obstacle_radius");
    e.goal << get("goal0"), get("goal1");
    e.sigma_q << get("sigma_q0"), get("sigma_q1");
    return e;
  }
  if (tag == "reach_arm") {
    ReachArmEnv e;
    e.dt = dt;
    e.joints = static_cast<int>(get("joints"));
    e.joint_limit = get("joint_limit");
    e.target << get("target_x"), get("target_y");
    return e;
  }
  throw IoError("unknown environment tag " + tag);
}

}  // namespace detail

/// Writes the line-oriented trajectory format: a '#' header block followed
/// by one record per time index. %.17g rendering makes save/load/save
/// byte-identical.
inline void save_trajectory(const Trajectory& traj, std::ostream& out) {
  using detail::fmt_double;
  const int sd = state_dim(traj.env), cd = control_dim(traj.env);
  out << "# lkc-trajectory v1\n";
  out << "# env " << env_tag(traj.env) << "\n";
  out << "# dt " << fmt_double(traj.dt()) << "\n";
  out << "# seed " << traj.seed << "\n";
  for (const auto& [k, v] : detail::env_params(traj.env))
    out << "# param " << k << " " << fmt_double(v) << "\n";
  out << "# columns t";
  for (int i = 0; i < sd; ++i) out << " y" << i;
  for (int i = 0; i < cd; ++i) out << " tau" << i;
  out << "\n";
  for (std::size_t t = 0; t < traj.states.size(); ++t) {
    out << t;
    for (int i = 0; i < sd; ++i) out << " " << fmt_double(traj.states[t](i));
    for (int i = 0; i < cd; ++i) out << " " << fmt_double(traj.controls[t](i));
    out << "\n";
  }
}

inline void save_trajectory(const Trajectory& traj, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  save_trajectory(traj, out);
  if (!out) throw IoError("write failed: " + path);
}

inline Trajectory load_trajectory(std::istream& in) {
  std::string line;
  std::string tag;
  double dt = 0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, double>> params;
  bool got_version = false;
  Trajectory traj;
  bool env_built = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ls(line.substr(1));
      std::string key;
      ls >> key;
      if (key == "lkc-trajectory") {
        std::string v;
        ls >> v;
        if (v != "v1") throw IoError("unsupported trajectory version " + v);
        got_version = true;
      } else if (key == "env") {
        ls >> tag;
      } else if (key == "dt") {
        ls >> dt;
      } else if (key == "seed") {
        ls >> seed;
      } else if (key == "param") {
        std::string name;
        double value;
        ls >> name >> value;
        params.emplace_back(name, value);
      } else if (key == "columns") {
        // informational
      } else {
        throw IoError("unknown trajectory header line: " + line);
      }
      continue;
    }
    if (!env_built) {
      if (!got_version || tag.empty()) throw IoError("trajectory data before complete header");
      traj.env = detail::env_from_params(tag, params, dt);
      traj.seed = seed;
      env_built = true;
    }
    std::istringstream ls(line);
    long t;
    ls >> t;
    const int sd = state_dim(traj.env), cd = control_dim(traj.env);
    Vec y(sd), tau(cd);
    for (int i = 0; i < sd; ++i) ls >> y(i);
    for (int i = 0; i < cd; ++i) ls >> tau(i);
    if (!ls) throw IoError("malformed trajectory record: " + line);
    traj.states.push_back(std::move(y));
    traj.controls.push_back(std::move(tau));
  }
  if (!env_built) {
    if (!got_version || tag.empty()) throw IoError("empty trajectory file");
    traj.env = detail::env_from_params(tag, params, dt);
    traj.seed = seed;
  }
  return traj;
}

inline Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  return load_trajectory(in);
}

}  // namespace lkc::envs
