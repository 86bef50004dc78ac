#pragma once

// Experiment harness: reads one config file per command, with no hidden
// state between commands. collect -> train -> solve -> run mirrors the
// three-step latent-control pipeline; eval-scaling sweeps the reaching
// task over the number of joints and emits the scaling curves as CSV.

#include <lkc/common.hpp>
#include <lkc/envs.hpp>
#include <lkc/fhmm.hpp>
#include <lkc/fhmmctl.hpp>
#include <lkc/hmm.hpp>
#include <lkc/hmmctl.hpp>
#include <lkc/klcore.hpp>
#include <lkc/serialize.hpp>

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lkc::harness {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  json raw;  // validated canonical config (after any CLI overrides)
  std::uint64_t seed = 1;

  // environment
  std::string env_type;
  double dt = 0.01;
  int joints = 2;
  Vec obstacle_center = (Vec(2) << 1.6, 0.0).finished();
  double obstacle_radius = 0.35;

  // exploration
  double sigma_eps_sq = 1.5;
  int explore_steps = 30000;
  int rollouts = 1;
  bool explore_random_init = true;
  Vec explore_init_state;

  // model
  std::string model_type;  // hmm | fhmm
  int n_states = 225;
  int n_values = 20;  // K
  int em_max_iter = 50;
  double em_tol = 1e-6;
  int mean_field_sweeps = 10;
  double mean_field_tol = 1e-6;
  int window = 4;  // H
  double obs_noise_std = 0.1;
  bool learn_obs_cov = false;
  double transition_smoothing = 1e-3;

  // cost
  double alpha0 = 0.2;
  Vec sigma_q_diag;
  Vec cost_target;
  std::vector<int> target_joint_indices;  // reaching targets snapped to the grid

  // controller
  Mat gain;
  int samples = 100;  // L
  int episode_steps = 2000;
  int episodes = 20;
  bool episode_random_init = true;
  Vec episode_init_state;

  // solver
  std::string solver_type = "exact";  // exact | vkl | avkl | vi
  double solver_tol = 1e-8;
  int solver_max_iter = 200000;
  int max_outer = 50;
  double outer_tol = 1e-6;
  long exact_cap = 4096;
  long vkl_budget = 1000000;
  long objective_cap = 4096;
  int vi_theta_bins = 35;
  int vi_omega_bins = 35;
  int vi_actions = 15;

  // scaling sweep
  std::vector<int> scaling_joints = {2, 3, 4, 6, 8, 10};
  std::vector<std::string> scaling_solvers = {"exact", "vkl", "avkl"};
  int scaling_episodes = 50;
  int scaling_repeats = 3;

  /// alpha = alpha0 dt / sigma_eps^2: the exploration-noise variance sets
  /// the KL cost unit, so the state-cost scale is normalized by it.
  double alpha() const { return alpha0 * dt / sigma_eps_sq; }

  envs::Environment make_env() const {
    if (env_type == "pendulum") {
      envs::PendulumEnv e;
      e.dt = dt;
      if (sigma_q_diag.size() == 2) e.sigma_q = sigma_q_diag;
      return e;
    }
    if (env_type == "two_link_arm") {
      envs::TwoLinkArmEnv e;
      e.dt = dt;
      e.obstacle_center = obstacle_center;
      e.obstacle_radius = obstacle_radius;
      if (sigma_q_diag.size() == 2) e.sigma_q = sigma_q_diag;
      if (cost_target.size() == 2) e.goal = cost_target;
      return e;
    }
    if (env_type == "reach_arm") {
      envs::ReachArmEnv e;
      e.dt = dt;
      e.joints = joints;
      e.target = reaching_target();
      return e;
    }
    throw ConfigError("unknown environment type '" + env_type + "'");
  }

  Vec value_grid() const { return Vec::LinSpaced(n_values, -M_PI / 2.0, M_PI / 2.0); }

  /// Reaching target = forward kinematics of a grid-representable joint
  /// vector, so no space-quantization error enters the comparison.
  Vec reaching_target() const {
    if (static_cast<int>(target_joint_indices.size()) != joints)
      throw ConfigError("cost.target_joint_indices must list one grid index per joint");
    const Vec grid = value_grid();
    Vec q(joints);
    for (int i = 0; i < joints; ++i) {
      const int idx = target_joint_indices[i];
      if (idx < 0 || idx >= n_values) throw ConfigError("target joint index out of grid range");
      q(i) = grid(idx);
    }
    return envs::forward_kinematics(q);
  }

  std::string hash() const {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(raw.dump())));
    return buf;
  }
};

namespace detail {

inline void require_known_keys(const json& j, const std::string& section,
                               std::initializer_list<const char*> keys) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("unknown key '" + it.key() + "' in config section '" + section + "'");
  }
}

inline Vec vec_of(const json& j) {
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j[static_cast<std::size_t>(i)].get<double>();
  return v;
}

inline Mat mat_of(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) throw ConfigError("matrix value must have at least one row");
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(r)].size()) != cols)
      throw ConfigError("matrix value has ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace detail

/// Parses and validates a config object. Unknown keys anywhere are
/// errors; silent typos are the main reproduction hazard.
inline ExperimentConfig parse_config(json j, std::optional<std::uint64_t> seed_override = {},
                                     std::optional<std::string> solver_override = {}) {
  using detail::require_known_keys;
  ExperimentConfig c;
  require_known_keys(j, "<root>",
                     {"seed", "environment", "exploration", "model", "cost", "controller",
                      "solver", "scaling"});
  c.seed = j.value("seed", 1ull);
  if (seed_override) {
    c.seed = *seed_override;
    j["seed"] = *seed_override;
  }

  if (!j.contains("environment")) throw ConfigError("config is missing 'environment'");
  {
    const json& e = j.at("environment");
    require_known_keys(e, "environment",
                       {"type", "dt", "joints", "obstacle_center", "obstacle_radius"});
    c.env_type = e.at("type").get<std::string>();
    if (c.env_type != "pendulum" && c.env_type != "two_link_arm" && c.env_type != "reach_arm")
      throw ConfigError("environment.type must be pendulum | two_link_arm | reach_arm");
    c.dt = e.value("dt", 0.01);
    if (!(c.dt > 0)) throw ConfigError("environment.dt must be positive");
    c.joints = e.value("joints", 2);
    if (c.joints < 1 || c.joints > 64) throw ConfigError("environment.joints out of range");
    if (e.contains("obstacle_center")) c.obstacle_center = detail::vec_of(e.at("obstacle_center"));
    c.obstacle_radius = e.value("obstacle_radius", 0.35);
  }
  if (j.contains("exploration")) {
    const json& e = j.at("exploration");
    require_known_keys(e, "exploration",
                       {"sigma_eps_sq", "steps", "rollouts", "init", "init_state"});
    c.sigma_eps_sq = e.value("sigma_eps_sq", 1.5);
    if (!(c.sigma_eps_sq >= 0)) throw ConfigError("exploration.sigma_eps_sq must be >= 0");
    c.explore_steps = e.value("steps", 30000);
    if (c.explore_steps < 1) throw ConfigError("exploration.steps must be >= 1");
    c.rollouts = e.value("rollouts", 1);
    if (c.rollouts < 1) throw ConfigError("exploration.rollouts must be >= 1");
    const std::string init = e.value("init", "random");
    if (init != "random" && init != "fixed") throw ConfigError("exploration.init must be random | fixed");
    c.explore_random_init = init == "random";
    if (e.contains("init_state")) c.explore_init_state = detail::vec_of(e.at("init_state"));
    if (!c.explore_random_init && c.explore_init_state.size() == 0)
      throw ConfigError("exploration.init_state required when init == fixed");
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    require_known_keys(m, "model",
                       {"type", "n_states", "values", "em_max_iter", "em_tol",
                        "mean_field_sweeps", "mean_field_tol", "window", "obs_noise_std",
                        "learn_obs_cov", "transition_smoothing"});
    c.model_type = m.value("type", std::string(c.env_type == "reach_arm" ? "fhmm" : "hmm"));
    if (c.model_type != "hmm" && c.model_type != "fhmm")
      throw ConfigError("model.type must be hmm | fhmm");
    c.n_states = m.value("n_states", 225);
    c.n_values = m.value("values", 20);
    if (c.n_states < 1 || c.n_values < 2) throw ConfigError("model size out of range");
    c.em_max_iter = m.value("em_max_iter", 50);
    c.em_tol = m.value("em_tol", 1e-6);
    c.mean_field_sweeps = m.value("mean_field_sweeps", 10);
    c.mean_field_tol = m.value("mean_field_tol", 1e-6);
    c.window = m.value("window", 2 * c.joints);
    if (c.window < 1) throw ConfigError("model.window must be >= 1");
    c.obs_noise_std = m.value("obs_noise_std", 0.1);
    c.learn_obs_cov = m.value("learn_obs_cov", false);
    c.transition_smoothing = m.value("transition_smoothing", 1e-3);
  } else {
    c.model_type = c.env_type == "reach_arm" ? "fhmm" : "hmm";
    c.window = 2 * c.joints;
  }
  if (j.contains("cost")) {
    const json& q = j.at("cost");
    require_known_keys(q, "cost", {"alpha0", "sigma_q_diag", "target", "target_joint_indices"});
    c.alpha0 = q.value("alpha0", 0.2);
    if (c.alpha0 < 0) throw ConfigError("cost.alpha0 must be >= 0");
    if (q.contains("sigma_q_diag")) c.sigma_q_diag = detail::vec_of(q.at("sigma_q_diag"));
    if (q.contains("target")) c.cost_target = detail::vec_of(q.at("target"));
    if (q.contains("target_joint_indices"))
      c.target_joint_indices = q.at("target_joint_indices").get<std::vector<int>>();
  }
  if (c.sigma_q_diag.size() == 0)
    c.sigma_q_diag = c.env_type == "two_link_arm" ? (Vec(2) << 0.01, 0.01).finished()
                                                  : (Vec(2) << 0.005, 0.02).finished();
  if (c.cost_target.size() == 0 && c.env_type != "reach_arm")
    c.cost_target = c.env_type == "two_link_arm"
                        ? (Vec(2) << -M_PI / 2.0, M_PI / 2.0).finished()
                        : Vec::Zero(2);
  if (c.env_type == "reach_arm" && c.target_joint_indices.empty())
    c.target_joint_indices.assign(static_cast<std::size_t>(c.joints), c.n_values - 1);

  if (j.contains("controller")) {
    const json& k = j.at("controller");
    require_known_keys(k, "controller",
                       {"gain", "samples", "episode_steps", "episodes", "init", "init_state"});
    if (k.contains("gain")) c.gain = detail::mat_of(k.at("gain"));
    c.samples = k.value("samples", 100);
    if (c.samples < 1) throw ConfigError("controller.samples must be >= 1");
    c.episode_steps = k.value("episode_steps", 2000);
    c.episodes = k.value("episodes", 20);
    if (c.episode_steps < 1 || c.episodes < 1) throw ConfigError("controller episode counts invalid");
    const std::string init = k.value("init", "random");
    if (init != "random" && init != "fixed") throw ConfigError("controller.init must be random | fixed");
    c.episode_random_init = init == "random";
    if (k.contains("init_state")) c.episode_init_state = detail::vec_of(k.at("init_state"));
    if (!c.episode_random_init && c.episode_init_state.size() == 0)
      throw ConfigError("controller.init_state required when init == fixed");
  }
  if (c.gain.size() == 0) {
    if (c.env_type == "pendulum") c.gain = (Mat(1, 2) << 50.0, 10.0).finished();
    else if (c.env_type == "two_link_arm") c.gain = (Mat(2, 2) << 3.0, 0.0, 0.0, 0.5).finished();
    else c.gain = 5.0 * Mat::Identity(c.joints, c.joints);
  }

  if (j.contains("solver")) {
    const json& s = j.at("solver");
    require_known_keys(s, "solver",
                       {"type", "tol", "max_iter", "max_outer", "outer_tol", "exact_cap",
                        "vkl_budget", "objective_cap", "vi_theta_bins", "vi_omega_bins",
                        "vi_actions"});
    c.solver_type = s.value("type", "exact");
    if (c.solver_type != "exact" && c.solver_type != "vkl" && c.solver_type != "avkl" &&
        c.solver_type != "vi")
      throw ConfigError("solver.type must be exact | vkl | avkl | vi");
    c.solver_tol = s.value("tol", 1e-8);
    if (!(c.solver_tol > 0)) throw ConfigError("solver.tol must be positive");
    c.solver_max_iter = s.value("max_iter", 200000);
    c.max_outer = s.value("max_outer", 50);
    c.outer_tol = s.value("outer_tol", 1e-6);
    c.exact_cap = s.value("exact_cap", 4096l);
    c.vkl_budget = s.value("vkl_budget", 1000000l);
    c.objective_cap = s.value("objective_cap", 4096l);
    c.vi_theta_bins = s.value("vi_theta_bins", 35);
    c.vi_omega_bins = s.value("vi_omega_bins", 35);
    c.vi_actions = s.value("vi_actions", 15);
    if (c.vi_theta_bins < 3 || c.vi_omega_bins < 3 || c.vi_actions < 2)
      throw ConfigError("solver VI grid settings out of range");
  }
  if (j.contains("scaling")) {
    const json& s = j.at("scaling");
    require_known_keys(s, "scaling", {"joint_list", "solvers", "episodes", "repeats"});
    if (s.contains("joint_list")) c.scaling_joints = s.at("joint_list").get<std::vector<int>>();
    if (s.contains("solvers")) c.scaling_solvers = s.at("solvers").get<std::vector<std::string>>();
    c.scaling_episodes = s.value("episodes", 50);
    c.scaling_repeats = s.value("repeats", 3);
  }
  c.raw = std::move(j);
  return c;
}

inline ExperimentConfig load_config(const std::string& path,
                                    std::optional<std::uint64_t> seed_override = {},
                                    std::optional<std::string> solver_override = {}) {
  json j = read_json_file(path);
  if (solver_override) {
    if (!j.contains("solver")) j["solver"] = json::object();
    j["solver"]["type"] = *solver_override;
  }
  return parse_config(std::move(j), seed_override);
}

// ---------------------------------------------------------------------------
// Seed streams: every phase derives independent generators from the root
// seed with documented stream tags, so commands are reproducible in
// isolation.

enum class SeedStream : std::uint64_t {
  collect = 1,
  train = 2,
  solve = 3,
  run = 4,
  scaling = 5,
};

inline std::uint64_t phase_seed(const ExperimentConfig& c, SeedStream phase, std::uint64_t item) {
  return derive_seed(derive_seed(c.seed, static_cast<std::uint64_t>(phase)), item);
}

// ---------------------------------------------------------------------------
// collect

/// Writes one trajectory file per exploration rollout and returns the
/// paths. Rollout r uses the derived seed stream (root, collect, r).
inline std::vector<std::string> cmd_collect(const ExperimentConfig& c, const std::string& out_dir) {
  const envs::Environment env = c.make_env();
  const int d = envs::control_dim(env);
  const Mat noise = c.sigma_eps_sq * Mat::Identity(d, d);
  fs::create_directories(out_dir);
  std::vector<std::string> paths;
  for (int r = 0; r < c.rollouts; ++r) {
    const std::uint64_t seed = phase_seed(c, SeedStream::collect, static_cast<std::uint64_t>(r));
    const Vec* init = nullptr;
    Vec fixed;
    if (!c.explore_random_init) {
      fixed = c.explore_init_state;
      init = &fixed;
    }
    auto traj = envs::explore_rollout(env, c.explore_steps, noise, seed, init);
    char name[64];
    std::snprintf(name, sizeof name, "rollout_%03d.traj", r);
    const std::string path = (fs::path(out_dir) / name).string();
    envs::save_trajectory(traj, path);
    paths.push_back(path);
  }
  return paths;
}

// ---------------------------------------------------------------------------
// train

struct TrainResult {
  std::string model_path;
  std::vector<double> trace;  // log-likelihood (hmm) or variational bound (fhmm)
};

/// Grid-structured weight matrices for the reaching model: chain m's
/// column k places grid value k in row m and zero elsewhere, so each
/// factored state represents one joint.
inline std::vector<Mat> grid_weights(int joints, const Vec& grid) {
  std::vector<Mat> w(joints, Mat::Zero(joints, grid.size()));
  for (int m = 0; m < joints; ++m) w[m].row(m) = grid.transpose();
  return w;
}

inline fhmm::FactorialHmm make_fhmm_init(const ExperimentConfig& c) {
  fhmm::FactorialHmm m;
  m.n_chains = c.joints;
  m.n_values = c.n_values;
  const Vec grid = c.value_grid();
  m.value_grid = grid;
  m.weights = grid_weights(c.joints, grid);
  m.obs_cov = c.obs_noise_std * c.obs_noise_std * Mat::Identity(c.joints, c.joints);
  // banded random-walk prior: staying is likely, neighbor cells reachable
  Mat p0 = Mat::Zero(c.n_values, c.n_values);
  for (int i = 0; i < c.n_values; ++i) {
    p0(i, i) = 0.6;
    if (i > 0) p0(i, i - 1) = 0.2;
    if (i + 1 < c.n_values) p0(i, i + 1) = 0.2;
    p0.row(i) /= p0.row(i).sum();
  }
  m.transitions.assign(c.joints, p0);
  m.initials.assign(c.joints, Vec::Constant(c.n_values, 1.0 / c.n_values));
  return m;
}

inline TrainResult cmd_train(const ExperimentConfig& c,
                             const std::vector<std::string>& trajectory_paths,
                             const std::string& out_dir) {
  if (trajectory_paths.empty()) throw ConfigError("train: no trajectory inputs");
  std::vector<Mat> seqs;
  for (const auto& path : trajectory_paths) {
    auto traj = envs::load_trajectory(path);
    Mat seq(traj.length(), envs::state_dim(traj.env));
    for (int t = 0; t < traj.length(); ++t) seq.row(t) = traj.states[t].transpose();
    seqs.push_back(std::move(seq));
  }
  fs::create_directories(out_dir);
  TrainResult res;
  json out;
  if (c.model_type == "hmm") {
    auto init = hmm::init_from_kmeans(seqs, c.n_states, phase_seed(c, SeedStream::train, 0),
                                      c.transition_smoothing);
    hmm::EmOptions opt;
    opt.max_iter = c.em_max_iter;
    opt.tol = c.em_tol;
    auto fit = hmm::em_fit(seqs, init, opt);
    res.trace = fit.log_likelihood;
    out = json{{"format", "lkc.trained_model"},
               {"version", 1},
               {"config_hash", c.hash()},
               {"model", hmm::to_json(fit.model)},
               {"trace", res.trace},
               {"cov_floor_hits", fit.cov_floor_hits}};
  } else {
    auto init = make_fhmm_init(c);
    fhmm::FhmmEmOptions opt;
    opt.max_iter = c.em_max_iter;
    opt.tol = c.em_tol;
    opt.learn_obs_cov = c.learn_obs_cov;
    opt.smf.n_sweeps = c.mean_field_sweeps;
    opt.smf.tol = c.mean_field_tol;
    auto fit = fhmm::em_fit(seqs, init, opt);
    res.trace = fit.bound;
    out = json{{"format", "lkc.trained_model"},
               {"version", 1},
               {"config_hash", c.hash()},
               {"model", fhmm::to_json(fit.model)},
               {"trace", res.trace}};
  }
  res.model_path = (fs::path(out_dir) / "model.json").string();
  write_json_file(res.model_path, out);
  return res;
}

// ---------------------------------------------------------------------------
// solve

inline hmmctl::QuadraticCost make_quadratic_cost(const ExperimentConfig& c) {
  hmmctl::QuadraticCost cost;
  cost.target = c.cost_target;
  cost.weight_inverse_cov = c.sigma_q_diag.cwiseInverse().asDiagonal();
  cost.scale = c.alpha();
  return cost;
}

inline fhmmctl::LatentCostSpec make_latent_cost_spec(const ExperimentConfig& c) {
  fhmmctl::LatentCostSpec spec;
  spec.scale = c.alpha();
  if (c.env_type == "reach_arm") {
    spec.fn = fhmmctl::ReachingCost{c.reaching_target()};
  } else {
    auto quad = make_quadratic_cost(c);
    quad.scale = 1.0;  // the spec's own scale carries alpha
    spec.fn = quad;
  }
  return spec;
}

/// Pendulum discretization for the value-iteration baseline: node grid
/// over the wrapped angle and clamped velocity, true one-step dynamics
/// redistributed onto the four surrounding nodes by bilinear weights, and
/// immediate cost alpha qtilde(y) + 0.5 ||u||^2.
struct ViGrid {
  klcore::ViProblem problem;
  Vec theta_nodes;
  Vec omega_nodes;
  Vec actions;

  int node_index(double theta, double omega) const {
    const int nt = static_cast<int>(theta_nodes.size());
    const int no = static_cast<int>(omega_nodes.size());
    const double dtheta = 2.0 * M_PI / nt;
    int it = static_cast<int>(std::lround((theta - theta_nodes(0)) / dtheta));
    it = ((it % nt) + nt) % nt;
    const double domega = omega_nodes(1) - omega_nodes(0);
    int io = static_cast<int>(std::lround((omega - omega_nodes(0)) / domega));
    io = std::clamp(io, 0, no - 1);
    return io * nt + it;
  }
};

inline ViGrid make_pendulum_vi_grid(const ExperimentConfig& c) {
  envs::PendulumEnv env = std::get<envs::PendulumEnv>(c.make_env());
  ViGrid g;
  const int nt = c.vi_theta_bins, no = c.vi_omega_bins;
  // theta is periodic: nt distinct nodes spaced 2 pi / nt
  g.theta_nodes = Vec::LinSpaced(nt, -M_PI, M_PI - 2.0 * M_PI / nt);
  g.omega_nodes = Vec::LinSpaced(no, -env.omega_limit, env.omega_limit);
  g.actions = Vec::LinSpaced(c.vi_actions, -env.torque_limit, env.torque_limit);

  const int n = nt * no;
  g.problem.n_states = n;
  g.problem.n_actions = c.vi_actions;
  g.problem.transition.assign(c.vi_actions,
                              std::vector<std::vector<std::pair<int, double>>>(n));
  g.problem.immediate_cost.resize(n, c.vi_actions);
  const double dtheta = 2.0 * M_PI / nt;
  const double domega = g.omega_nodes(1) - g.omega_nodes(0);
  const double alpha = c.alpha();
  for (int io = 0; io < no; ++io) {
    for (int it = 0; it < nt; ++it) {
      const int s = io * nt + it;
      Vec y(2);
      y << g.theta_nodes(it), g.omega_nodes(io);
      for (int a = 0; a < c.vi_actions; ++a) {
        const double u = g.actions(a);
        g.problem.immediate_cost(s, a) = alpha * env.task_cost(y) + 0.5 * u * u;
        const Vec next = env.step(y, Vec::Constant(1, u));
        // bilinear weights; theta wraps around, omega clamps at the edges
        double ft = (next(0) - g.theta_nodes(0)) / dtheta;
        int it0 = static_cast<int>(std::floor(ft));
        const double wt = ft - it0;
        it0 = ((it0 % nt) + nt) % nt;
        const int it1 = (it0 + 1) % nt;
        double fo = (next(1) - g.omega_nodes(0)) / domega;
        int io0 = static_cast<int>(std::floor(fo));
        double wo = fo - io0;
        if (io0 < 0) {
          io0 = 0;
          wo = 0;
        }
        if (io0 >= no - 1) {
          io0 = no - 2;
          wo = 1;
        }
        auto& row = g.problem.transition[a][s];
        auto add = [&](int tt, int oo, double w) {
          if (w <= 0) return;
          row.emplace_back(oo * nt + tt, w);
        };
        add(it0, io0, (1 - wt) * (1 - wo));
        add(it1, io0, wt * (1 - wo));
        add(it0, io0 + 1, (1 - wt) * wo);
        add(it1, io0 + 1, wt * wo);
        double total = 0;
        for (auto& [tt, pp] : row) total += pp;
        for (auto& [tt, pp] : row) pp /= total;
      }
    }
  }
  return g;
}

struct SolveResult {
  std::string policy_path;
  json payload;
  double solve_seconds = 0;
};

inline SolveResult cmd_solve(const ExperimentConfig& c, const std::string& model_path,
                             const std::string& out_dir) {
  fs::create_directories(out_dir);
  SolveResult res;
  const auto t0 = std::chrono::steady_clock::now();
  json out{{"format", "lkc.policy"}, {"version", 1}, {"config_hash", c.hash()},
           {"solver", c.solver_type}};

  if (c.solver_type == "vi") {
    if (c.env_type != "pendulum")
      throw ConfigError("solver vi is implemented for the pendulum environment");
    auto grid = make_pendulum_vi_grid(c);
    auto sol = klcore::solve_value_iteration(grid.problem, c.solver_tol, c.solver_max_iter);
    out["vi"] = json{{"value", vector_to_json(sol.value)},
                     {"policy", sol.policy},
                     {"average_cost", sol.average_cost},
                     {"iterations", sol.iterations},
                     {"theta_nodes", vector_to_json(grid.theta_nodes)},
                     {"omega_nodes", vector_to_json(grid.omega_nodes)},
                     {"actions", vector_to_json(grid.actions)}};
  } else if (c.model_type == "hmm") {
    const json mj = read_json_file(model_path);
    auto model = hmm::hmm_from_json(mj.at("model"));
    auto cost = make_quadratic_cost(c);
    auto prob = hmmctl::build_latent_problem(model, cost);
    auto sol = klcore::solve_power_iteration(prob, c.solver_tol, c.solver_max_iter);
    out["solution"] = klcore::to_json(sol);
    out["cost"] = hmmctl::to_json(cost);
  } else {
    const json mj = read_json_file(model_path);
    auto model = fhmm::fhmm_from_json(mj.at("model"));
    auto spec = make_latent_cost_spec(c);
    if (c.solver_type == "exact") {
      auto sol = fhmmctl::solve_exact(model, spec, c.solver_tol, c.solver_max_iter, c.exact_cap,
                                      c.exact_cap);
      out["solution"] = klcore::to_json(sol);
    } else {
      fhmmctl::VklOptions opt;
      opt.max_outer = c.max_outer;
      opt.tol = c.outer_tol;
      opt.eigen_tol = c.solver_tol;
      opt.eigen_max_iter = c.solver_max_iter;
      opt.marginalization_budget = c.vkl_budget;
      opt.objective_cap = c.objective_cap;
      auto pol = c.solver_type == "vkl" ? fhmmctl::solve_vkl(model, spec, opt)
                                        : fhmmctl::solve_avkl(model, spec, opt);
      out["policy"] = fhmmctl::to_json(pol);
    }
  }
  res.solve_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out["timings"] = json{{"solve_seconds", res.solve_seconds}};
  res.policy_path = (fs::path(out_dir) / "policy.json").string();
  res.payload = out;
  write_json_file(res.policy_path, out);
  return res;
}

// ---------------------------------------------------------------------------
// run

struct EpisodeResult {
  std::uint64_t seed = 0;
  Vec initial_state;
  Vec final_state;
  double hold_fraction = 0;   // pendulum
  double final_error = 0;     // arm / reaching
  int collisions = 0;         // two-link arm
  bool success = false;
  double mean_task_cost = 0;
  std::vector<double> step_costs;
  envs::Trajectory trajectory;
};

struct RunReport {
  std::vector<EpisodeResult> episodes;
  double success_rate = 0;
  double mean_error = 0;
  double error_ci_halfwidth = 0;  // 1.96 * standard error
  double run_seconds = 0;
  double control_seconds_per_step = 0;
};

/// Builds the per-episode controller for the configured solver. Policies
/// carry their solver tag, so the payload determines the control path.
inline std::function<Vec(const Vec&)> make_episode_controller(const ExperimentConfig& c,
                                                              const json& model_json,
                                                              const json& policy_json,
                                                              std::uint64_t episode_seed) {
  const std::string solver = policy_json.at("solver").get<std::string>();
  if (solver == "vi") {
    const json& v = policy_json.at("vi");
    auto policy = v.at("policy").get<std::vector<int>>();
    auto actions = vector_from_json(v.at("actions"));
    auto theta_nodes = vector_from_json(v.at("theta_nodes"));
    auto omega_nodes = vector_from_json(v.at("omega_nodes"));
    const int nt = static_cast<int>(theta_nodes.size());
    const int no = static_cast<int>(omega_nodes.size());
    const double dtheta = 2.0 * M_PI / nt;
    const double domega = omega_nodes(1) - omega_nodes(0);
    const double theta0 = theta_nodes(0), omega0 = omega_nodes(0);
    // greedy action at the nearest grid node
    return [=](const Vec& y) -> Vec {
      int it = static_cast<int>(std::lround((y(0) - theta0) / dtheta));
      it = ((it % nt) + nt) % nt;
      int io = static_cast<int>(std::lround((y(1) - omega0) / domega));
      io = std::clamp(io, 0, no - 1);
      return Vec::Constant(1, actions(policy[static_cast<std::size_t>(io * nt + it)]));
    };
  }
  if (c.model_type == "hmm") {
    auto model = hmm::hmm_from_json(model_json.at("model"));
    auto sol = klcore::klsolution_from_json(policy_json.at("solution"));
    auto cost = hmmctl::quadratic_cost_from_json(policy_json.at("cost"));
    auto ctl = std::make_shared<hmmctl::HmmController>(std::move(model), std::move(sol), c.gain,
                                                       std::move(cost));
    return [ctl](const Vec& y) { return hmmctl::control_step(*ctl, y); };
  }
  auto model = fhmm::fhmm_from_json(model_json.at("model"));
  if (solver == "exact") {
    auto sol = klcore::klsolution_from_json(policy_json.at("solution"));
    auto spec = make_latent_cost_spec(c);
    auto ctl = std::make_shared<fhmmctl::ExactFhmmController>(std::move(model), std::move(spec),
                                                              sol.desirability, c.gain);
    return [ctl](const Vec& y) { return ctl->step(y); };
  }
  auto pol = fhmmctl::factored_policy_from_json(policy_json.at("policy"));
  auto ctl = std::make_shared<fhmmctl::FhmmController>();
  ctl->model = std::move(model);
  ctl->policy = std::move(pol);
  ctl->gain = c.gain;
  ctl->window_cap = c.window;
  ctl->n_samples = c.samples;
  ctl->filter_opts.n_sweeps = c.mean_field_sweeps;
  ctl->filter_opts.tol = c.mean_field_tol;
  ctl->seed = episode_seed;
  return [ctl](const Vec& y) { return ctl->step(y); };
}

inline EpisodeResult run_episode(const ExperimentConfig& c, const json& model_json,
                                 const json& policy_json, std::uint64_t episode_seed) {
  const envs::Environment env = c.make_env();
  std::mt19937_64 rng(episode_seed);
  EpisodeResult ep;
  ep.seed = episode_seed;
  Vec y = c.episode_random_init ? envs::random_task_state(env, rng) : c.episode_init_state;
  ep.initial_state = y;
  auto controller = make_episode_controller(c, model_json, policy_json, episode_seed);

  ep.trajectory.env = env;
  ep.trajectory.seed = episode_seed;
  const auto* arm = std::get_if<envs::TwoLinkArmEnv>(&env);
  double cost_acc = 0;
  std::vector<double> thetas;
  for (int t = 0; t < c.episode_steps; ++t) {
    const Vec tau = controller(y);
    ep.trajectory.states.push_back(y);
    ep.trajectory.controls.push_back(tau);
    const double cost = envs::task_cost(env, y);
    ep.step_costs.push_back(cost);
    cost_acc += cost;
    if (arm && arm->collision(y)) ++ep.collisions;
    if (c.env_type == "pendulum") thetas.push_back(std::abs(y(0)));
    y = envs::step(env, y, tau);
  }
  ep.final_state = y;
  ep.mean_task_cost = cost_acc / c.episode_steps;

  if (c.env_type == "pendulum") {
    const std::size_t tail = thetas.size() / 4;
    std::size_t held = 0;
    for (std::size_t i = thetas.size() - tail; i < thetas.size(); ++i)
      if (thetas[i] <= 0.5) ++held;
    ep.hold_fraction = static_cast<double>(held) / tail;
    ep.success = held == tail;
    ep.final_error = std::abs(y(0));
  } else if (c.env_type == "two_link_arm") {
    const auto& goal = std::get<envs::TwoLinkArmEnv>(env).goal;
    ep.final_error = (y - goal).norm();
    ep.success = ep.final_error <= 0.2 && ep.collisions == 0;
  } else {
    ep.final_error = envs::task_cost(env, y);  // ||target - T(y)||
    ep.success = true;
  }
  return ep;
}

inline RunReport cmd_run(const ExperimentConfig& c, const std::string& model_path,
                         const std::string& policy_path, const std::string& out_dir) {
  const json model_json =
      c.solver_type == "vi" ? json::object() : read_json_file(model_path);
  const json policy_json = read_json_file(policy_path);
  fs::create_directories(out_dir);

  const auto t0 = std::chrono::steady_clock::now();
  auto episodes = parallel_map<EpisodeResult>(
      static_cast<std::size_t>(c.episodes), [&](std::size_t e) {
        return run_episode(c, model_json, policy_json,
                           phase_seed(c, SeedStream::run, static_cast<std::uint64_t>(e)));
      });
  RunReport rep;
  rep.run_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rep.control_seconds_per_step =
      rep.run_seconds / (static_cast<double>(c.episodes) * c.episode_steps);
  rep.episodes = std::move(episodes);

  double err_sum = 0, err_sq = 0;
  int successes = 0;
  for (const auto& ep : rep.episodes) {
    err_sum += ep.final_error;
    err_sq += ep.final_error * ep.final_error;
    successes += ep.success ? 1 : 0;
  }
  const double n = static_cast<double>(rep.episodes.size());
  rep.success_rate = successes / n;
  rep.mean_error = err_sum / n;
  const double var = std::max(0.0, err_sq / n - rep.mean_error * rep.mean_error);
  rep.error_ci_halfwidth = 1.96 * std::sqrt(var / n);

  json eps = json::array();
  for (std::size_t e = 0; e < rep.episodes.size(); ++e) {
    const auto& ep = rep.episodes[e];
    char name[64];
    std::snprintf(name, sizeof name, "episode_%03zu.traj", e);
    const std::string traj_path = (fs::path(out_dir) / name).string();
    envs::save_trajectory(ep.trajectory, traj_path);
    eps.push_back(json{{"seed", ep.seed},
                       {"trajectory", name},
                       {"initial_state", vector_to_json(ep.initial_state)},
                       {"final_state", vector_to_json(ep.final_state)},
                       {"hold_fraction", ep.hold_fraction},
                       {"final_error", ep.final_error},
                       {"collisions", ep.collisions},
                       {"success", ep.success},
                       {"mean_task_cost", ep.mean_task_cost},
                       {"step_costs", ep.step_costs}});
  }
  json out{{"format", "lkc.run_report"},
           {"version", 1},
           {"config_hash", c.hash()},
           {"config", c.raw},
           {"episodes", eps},
           {"success_rate", rep.success_rate},
           {"mean_error", rep.mean_error},
           {"error_ci_halfwidth", rep.error_ci_halfwidth},
           {"timings", json{{"run_seconds", rep.run_seconds},
                            {"control_seconds_per_step", rep.control_seconds_per_step}}}};
  write_json_file((fs::path(out_dir) / "report.json").string(), out);
  return rep;
}

// ---------------------------------------------------------------------------
// eval-scaling

struct ScalingRow {
  int joints = 0;
  std::string solver;
  bool feasible = true;
  double latent_solve_seconds = 0;
  double control_step_seconds = 0;
  double mean_error = 0;
  double error_sem = 0;
};

/// Config specialized to one sweep point: reaching task with M = J chains
/// and a grid-snapped target drawn from the sweep seed.
inline ExperimentConfig scaling_point_config(const ExperimentConfig& base, int joints) {
  json j = base.raw;
  j["environment"]["type"] = "reach_arm";
  j["environment"]["joints"] = joints;
  if (!j.contains("model")) j["model"] = json::object();
  j["model"]["type"] = "fhmm";
  j["model"]["window"] = 2 * joints;
  std::mt19937_64 rng(derive_seed(base.seed, 1000 + static_cast<std::uint64_t>(joints)));
  std::uniform_int_distribution<int> pick(0, base.n_values - 1);
  std::vector<int> target(static_cast<std::size_t>(joints));
  for (auto& t : target) t = pick(rng);
  if (!j.contains("cost")) j["cost"] = json::object();
  j["cost"]["target_joint_indices"] = target;
  if (!j.contains("controller")) j["controller"] = json::object();
  j["controller"].erase("gain");  // re-derive the default identity gain per J
  j["controller"]["episodes"] = base.scaling_episodes;
  return parse_config(std::move(j));
}

inline std::vector<ScalingRow> cmd_eval_scaling(const ExperimentConfig& base,
                                                const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::vector<ScalingRow> rows;
  for (int joints : base.scaling_joints) {
    ExperimentConfig c = scaling_point_config(base, joints);
    const std::string point_dir = (fs::path(out_dir) / ("j" + std::to_string(joints))).string();
    auto traj_paths = cmd_collect(c, point_dir);
    auto trained = cmd_train(c, traj_paths, point_dir);

    for (const auto& solver : base.scaling_solvers) {
      ScalingRow row;
      row.joints = joints;
      row.solver = solver;
      json cj = c.raw;
      cj["solver"]["type"] = solver;
      ExperimentConfig cs = parse_config(std::move(cj));
      // feasibility guards: the caps are configuration, the boundary
      // behavior is what matters
      long states = 1;
      bool overflow = false;
      for (int m = 0; m < joints; ++m) {
        states *= cs.n_values;
        if (states > (1l << 60) / cs.n_values) {
          overflow = true;
          break;
        }
      }
      if (solver == "exact" && (overflow || states > cs.exact_cap)) row.feasible = false;
      long per_update = overflow ? std::numeric_limits<long>::max() : states / cs.n_values;
      if (solver == "vkl" && per_update > cs.vkl_budget) row.feasible = false;
      if (!row.feasible) {
        rows.push_back(row);
        continue;
      }

      std::vector<double> solve_times;
      SolveResult solved;
      for (int r = 0; r < base.scaling_repeats; ++r) {
        solved = cmd_solve(cs, trained.model_path, point_dir + "/" + solver);
        solve_times.push_back(solved.solve_seconds);
      }
      std::nth_element(solve_times.begin(), solve_times.begin() + solve_times.size() / 2,
                       solve_times.end());
      row.latent_solve_seconds = solve_times[solve_times.size() / 2];

      auto rep = cmd_run(cs, trained.model_path, solved.policy_path, point_dir + "/" + solver);
      row.control_step_seconds = rep.control_seconds_per_step;
      row.mean_error = rep.mean_error;
      row.error_sem = rep.error_ci_halfwidth / 1.96;
      rows.push_back(row);
    }
  }

  std::ofstream csv((fs::path(out_dir) / "scaling.csv").string());
  csv << "# lkc-scaling v1\n# config_hash " << base.hash() << "\n";
  csv << "joints,solver,feasible,latent_solve_seconds,control_step_seconds,mean_error,error_sem\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%s,%d,%.6g,%.6g,%.6g,%.6g\n", r.joints, r.solver.c_str(),
                  r.feasible ? 1 : 0, r.latent_solve_seconds, r.control_step_seconds,
                  r.mean_error, r.error_sem);
    csv << buf;
  }
  return rows;
}

}  // namespace lkc::harness
