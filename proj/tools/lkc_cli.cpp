// Experiment runner: collect exploration rollouts, train latent models,
// solve the latent control problem, run closed-loop episodes and sweep
// the scaling study. One config file per command, no hidden state.

#include <lkc/harness.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitNumerical = 4;

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> solver;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config file (JSON, comments allowed)")
      ->required();
  cmd->add_option("--out", args.out_dir, "output directory");
  auto* seed = cmd->add_option("--seed", "override the config's root seed");
  seed->each([&args](const std::string& v) { args.seed = std::stoull(v); });
  cmd->add_option("--solver", "override solver: exact | vkl | avkl | vi")
      ->check(CLI::IsMember({"exact", "vkl", "avkl", "vi"}))
      ->each([&args](const std::string& v) { args.solver = v; });
}

lkc::harness::ExperimentConfig load(const CommonArgs& args) {
  return lkc::harness::load_config(args.config_path, args.seed, args.solver);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent KL control experiment harness"};
  app.require_subcommand(1);

  CommonArgs collect_args, train_args, solve_args, run_args, scaling_args;
  std::vector<std::string> train_inputs;
  std::string run_model, run_policy, solve_model;

  auto* collect = app.add_subcommand("collect", "generate exploration rollouts");
  add_common(collect, collect_args);

  auto* train = app.add_subcommand("train", "fit the latent model to rollouts");
  add_common(train, train_args);
  train->add_option("trajectories", train_inputs, "trajectory files from collect")->required();

  auto* solve = app.add_subcommand("solve", "solve the latent control problem");
  add_common(solve, solve_args);
  solve->add_option("--model", solve_model, "trained model file (omit for solver=vi)");

  auto* run = app.add_subcommand("run", "closed-loop evaluation episodes");
  add_common(run, run_args);
  run->add_option("--model", run_model, "trained model file (omit for solver=vi)");
  run->add_option("--policy", run_policy, "policy/solution file from solve")->required();

  auto* scaling = app.add_subcommand("eval-scaling", "sweep the reaching task over joint counts");
  add_common(scaling, scaling_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (collect->parsed()) {
      auto cfg = load(collect_args);
      auto paths = lkc::harness::cmd_collect(cfg, collect_args.out_dir);
      for (const auto& p : paths) std::printf("%s\n", p.c_str());
    } else if (train->parsed()) {
      auto cfg = load(train_args);
      auto res = lkc::harness::cmd_train(cfg, train_inputs, train_args.out_dir);
      std::printf("%s\n", res.model_path.c_str());
      std::printf("trace: %zu iterations, final %.6f\n", res.trace.size(),
                  res.trace.empty() ? 0.0 : res.trace.back());
    } else if (solve->parsed()) {
      auto cfg = load(solve_args);
      if (cfg.solver_type != "vi" && solve_model.empty())
        throw lkc::ConfigError("solve: --model is required unless solver is vi");
      auto res = lkc::harness::cmd_solve(cfg, solve_model, solve_args.out_dir);
      std::printf("%s\n", res.policy_path.c_str());
      std::printf("solve_seconds: %.4f\n", res.solve_seconds);
    } else if (run->parsed()) {
      auto cfg = load(run_args);
      if (cfg.solver_type != "vi" && run_model.empty())
        throw lkc::ConfigError("run: --model is required unless solver is vi");
      auto rep = lkc::harness::cmd_run(cfg, run_model, run_policy, run_args.out_dir);
      std::printf("episodes: %zu  success_rate: %.3f  mean_error: %.4f +/- %.4f\n",
                  rep.episodes.size(), rep.success_rate, rep.mean_error,
                  rep.error_ci_halfwidth);
    } else if (scaling->parsed()) {
      auto cfg = load(scaling_args);
      auto rows = lkc::harness::cmd_eval_scaling(cfg, scaling_args.out_dir);
      for (const auto& r : rows)
        std::printf("J=%d %s %s solve=%.4fs step=%.6fs error=%.4f\n", r.joints,
                    r.solver.c_str(), r.feasible ? "ok" : "infeasible", r.latent_solve_seconds,
                    r.control_step_seconds, r.mean_error);
    }
  } catch (const lkc::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const lkc::CapExceeded& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    return kExitInfeasible;
  } catch (const lkc::BudgetExceeded& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    return kExitInfeasible;
  } catch (const lkc::Error& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumerical;
  }
  return kExitOk;
}
