#include <lkc/envs.hpp>

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace lkc;
using namespace lkc::envs;

namespace {

TEST(Pendulum, EulerStepMatchesHandComputation) {
  PendulumEnv env;  // dt = 0.01
  Vec y(2);
  y << M_PI / 2.0, 0.0;
  Vec tau = Vec::Zero(1);
  Vec next = env.step(y, tau);
  EXPECT_NEAR(next(0), M_PI / 2.0, 1e-15);
  EXPECT_NEAR(next(1), 0.098, 1e-12);
}

TEST(Pendulum, TorqueClippedToLimit) {
  PendulumEnv env;
  Vec y(2);
  y << M_PI, 0.0;
  Vec big = Vec::Constant(1, 100.0);
  Vec capped = Vec::Constant(1, env.torque_limit);
  EXPECT_EQ(env.step(y, big)(1), env.step(y, capped)(1));
}

TEST(Pendulum, AngleWrapsAndVelocityClamps) {
  PendulumEnv env;
  Vec y(2);
  y << M_PI - 0.001, 12.0;
  Vec next = env.step(y, Vec::Constant(1, env.torque_limit));
  EXPECT_LE(std::abs(next(0)), M_PI);
  EXPECT_LE(std::abs(next(1)), env.omega_limit);

  y << -M_PI + 0.001, -12.4;
  next = env.step(y, Vec::Constant(1, -env.torque_limit));
  EXPECT_LE(std::abs(next(0)), M_PI);
  EXPECT_GE(next(1), -env.omega_limit);
}

TEST(Pendulum, UnforcedDampedMotionDissipatesEnergy) {
  PendulumEnv env;
  env.dt = 1e-4;
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Vec y = env.random_state(rng);
    y(1) = std::clamp(y(1), -6.0, 6.0);  // stay away from the omega clamp
    for (int t = 0; t < 100; ++t) {
      Vec next = env.step(y, Vec::Zero(1));
      EXPECT_LE(env.energy(next), env.energy(y) + 1e-6);
      y = next;
    }
  }
}

TEST(Pendulum, StepIsDeterministic) {
  PendulumEnv env;
  Vec y(2);
  y << 0.3, -1.7;
  Vec tau = Vec::Constant(1, 0.42);
  Vec a = env.step(y, tau), b = env.step(y, tau);
  EXPECT_TRUE(a == b);
}

TEST(TwoLinkArm, ZeroControlHoldsState) {
  TwoLinkArmEnv env;
  Vec y(2);
  y << 0.4, -0.9;
  EXPECT_TRUE(env.step(y, Vec::Zero(2)) == y);
}

TEST(TwoLinkArm, CollidingStepRejected) {
  TwoLinkArmEnv env;
  // straight-out configuration: second link sweeps through the obstacle
  Vec y(2);
  y << 0.0, 0.0;
  EXPECT_FALSE(env.admissible(y));  // default obstacle blocks the stretched arm
  Vec safe(2);
  safe << M_PI / 2.0, 0.0;
  ASSERT_TRUE(env.admissible(safe));
  // a huge step toward the blocked region is rejected; the state holds
  Vec tau(2);
  tau << -M_PI / (2.0 * env.dt), 0.0;
  EXPECT_TRUE(env.step(safe, tau) == safe);
}

TEST(TwoLinkArm, JointLimitStepRejected) {
  TwoLinkArmEnv env;
  Vec y(2);
  y << env.joint_limit - 1e-3, 0.5;
  Vec tau(2);
  tau << 1.0, 0.0;
  // pushes past the limit after 0.1 rad of travel, then holds
  for (int t = 0; t < 20; ++t) y = env.step(y, tau * 10.0);
  EXPECT_LE(y(0), env.joint_limit);
}

TEST(TwoLinkArm, CollisionGeometry) {
  TwoLinkArmEnv env;
  Vec folded(2);
  folded << M_PI / 2.0, M_PI / 2.0;
  EXPECT_FALSE(env.collision(folded));

  // second link passes straight through the disc center
  Vec through(2);
  through << 0.0, 0.0;
  EXPECT_TRUE(env.collision(through));
}

TEST(TwoLinkArm, TangentConfigurationIsNotACollision) {
  TwoLinkArmEnv env;
  env.obstacle_center << 0.0, 1.0;
  env.obstacle_radius = 1.0;
  Vec y(2);
  y << 0.0, 0.0;  // both links on the x axis; distance to center exactly 1
  EXPECT_FALSE(env.collision(y));
  // analytic point-segment oracle agrees
  const double d = TwoLinkArmEnv::segment_point_distance(
      Vec::Zero(2), (Vec(2) << 1.0, 0.0).finished(), env.obstacle_center);
  EXPECT_EQ(d, env.obstacle_radius);
}

TEST(ReachArm, ClampsAtJointLimit) {
  ReachArmEnv env;
  Vec y(2);
  y << env.joint_limit, 0.0;
  Vec tau(2);
  tau << 5.0, 0.0;
  Vec next = env.step(y, tau);
  EXPECT_EQ(next(0), env.joint_limit);
  EXPECT_EQ(next(1), 0.0);
}

TEST(ForwardKinematics, StretchedAndBentArm) {
  Vec y = Vec::Zero(2);
  Vec p = forward_kinematics(y);
  EXPECT_NEAR(p(0), 2.0, 1e-15);
  EXPECT_NEAR(p(1), 0.0, 1e-15);

  y << M_PI / 2.0, 0.0;
  p = forward_kinematics(y);
  EXPECT_NEAR(p(0), 0.0, 1e-12);
  EXPECT_NEAR(p(1), 2.0, 1e-12);
}

TEST(ForwardKinematics, MatchesRotationChainOracle) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-M_PI / 2.0, M_PI / 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    Vec y(3);
    for (int i = 0; i < 3; ++i) y(i) = u(rng);
    // compose homogeneous transforms link by link
    Mat rot = Mat::Identity(2, 2);
    Vec pos = Vec::Zero(2);
    for (int i = 0; i < 3; ++i) {
      Mat r(2, 2);
      r << std::cos(y(i)), -std::sin(y(i)), std::sin(y(i)), std::cos(y(i));
      rot = rot * r;
      pos += rot * (Vec(2) << 1.0, 0.0).finished();
    }
    EXPECT_LT((forward_kinematics(y) - pos).norm(), 1e-12);
  }
}

TEST(ForwardKinematics, NormBoundedByJointCount) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-M_PI, M_PI);
  for (int trial = 0; trial < 200; ++trial) {
    const int j = 1 + static_cast<int>(trial % 7);
    Vec y(j);
    for (int i = 0; i < j; ++i) y(i) = u(rng);
    EXPECT_LE(forward_kinematics(y).norm(), j + 1e-12);
  }
}

TEST(TaskCost, TargetsHaveZeroCost) {
  PendulumEnv pen;
  EXPECT_EQ(pen.task_cost(Vec::Zero(2)), 0.0);

  TwoLinkArmEnv arm;
  EXPECT_EQ(arm.task_cost(arm.goal), 0.0);

  ReachArmEnv reach;
  reach.target << 0.0, 2.0;
  Vec y = Vec::Zero(2);
  EXPECT_NEAR(reach.task_cost(y), 2.0 * std::sqrt(2.0), 1e-12);
}

TEST(ExploreRollout, ZeroNoiseArmStaysPut) {
  TwoLinkArmEnv env;
  auto traj = explore_rollout(env, 50, Mat::Zero(2, 2), 3);
  for (const auto& y : traj.states) EXPECT_TRUE(y == traj.states.front());
}

TEST(ExploreRollout, ControlsHaveZeroMeanWithinCltBound) {
  PendulumEnv env;
  const double var = 1.5;
  const int steps = 20000;
  auto traj = explore_rollout(env, steps, Mat::Constant(1, 1, var), 11);
  double mean = 0;
  for (const auto& tau : traj.controls) mean += tau(0);
  mean /= steps;
  EXPECT_LE(std::abs(mean), 4.0 * std::sqrt(var) / std::sqrt(static_cast<double>(steps)));
}

TEST(ExploreRollout, PendulumNoiseCoversBottomAndUpright) {
  PendulumEnv env;
  auto traj = explore_rollout(env, 30000, Mat::Constant(1, 1, 1.5), 1);
  double min_abs = 1e9, max_abs = 0;
  for (const auto& y : traj.states) {
    min_abs = std::min(min_abs, std::abs(y(0)));
    max_abs = std::max(max_abs, std::abs(y(0)));
  }
  EXPECT_LT(min_abs, 0.5);  // visits near-upright
  EXPECT_GT(max_abs, 2.6);  // visits near the bottom
}

TEST(ExploreRollout, ArmRolloutsNeverCollide) {
  TwoLinkArmEnv env;
  auto traj = explore_rollout(env, 5000, Mat::Identity(2, 2) * 1.5, 5);
  for (const auto& y : traj.states) {
    EXPECT_TRUE(env.admissible(y));
    EXPECT_FALSE(env.collision(y));
  }
}

TEST(ExploreRollout, DeterministicGivenSeed) {
  ReachArmEnv env;
  env.joints = 3;
  env.target << 1.0, 1.0;
  auto a = explore_rollout(env, 100, Mat::Identity(3, 3), 42);
  auto b = explore_rollout(env, 100, Mat::Identity(3, 3), 42);
  for (int t = 0; t < 100; ++t) {
    EXPECT_TRUE(a.states[t] == b.states[t]);
    EXPECT_TRUE(a.controls[t] == b.controls[t]);
  }
}

TEST(TrajectoryIo, ByteExactRoundTrip) {
  PendulumEnv env;
  auto traj = explore_rollout(env, 64, Mat::Constant(1, 1, 1.5), 77);
  std::ostringstream first;
  save_trajectory(traj, first);
  std::istringstream in(first.str());
  auto loaded = load_trajectory(in);
  std::ostringstream second;
  save_trajectory(loaded, second);
  EXPECT_EQ(first.str(), second.str());
  EXPECT_EQ(loaded.seed, traj.seed);
  ASSERT_EQ(loaded.length(), traj.length());
  for (int t = 0; t < traj.length(); ++t) {
    EXPECT_TRUE(loaded.states[t] == traj.states[t]);
    EXPECT_TRUE(loaded.controls[t] == traj.controls[t]);
  }
}

TEST(TrajectoryIo, SingleRecordFileKeepsHeader) {
  TwoLinkArmEnv env;
  auto traj = explore_rollout(env, 1, Mat::Identity(2, 2), 5);
  std::ostringstream out;
  save_trajectory(traj, out);
  std::istringstream in(out.str());
  auto loaded = load_trajectory(in);
  EXPECT_EQ(loaded.length(), 1);
  EXPECT_EQ(env_tag(loaded.env), "two_link_arm");
  EXPECT_EQ(loaded.dt(), env.dt);
}

}  // namespace
