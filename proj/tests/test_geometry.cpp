#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Geometry>

#include "doctest.h"
#include "remind/geometry.hpp"

using namespace remind;

namespace {

CameraPose random_pose(std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.5, 2.0);
  Eigen::Quaterniond q(nd(rng), nd(rng), nd(rng), nd(rng));
  q.normalize();
  CameraPose p;
  p.rotation = q.toRotationMatrix();
  p.translation = Eigen::Vector3d(nd(rng), nd(rng), nd(rng));
  p.fx = ud(rng);
  p.fy = ud(rng);
  return p;
}

}  // namespace

TEST_CASE("validate_pose") {
  CHECK_NOTHROW(validate_pose(CameraPose::identity()));

  CameraPose scaled;
  scaled.rotation.row(1) *= 2.0;
  CHECK_THROWS_AS(validate_pose(scaled), std::invalid_argument);

  CameraPose rz;
  rz.rotation = Eigen::AngleAxisd(std::numbers::pi / 2, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  rz.translation = {1, 0, 0};
  CHECK_NOTHROW(validate_pose(rz));

  CameraPose reflect;
  reflect.rotation(2, 2) = -1.0;
  CHECK_THROWS_AS(validate_pose(reflect), std::invalid_argument);

  CameraPose bad_focal;
  bad_focal.fx = 0.0;
  CHECK_THROWS_AS(validate_pose(bad_focal), std::invalid_argument);
}

TEST_CASE("normalize_trajectory") {
  std::vector<CameraPose> single{CameraPose::identity()};
  auto n1 = normalize_trajectory(single);
  CHECK(n1.size() == 1);
  CHECK(n1[0].rotation.isIdentity(0.0));
  CHECK(n1[0].translation.norm() == 0.0);

  std::vector<CameraPose> pair(2);
  pair[1].translation = {2, 0, 0};
  auto n2 = normalize_trajectory(pair);
  CHECK(n2[0].translation.norm() == 0.0);
  CHECK(n2[1].translation.x() == doctest::Approx(1.0));
  CHECK(n2[1].translation.y() == 0.0);

  std::vector<CameraPose> same(3);
  for (auto& p : same) p.translation = {0.3, -1.0, 4.0};
  for (const auto& p : normalize_trajectory(same)) CHECK(p.translation.norm() == 0.0);

  std::vector<CameraPose> wide(1);
  wide[0].fx = 400.0;
  wide[0].fy = 300.0;
  wide[0].image_width = 800.0;
  auto nw = normalize_trajectory(wide);
  CHECK(nw[0].fx == doctest::Approx(0.5));
  CHECK(nw[0].fy == doctest::Approx(0.375));

  CHECK_THROWS_AS(normalize_trajectory(std::vector<CameraPose>{}), std::invalid_argument);
}

TEST_CASE("normalize_trajectory is idempotent") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<CameraPose> traj;
    for (int i = 0; i < 6; ++i) {
      CameraPose p = random_pose(rng);
      p.fx *= 640.0;
      p.fy *= 640.0;
      p.image_width = 640.0;
      traj.push_back(p);
    }
    auto once = normalize_trajectory(traj);
    auto twice = normalize_trajectory(once);
    for (std::size_t i = 0; i < once.size(); ++i) {
      CHECK((once[i].rotation - twice[i].rotation).cwiseAbs().maxCoeff() < 1e-9);
      CHECK((once[i].translation - twice[i].translation).norm() < 1e-9);
      CHECK(std::abs(once[i].fx - twice[i].fx) < 1e-9);
    }
  }
}

TEST_CASE("pose_descriptor") {
  PoseDescriptor rest = pose_descriptor(CameraPose::identity());
  PoseDescriptor expected{1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0};
  CHECK(rest == expected);

  CameraPose f;
  f.fx = std::numbers::e;
  auto c = pose_descriptor(f);
  CHECK(c[12] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(c[13] == 0.0);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    CameraPose p = random_pose(rng);
    auto d = pose_descriptor(p);
    CHECK((rotation_from_descriptor(d) - p.rotation).cwiseAbs().maxCoeff() == 0.0);
    // row-major vec(R)
    CHECK(d[1] == p.rotation(0, 1));
    CHECK(d[3] == p.rotation(1, 0));
    CHECK(d[9] == p.translation.x());
  }

  CameraPose bad;
  bad.fy = -1.0;
  CHECK_THROWS_AS(pose_descriptor(bad), std::invalid_argument);

  auto e = six_dof_embedding(CameraPose::identity());
  SixDofEmbedding e_rest{1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
  CHECK(e == e_rest);
}

TEST_CASE("nearest_pose_index") {
  // loop: yaw out and back, exact return at index 6 and again at 7
  std::vector<CameraPose> loop(8);
  const double yaw[] = {0.0, 0.3, 0.6, 0.9, 0.6, 0.3, 0.0, 0.0};
  for (int i = 0; i < 8; ++i) loop[static_cast<std::size_t>(i)].rotation = yaw_rotation(yaw[i]);
  const std::size_t ret = nearest_pose_index(loop, loop[0], 3);
  CHECK(ret == 6);
  CHECK(pose_distance(loop[ret], loop[0]) == doctest::Approx(0.0).epsilon(1e-12));

  // monotone pan: exhaustive-scan oracle
  std::vector<CameraPose> pan(10);
  for (int i = 0; i < 10; ++i) {
    pan[static_cast<std::size_t>(i)].rotation = yaw_rotation(0.1 * i);
    pan[static_cast<std::size_t>(i)].translation = {0.05 * i, 0, 0};
  }
  CameraPose ref;
  ref.rotation = yaw_rotation(0.43);
  ref.translation = {0.2, 0.0, 0.0};
  std::size_t oracle = 2;
  for (std::size_t i = 2; i < pan.size(); ++i)
    if (pose_distance(pan[i], ref) < pose_distance(pan[oracle], ref)) oracle = i;
  CHECK(nearest_pose_index(pan, ref, 2) == oracle);

  CHECK(nearest_pose_index(pan, ref, 9) == 9);
  CHECK_THROWS_AS(nearest_pose_index(pan, ref, 10), std::invalid_argument);
}
