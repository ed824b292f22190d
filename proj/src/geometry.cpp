#include "remind/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include <Eigen/Geometry>

namespace remind {

void validate_pose(const CameraPose& pose) {
  const Eigen::Matrix3d& r = pose.rotation;
  if (!r.allFinite() || !pose.translation.allFinite())
    throw std::invalid_argument("pose has non-finite entries");
  const double ortho = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (ortho > kOrthonormalTolerance)
    throw std::invalid_argument("pose rotation is not orthonormal (max |R^T R - I| = " +
                                std::to_string(ortho) + ")");
  if (std::abs(r.determinant() - 1.0) > kOrthonormalTolerance)
    throw std::invalid_argument("pose rotation has determinant " +
                                std::to_string(r.determinant()));
  if (!(pose.fx > 0.0) || !(pose.fy > 0.0))
    throw std::invalid_argument("pose focal lengths must be positive");
  if (!(pose.image_width > 0.0)) throw std::invalid_argument("pose image width must be positive");
}

std::vector<CameraPose> normalize_trajectory(std::span<const CameraPose> poses) {
  if (poses.empty()) throw std::invalid_argument("normalize_trajectory: empty trajectory");
  const CameraPose& first = poses.front();
  const Eigen::Matrix3d r0t = first.rotation.transpose();
  std::vector<CameraPose> out;
  out.reserve(poses.size());
  double max_norm = 0.0;
  for (const CameraPose& p : poses) {
    CameraPose q;
    q.rotation = r0t * p.rotation;
    q.translation = r0t * (p.translation - first.translation);
    q.fx = p.fx / p.image_width;
    q.fy = p.fy / p.image_width;
    q.image_width = 1.0;
    max_norm = std::max(max_norm, q.translation.norm());
    out.push_back(q);
  }
  if (max_norm > 0.0)
    for (CameraPose& q : out) q.translation /= max_norm;
  // exact identity for the anchor frame
  out.front().rotation = Eigen::Matrix3d::Identity();
  out.front().translation = Eigen::Vector3d::Zero();
  return out;
}

PoseDescriptor pose_descriptor(const CameraPose& pose) {
  validate_pose(pose);
  PoseDescriptor c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) c[static_cast<std::size_t>(3 * i + j)] = pose.rotation(i, j);
  for (int i = 0; i < 3; ++i) c[9 + static_cast<std::size_t>(i)] = pose.translation(i);
  c[12] = std::log(pose.fx / pose.image_width);
  c[13] = std::log(pose.fy / pose.image_width);
  return c;
}

Eigen::Matrix3d rotation_from_descriptor(const PoseDescriptor& c) {
  Eigen::Matrix3d r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = c[static_cast<std::size_t>(3 * i + j)];
  return r;
}

SixDofEmbedding six_dof_embedding(const CameraPose& pose) {
  SixDofEmbedding e{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) e[static_cast<std::size_t>(3 * i + j)] = pose.rotation(i, j);
  for (int i = 0; i < 3; ++i) e[9 + static_cast<std::size_t>(i)] = pose.translation(i);
  return e;
}

double geodesic_angle(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  const double tr = (a.transpose() * b).trace();
  return std::acos(std::clamp((tr - 1.0) / 2.0, -1.0, 1.0));
}

double pose_distance(const CameraPose& a, const CameraPose& b) {
  return (a.translation - b.translation).norm() +
         kRotationDistanceWeight * geodesic_angle(a.rotation, b.rotation);
}

std::size_t nearest_pose_index(std::span<const CameraPose> trajectory, const CameraPose& ref,
                               std::size_t exclude_prefix) {
  if (exclude_prefix >= trajectory.size())
    throw std::invalid_argument("nearest_pose_index: empty search range");
  std::size_t best = exclude_prefix;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = exclude_prefix; i < trajectory.size(); ++i) {
    const double d = pose_distance(trajectory[i], ref);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

Eigen::Matrix3d yaw_rotation(double radians) {
  return Eigen::AngleAxisd(radians, Eigen::Vector3d::UnitY()).toRotationMatrix();
}

}  // namespace remind
