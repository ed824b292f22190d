#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace remind {

// Camera-to-world extrinsics plus pinhole focal lengths. Focal lengths are in
// pixels of an image `image_width` wide; after normalization image_width is 1
// and fx, fy are fractions of the width.
struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double fx = 1.0;
  double fy = 1.0;
  double image_width = 1.0;

  static CameraPose identity() { return {}; }
};

inline constexpr std::size_t kPoseDescriptorSize = 14;
inline constexpr std::size_t kSixDofSize = 12;

// [vec(R) row-major, t, log fx, log fy]
using PoseDescriptor = std::array<double, kPoseDescriptorSize>;
// [vec(R) row-major, t]; identity rotation and zero translation give the rest
// embedding.
using SixDofEmbedding = std::array<double, kSixDofSize>;

inline constexpr double kOrthonormalTolerance = 1e-6;
// Weight on the geodesic rotation angle (radians) in pose distances.
inline constexpr double kRotationDistanceWeight = 1.0;

// Throws std::invalid_argument naming the violated invariant.
void validate_pose(const CameraPose& pose);

// Re-expresses the clip relative to its first camera, scales translations so
// the largest norm is 1 (all-zero trajectories stay zero) and divides
// intrinsics by the image width. Idempotent.
std::vector<CameraPose> normalize_trajectory(std::span<const CameraPose> poses);

PoseDescriptor pose_descriptor(const CameraPose& pose);
Eigen::Matrix3d rotation_from_descriptor(const PoseDescriptor& c);
SixDofEmbedding six_dof_embedding(const CameraPose& pose);

double geodesic_angle(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b);
double pose_distance(const CameraPose& a, const CameraPose& b);

// Index >= exclude_prefix with the smallest pose_distance to `ref`; ties go
// to the smallest index.
std::size_t nearest_pose_index(std::span<const CameraPose> trajectory, const CameraPose& ref,
                               std::size_t exclude_prefix);

// Rotation about the camera's vertical axis.
Eigen::Matrix3d yaw_rotation(double radians);

}  // namespace remind
