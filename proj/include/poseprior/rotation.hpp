#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "poseprior/common.hpp"
#include "poseprior/random.hpp"

namespace poseprior {

/// One joint's rotation as two orthonormal 3-vectors (the first two columns
/// of its rotation matrix).
struct Rotation6D {
  Eigen::Vector3d b1;
  Eigen::Vector3d b2;

  bool is_valid(double tol = 1e-6) const {
    return std::abs(b1.norm() - 1.0) <= tol &&
           std::abs(b2.norm() - 1.0) <= tol && std::abs(b1.dot(b2)) <= tol;
  }
};

/// A not-necessarily-orthonormal 6D vector; Gram-Schmidt maps it onto a
/// Rotation6D.
struct RawRotation6D {
  Eigen::Vector3d a1;
  Eigen::Vector3d a2;
};

/// Noise controls for the inverse Gram-Schmidt augmentation. The two length
/// factors are Gamma(k, 1/k) (mean 1, std 1/sqrt(k)); the skew factor is
/// N(0, sigma^2). k = +infinity and sigma = 0 give the exact zero-noise
/// limit.
struct AugmentParams {
  double k = 100.0;
  double sigma = 0.1;

  bool is_valid() const { return k > 0.0 && sigma >= 0.0; }
};

/// Flat pose layout: 6*J values where the first half holds every joint's
/// first 3-vector (joint-major) and the second half every joint's second
/// 3-vector. For the paper-scale 21-joint body this is the 126-vector the
/// flow models.
using PoseVector = Eigen::VectorXd;

constexpr int kJointDims = 6;
constexpr int kDefaultJointCount = 21;
constexpr int kDefaultPoseDims = kDefaultJointCount * kJointDims;

namespace detail {
constexpr double kDegenerateNorm = 1e-9;
}

/// Orthonormalizes a raw 6D vector: b1 = a1/|a1|, b2 = the unit residual of
/// a2 against b1.
inline Rotation6D gram_schmidt(const RawRotation6D& raw) {
  const double n1 = raw.a1.norm();
  require(n1 >= detail::kDegenerateNorm, ErrorCode::domain,
          "degenerate 6D vector");
  Rotation6D r;
  r.b1 = raw.a1 / n1;
  const Eigen::Vector3d residual = raw.a2 - raw.a2.dot(r.b1) * r.b1;
  const double n2 = residual.norm();
  require(n2 >= detail::kDegenerateNorm, ErrorCode::domain,
          "degenerate 6D vector");
  r.b2 = residual / n2;
  return r;
}

/// Randomized right-inverse of gram_schmidt: a1 = rho1*b1,
/// a2 = rho2*b2 + alpha*a1 with rho ~ Gamma(k, 1/k) and alpha ~ N(0, sigma^2).
/// Orthonormalizing the result recovers r.
inline RawRotation6D inverse_gram_schmidt(const Rotation6D& r,
                                          const AugmentParams& params,
                                          Rng& rng) {
  require(params.is_valid(), ErrorCode::domain,
          "inverse_gram_schmidt: invalid augmentation parameters");
  const bool unit_rho = std::isinf(params.k);
  auto draw_rho = [&]() {
    if (unit_rho) return 1.0;
    double rho = rng.gamma(params.k, 1.0 / params.k);
    while (rho <= detail::kDegenerateNorm) {
      rho = rng.gamma(params.k, 1.0 / params.k);
    }
    return rho;
  };
  const double rho1 = draw_rho();
  const double rho2 = draw_rho();
  const double alpha = params.sigma == 0.0 ? 0.0 : rng.normal(0.0, params.sigma);
  RawRotation6D raw;
  raw.a1 = rho1 * r.b1;
  raw.a2 = rho2 * r.b2 + alpha * raw.a1;
  return raw;
}

/// Completes the rotation matrix: columns are b1, b2, b1 x b2.
inline Eigen::Matrix3d rotmat_from_6d(const Rotation6D& r) {
  Eigen::Matrix3d m;
  m.col(0) = r.b1;
  m.col(1) = r.b2;
  m.col(2) = r.b1.cross(r.b2);
  return m;
}

/// Rodrigues formula; series expansion near zero angle.
inline Eigen::Matrix3d rotmat_from_rotvec(const Eigen::Vector3d& v) {
  const double theta = v.norm();
  Eigen::Matrix3d k;
  k << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  double a, b;
  if (theta < 1e-8) {
    a = 1.0 - theta * theta / 6.0;
    b = 0.5 - theta * theta / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / (theta * theta);
  }
  return Eigen::Matrix3d::Identity() + a * k + b * (k * k);
}

/// Axis-angle vector of a rotation matrix, angle in [0, pi]. At angle pi the
/// axis sign is ambiguous; the branch whose first nonzero component is
/// positive is returned.
inline Eigen::Vector3d rotvec_from_matrix(const Eigen::Matrix3d& m) {
  // Quaternion extraction with the largest-pivot rule keeps every branch
  // numerically stable.
  double w, x, y, z;
  const double trace = m.trace();
  if (trace > 0.0) {
    double s = std::sqrt(trace + 1.0) * 2.0;
    w = 0.25 * s;
    x = (m(2, 1) - m(1, 2)) / s;
    y = (m(0, 2) - m(2, 0)) / s;
    z = (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
    w = (m(2, 1) - m(1, 2)) / s;
    x = 0.25 * s;
    y = (m(0, 1) + m(1, 0)) / s;
    z = (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
    w = (m(0, 2) - m(2, 0)) / s;
    x = (m(0, 1) + m(1, 0)) / s;
    y = 0.25 * s;
    z = (m(1, 2) + m(2, 1)) / s;
  } else {
    double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
    w = (m(1, 0) - m(0, 1)) / s;
    x = (m(0, 2) + m(2, 0)) / s;
    y = (m(1, 2) + m(2, 1)) / s;
    z = 0.25 * s;
  }
  if (w < 0.0) {
    w = -w;
    x = -x;
    y = -y;
    z = -z;
  }
  Eigen::Vector3d axis(x, y, z);
  const double sin_half = axis.norm();
  if (sin_half < 1e-12) return Eigen::Vector3d::Zero();
  const double angle = 2.0 * std::atan2(sin_half, w);
  axis /= sin_half;
  if (angle > std::numbers::pi - 1e-9) {
    // angle == pi: pick the branch with a positive first nonzero component.
    for (int i = 0; i < 3; ++i) {
      if (std::abs(axis[i]) > 1e-12) {
        if (axis[i] < 0.0) axis = -axis;
        break;
      }
    }
  }
  return axis * angle;
}

inline Eigen::Vector3d rotvec_from_6d(const Rotation6D& r) {
  return rotvec_from_matrix(rotmat_from_6d(r));
}

inline int joint_count_of(Eigen::Index pose_dims) {
  require(pose_dims > 0 && pose_dims % kJointDims == 0, ErrorCode::dimension,
          "pose length must be a positive multiple of 6");
  return static_cast<int>(pose_dims / kJointDims);
}

/// Reads joint j out of a flat transposed pose.
inline RawRotation6D joint_from_flat(const PoseVector& pose, int j) {
  const int joints = joint_count_of(pose.size());
  require(j >= 0 && j < joints, ErrorCode::dimension, "joint index out of range");
  const int half = 3 * joints;
  RawRotation6D raw;
  raw.a1 = pose.segment<3>(3 * j);
  raw.a2 = pose.segment<3>(half + 3 * j);
  return raw;
}

inline void set_joint_in_flat(PoseVector& pose, int j, const Eigen::Vector3d& v1,
                              const Eigen::Vector3d& v2) {
  const int joints = joint_count_of(pose.size());
  require(j >= 0 && j < joints, ErrorCode::dimension, "joint index out of range");
  const int half = 3 * joints;
  pose.segment<3>(3 * j) = v1;
  pose.segment<3>(half + 3 * j) = v2;
}

/// Packs per-joint 6D entries into the transposed flat layout: all first
/// 3-vectors, then all second 3-vectors.
inline PoseVector transpose_to_flat(const std::vector<RawRotation6D>& joints) {
  require(!joints.empty(), ErrorCode::dimension, "no joints to pack");
  PoseVector pose(static_cast<Eigen::Index>(joints.size()) * kJointDims);
  for (int j = 0; j < static_cast<int>(joints.size()); ++j) {
    set_joint_in_flat(pose, j, joints[j].a1, joints[j].a2);
  }
  return pose;
}

inline PoseVector transpose_to_flat(const std::vector<Rotation6D>& joints) {
  std::vector<RawRotation6D> raw(joints.size());
  for (std::size_t j = 0; j < joints.size(); ++j) {
    raw[j] = {joints[j].b1, joints[j].b2};
  }
  return transpose_to_flat(raw);
}

/// Unpacks a flat transposed pose into per-joint 6D entries.
inline std::vector<RawRotation6D> transpose_to_joints(const PoseVector& pose) {
  const int joints = joint_count_of(pose.size());
  std::vector<RawRotation6D> out(static_cast<std::size_t>(joints));
  for (int j = 0; j < joints; ++j) out[j] = joint_from_flat(pose, j);
  return out;
}

/// Gram-Schmidt applied joint-wise to a flat pose.
inline PoseVector orthonormalize_pose(const PoseVector& pose) {
  const int joints = joint_count_of(pose.size());
  PoseVector out(pose.size());
  for (int j = 0; j < joints; ++j) {
    const Rotation6D r = gram_schmidt(joint_from_flat(pose, j));
    set_joint_in_flat(out, j, r.b1, r.b2);
  }
  return out;
}

/// Inverse Gram-Schmidt applied joint-wise with fresh noise per joint.
/// Joints of `pose` must already be orthonormal.
inline PoseVector augment_pose(const PoseVector& pose,
                               const AugmentParams& params, Rng& rng) {
  const int joints = joint_count_of(pose.size());
  PoseVector out(pose.size());
  for (int j = 0; j < joints; ++j) {
    const RawRotation6D stored = joint_from_flat(pose, j);
    const RawRotation6D raw =
        inverse_gram_schmidt({stored.a1, stored.a2}, params, rng);
    set_joint_in_flat(out, j, raw.a1, raw.a2);
  }
  return out;
}

}  // namespace poseprior
