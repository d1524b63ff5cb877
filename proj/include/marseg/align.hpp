// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "marseg/core.hpp"
#include "marseg/errors.hpp"

namespace marseg::align {

using core::PointCloud;

// Rigid SE(3) transform, sensor frame -> world frame.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return Pose{}; }

  static Pose yaw(double angle, const Eigen::Vector3d& t = Eigen::Vector3d::Zero()) {
    Pose p;
    p.rotation = Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitZ()).toRotationMatrix();
    p.translation = t;
    return p;
  }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }
};

constexpr double kPoseTolerance = 1e-9;

inline void validate_pose(const Pose& pose) {
  const Eigen::Matrix3d gram = pose.rotation.transpose() * pose.rotation;
  if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > kPoseTolerance)
    throw InvalidPoseError("rotation is not orthonormal");
  if (std::abs(pose.rotation.determinant() - 1.0) > kPoseTolerance)
    throw InvalidPoseError("rotation determinant is not +1");
  if (!pose.translation.allFinite() || !pose.rotation.allFinite())
    throw InvalidPoseError("pose contains non-finite entries");
}

// a then b composed as (a o b): apply b first.
inline Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

inline Pose invert_pose(const Pose& pose) {
  validate_pose(pose);
  Pose out;
  out.rotation = pose.rotation.transpose();
  out.translation = -(out.rotation * pose.translation);
  return out;
}

// Applies p' = R p + t to every point; intensity, labels and order unchanged.
inline PointCloud transform_cloud(const PointCloud& cloud, const Pose& pose) {
  validate_pose(pose);
  PointCloud out = cloud;
  for (auto& p : out.points) {
    const Eigen::Vector3d q = pose.apply(Eigen::Vector3d(p.x, p.y, p.z));
    p.x = q.x();
    p.y = q.y();
    p.z = q.z();
  }
  return out;
}

// k frames expressed in the coordinate system of the last (target) frame.
struct AlignedSequence {
  std::vector<PointCloud> frames;
  int target_index = 0;

  int k() const { return static_cast<int>(frames.size()); }
  const PointCloud& target() const { return frames.back(); }
};

// Maps frame i by pose(target)^-1 o pose(i); the target frame is copied
// untouched so the cancelling composition never introduces rounding.
inline AlignedSequence align_sequence(const std::vector<PointCloud>& frames,
                                      const std::vector<Pose>& poses) {
  if (frames.empty()) throw ShapeError("align_sequence: no frames");
  if (frames.size() != poses.size())
    throw ShapeError("align_sequence: " + std::to_string(frames.size()) +
                     " frames but " + std::to_string(poses.size()) + " poses");
  const int target = static_cast<int>(frames.size()) - 1;
  const Pose to_target = invert_pose(poses[target]);
  AlignedSequence out;
  out.target_index = target;
  out.frames.reserve(frames.size());
  for (int i = 0; i <= target; ++i) {
    if (i == target)
      out.frames.push_back(frames[i]);
    else
      out.frames.push_back(transform_cloud(frames[i], compose(to_target, poses[i])));
  }
  return out;
}

// ---- poses file: one line per frame, 12 numbers, row-major 3x4 [R|t] ----

inline std::string format_pose_line(const Pose& pose) {
  char buf[64];
  std::string line;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      const double v = c < 3 ? pose.rotation(r, c) : pose.translation(r);
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      if (!line.empty()) line += ' ';
      line += buf;
    }
  }
  return line;
}

inline Pose parse_pose_line(const std::string& line) {
  std::istringstream is(line);
  double v[12];
  for (double& x : v)
    if (!(is >> x)) throw DataError("poses: line with fewer than 12 numbers");
  std::string rest;
  if (is >> rest) throw DataError("poses: line with more than 12 numbers");
  Pose p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = v[r * 4 + c];
    p.translation(r) = v[r * 4 + 3];
  }
  return p;
}

inline void write_poses(const std::string& path, const std::vector<Pose>& poses) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  for (const auto& p : poses) os << format_pose_line(p) << '\n';
}

inline std::vector<Pose> read_poses(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path);
  std::vector<Pose> poses;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    Pose p = parse_pose_line(line);
    try {
      validate_pose(p);
    } catch (const InvalidPoseError& e) {
      throw DataError(path + ": " + e.what());
    }
    poses.push_back(p);
  }
  return poses;
}

}  // namespace marseg::align
