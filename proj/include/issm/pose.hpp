#pragma once

// Rigid pose algebra: translation + anisotropic scale + 6D-parameterized
// rotation about a fixed pivot, composable corrections, and the staged
// perturbation schedules used by pose training.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <random>
#include <string>

#include <json.hpp>

#include "issm/core.hpp"

namespace issm {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

// Gram-Schmidt of two 3-vectors packed as (b1,b2): columns
// c1 = b1/|b1|, c2 = orth(b2), c3 = c1 x c2. Continuous over SO(3).
inline Mat3 rot6d_to_matrix(const Vec6& b) {
  Vec3 a1 = b.head<3>();
  Vec3 a2 = b.tail<3>();
  const double n1 = a1.norm();
  if (n1 < 1e-12) throw ValidationError("rot6d_to_matrix: first triple is zero");
  Vec3 c1 = a1 / n1;
  Vec3 r = a2 - c1.dot(a2) * c1;
  const double n2 = r.norm();
  if (n2 < 1e-12) throw ValidationError("rot6d_to_matrix: inputs are parallel or zero");
  Vec3 c2 = r / n2;
  Vec3 c3 = c1.cross(c2);
  Mat3 m;
  m.col(0) = c1;
  m.col(1) = c2;
  m.col(2) = c3;
  return m;
}

// First two columns of R, packed (col1, col2).
inline Vec6 matrix_to_rot6d(const Mat3& r) {
  Vec6 b;
  b.head<3>() = r.col(0);
  b.tail<3>() = r.col(1);
  return b;
}

inline Vec6 rot6d_identity() {
  Vec6 b;
  b << 1, 0, 0, 0, 1, 0;
  return b;
}

// A shape placement: maps anchor-aligned coordinates y to image (pixel-mm)
// coordinates via  x = c + t + R(b) S(s) (y - c).  The pose-resolution map
// of the estimation chain (pixel -> anchor space, "T(omega)") is the inverse.
struct RigidPose {
  Vec3 t = Vec3::Zero();
  Vec3 s = Vec3::Ones();
  Vec6 b = rot6d_identity();
  Vec3 center = Vec3::Zero();

  Mat3 rotation() const { return rot6d_to_matrix(b); }

  Mat4 matrix() const {
    Mat3 rs = rotation() * s.asDiagonal();
    Mat4 m = Mat4::Identity();
    m.block<3, 3>(0, 0) = rs;
    m.block<3, 1>(0, 3) = center + t - rs * center;
    return m;
  }

  Mat4 inverse_matrix() const {
    Mat3 r = rotation();
    Mat3 inv = Vec3(1.0 / s[0], 1.0 / s[1], 1.0 / s[2]).asDiagonal() * r.transpose();
    Mat4 m = Mat4::Identity();
    m.block<3, 3>(0, 0) = inv;
    m.block<3, 1>(0, 3) = center - inv * (center + t);
    return m;
  }

  Vec3 apply(const Vec3& y) const { return center + t + rotation() * s.cwiseProduct(y - center); }
  Vec3 apply_inverse(const Vec3& x) const {
    Vec3 d = rotation().transpose() * (x - center - t);
    return center + Vec3(d[0] / s[0], d[1] / s[1], d[2] / s[2]);
  }

  void validate() const {
    for (int i = 0; i < 3; ++i)
      if (!(s[i] > 0.0)) throw ValidationError("pose scale must be positive");
  }
};

inline RigidPose identity_pose(const Vec3& center = Vec3::Zero()) {
  RigidPose p;
  p.center = center;
  return p;
}

// Component-wise composition of a correction with a pose: translations add,
// scales multiply, rotations compose (delta on the left). Exact on pure
// translations/rotations/scales; the anisotropic-scale family is not closed
// under 4x4 products, so mixed corrections compose per parameter.
inline RigidPose compose(const RigidPose& delta, const RigidPose& pose) {
  RigidPose out;
  out.center = pose.center;
  out.t = delta.t + pose.t;
  out.s = delta.s.cwiseProduct(pose.s);
  out.b = matrix_to_rot6d(delta.rotation() * pose.rotation());
  return out;
}

inline nlohmann::json pose_to_json(const RigidPose& p) {
  return {{"t", {p.t[0], p.t[1], p.t[2]}},
          {"s", {p.s[0], p.s[1], p.s[2]}},
          {"b", {p.b[0], p.b[1], p.b[2], p.b[3], p.b[4], p.b[5]}},
          {"center", {p.center[0], p.center[1], p.center[2]}}};
}

inline RigidPose pose_from_json(const nlohmann::json& j) {
  RigidPose p;
  for (int i = 0; i < 3; ++i) {
    p.t[i] = j.at("t").at(i).get<double>();
    p.s[i] = j.at("s").at(i).get<double>();
    p.center[i] = j.at("center").at(i).get<double>();
  }
  for (int i = 0; i < 6; ++i) p.b[i] = j.at("b").at(i).get<double>();
  return p;
}

// ---- perturbation schedules ---------------------------------------------------

enum class Stage { translation, scale, rotation, nonrigid };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::translation: return "translation";
    case Stage::scale: return "scale";
    case Stage::rotation: return "rotation";
    case Stage::nonrigid: return "nonrigid";
  }
  return "translation";
}

inline Stage stage_from_string(const std::string& s) {
  if (s == "translation" || s == "trans") return Stage::translation;
  if (s == "scale") return Stage::scale;
  if (s == "rotation" || s == "rot") return Stage::rotation;
  if (s == "nonrigid") return Stage::nonrigid;
  throw ValidationError("unknown stage: " + s);
}

// Symmetric uniform ranges; scale is multiplicative, rotation in degrees.
struct StageRanges {
  double trans_mm = 0.0;
  std::array<double, 2> scale{1.0, 1.0};
  double rot_deg = 0.0;
};

struct PerturbationSchedule {
  StageRanges standard;
  StageRanges fine;
  double fine_probability = 0.5;
  bool use_fine = true;  // translation stage always samples the standard range

  void validate() const {
    if (fine.trans_mm > standard.trans_mm + 1e-12)
      throw ValidationError("fine translation range must lie inside the standard range");
    if (fine.scale[0] < standard.scale[0] - 1e-12 || fine.scale[1] > standard.scale[1] + 1e-12)
      throw ValidationError("fine scale range must lie inside the standard range");
    if (fine.rot_deg > standard.rot_deg + 1e-12)
      throw ValidationError("fine rotation range must lie inside the standard range");
  }
};

// Per-stage defaults. Translation: +-40mm only. Scale: trans +-16/8,
// scale [0.7,1.3]/[0.9,1.1]. Rotation: trans +-12/8, scale
// [0.97,1.03]/[0.99,1.01], rot +-7.5/4.5 deg. Non-rigid: trans +-8/4,
// scale [0.99,1.01]/[0.995,1.005], rot +-4.5/2.5 deg.
inline PerturbationSchedule default_schedule(Stage stage) {
  PerturbationSchedule p;
  switch (stage) {
    case Stage::translation:
      p.standard = {40.0, {1.0, 1.0}, 0.0};
      p.fine = p.standard;
      p.use_fine = false;
      break;
    case Stage::scale:
      p.standard = {16.0, {0.7, 1.3}, 0.0};
      p.fine = {8.0, {0.9, 1.1}, 0.0};
      break;
    case Stage::rotation:
      p.standard = {12.0, {0.97, 1.03}, 7.5};
      p.fine = {8.0, {0.99, 1.01}, 4.5};
      break;
    case Stage::nonrigid:
      p.standard = {8.0, {0.99, 1.01}, 4.5};
      p.fine = {4.0, {0.995, 1.005}, 2.5};
      break;
  }
  p.validate();
  return p;
}

// Draw a random pose jitter eta and return eta composed onto the pose. One
// coin decides standard vs fine for the whole draw.
inline RigidPose perturb_pose(const RigidPose& pose, const PerturbationSchedule& sched,
                              std::mt19937_64& rng, RigidPose* eta_out = nullptr) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const StageRanges& r =
      (sched.use_fine && u01(rng) < sched.fine_probability) ? sched.fine : sched.standard;
  RigidPose eta = identity_pose(pose.center);
  for (int i = 0; i < 3; ++i)
    eta.t[i] = r.trans_mm > 0.0 ? (2.0 * u01(rng) - 1.0) * r.trans_mm : 0.0;
  for (int i = 0; i < 3; ++i)
    eta.s[i] = r.scale[0] == r.scale[1] ? r.scale[0]
                                        : r.scale[0] + (r.scale[1] - r.scale[0]) * u01(rng);
  if (r.rot_deg > 0.0) {
    const double d2r = M_PI / 180.0;
    double ax = (2.0 * u01(rng) - 1.0) * r.rot_deg * d2r;
    double ay = (2.0 * u01(rng) - 1.0) * r.rot_deg * d2r;
    double az = (2.0 * u01(rng) - 1.0) * r.rot_deg * d2r;
    Mat3 rot = (Eigen::AngleAxisd(az, Vec3::UnitZ()) * Eigen::AngleAxisd(ay, Vec3::UnitY()) *
                Eigen::AngleAxisd(ax, Vec3::UnitX()))
                   .toRotationMatrix();
    eta.b = matrix_to_rot6d(rot);
  }
  if (eta_out) *eta_out = eta;
  return compose(eta, pose);
}

// Penalty keeping predicted scales inside [0.5, 2]:
// sum_axis max(0, s-2) + max(0, 0.5-s).
inline double scale_clip_penalty(const Vec3& s) {
  double acc = 0.0;
  for (int i = 0; i < 3; ++i)
    acc += std::max(0.0, s[i] - 2.0) + std::max(0.0, 0.5 - s[i]);
  return acc;
}

}  // namespace issm
