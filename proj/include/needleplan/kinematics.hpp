#pragma once

// Simulated 7-DOF serial arm: DH forward kinematics, geometric Jacobian,
// damped-least-squares IK and the straight-line insertion waypoints.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "needleplan/geometry.hpp"

namespace needleplan {

constexpr int kJoints = 7;
using JointConfig = Eigen::Matrix<double, kJoints, 1>;
using Jacobian = Eigen::Matrix<double, 6, kJoints>;

/// Standard DH joint: A = Rz(theta + offset) Tz(d) Tx(a) Rx(alpha). Lengths mm, angles rad.
struct DhJoint {
  double a = 0.0;
  double alpha = 0.0;
  double d = 0.0;
  double theta_offset = 0.0;
  double min = -std::numbers::pi;
  double max = std::numbers::pi;
};

/// Collision capsule rigidly attached to a kinematic frame (0 = base, i = after joint i).
struct LinkCapsule {
  int frame = 0;
  Point3 p0 = Point3::Zero();
  Point3 p1 = Point3::Zero();
  double radius = 0.0;
};

struct ArmModel {
  std::array<DhJoint, kJoints> joints{};
  RigidTransform tool;  // flange -> needle tip, tip z = needle axis
  std::vector<LinkCapsule> links;

  void validate() const {
    for (int i = 0; i < kJoints; ++i) {
      const auto& j = joints[static_cast<std::size_t>(i)];
      if (!(j.min < j.max)) {
        throw Error(ErrorCode::InvalidArgument, "joint " + std::to_string(i + 1) + " has min >= max");
      }
    }
    for (const auto& l : links) {
      if (l.frame < 0 || l.frame > kJoints) throw Error(ErrorCode::InvalidArgument, "link capsule frame out of range");
      if (!(l.radius > 0.0)) throw Error(ErrorCode::InvalidArgument, "link capsule radius must be positive");
    }
  }

  /// Upper bound on |tip - base origin|: sum of link lengths plus tool length.
  [[nodiscard]] double reach_bound() const {
    double r = tool.translation().norm();
    for (const auto& j : joints) r += std::hypot(j.a, j.d);
    return r;
  }

  [[nodiscard]] bool within_limits(const JointConfig& q, double slack = 1e-12) const {
    for (int i = 0; i < kJoints; ++i) {
      const auto& j = joints[static_cast<std::size_t>(i)];
      if (q[i] < j.min - slack || q[i] > j.max + slack) return false;
    }
    return true;
  }

  [[nodiscard]] JointConfig clamp(JointConfig q) const {
    for (int i = 0; i < kJoints; ++i) {
      const auto& j = joints[static_cast<std::size_t>(i)];
      q[i] = std::clamp(q[i], j.min, j.max);
    }
    return q;
  }
};

/// LBR-like reference arm: spherical shoulder and wrist, 820 mm from shoulder
/// to flange, 250 mm needle-holder tool. Home (all zeros) points straight up.
inline ArmModel reference_arm() {
  const double pi = std::numbers::pi;
  const double wide = deg_to_rad(170.0), narrow = deg_to_rad(120.0);
  ArmModel arm;
  arm.joints = {{
      {0.0, -pi / 2, 340.0, 0.0, -wide, wide},
      {0.0, pi / 2, 0.0, 0.0, -narrow, narrow},
      {0.0, pi / 2, 380.0, 0.0, -wide, wide},
      {0.0, -pi / 2, 0.0, 0.0, -narrow, narrow},
      {0.0, -pi / 2, 360.0, 0.0, -wide, wide},
      {0.0, pi / 2, 0.0, 0.0, -narrow, narrow},
      {0.0, 0.0, 80.0, 0.0, -wide, wide},
  }};
  arm.tool = RigidTransform::from_translation({0.0, 0.0, 250.0});
  // Segments run along z of the frame preceding each offset d.
  arm.links = {
      {0, {0, 0, 0}, {0, 0, 340}, 60.0},  // base column
      {2, {0, 0, 0}, {0, 0, 380}, 55.0},  // upper arm
      {4, {0, 0, 0}, {0, 0, 360}, 50.0},  // forearm
      {6, {0, 0, 0}, {0, 0, 80}, 45.0},   // wrist and flange
      {7, {0, 0, 0}, {0, 0, 40}, 25.0},   // needle holder
  };
  return arm;
}

inline RigidTransform dh_transform(const DhJoint& j, double theta) {
  const double t = theta + j.theta_offset;
  const double ct = std::cos(t), st = std::sin(t), ca = std::cos(j.alpha), sa = std::sin(j.alpha);
  Mat3 r;
  r << ct, -st * ca, st * sa,
       st, ct * ca, -ct * sa,
       0.0, sa, ca;
  return {r, Vec3(j.a * ct, j.a * st, j.d)};
}

/// Frames 0..7 (base, after each joint) followed by the needle-tip frame (index 8).
inline std::array<RigidTransform, kJoints + 2> frames(const ArmModel& arm, const JointConfig& q) {
  std::array<RigidTransform, kJoints + 2> f;
  for (int i = 0; i < kJoints; ++i) {
    f[static_cast<std::size_t>(i + 1)] = f[static_cast<std::size_t>(i)] * dh_transform(arm.joints[static_cast<std::size_t>(i)], q[i]);
  }
  f[kJoints + 1] = f[kJoints] * arm.tool;
  return f;
}

/// base -> needle tip.
inline RigidTransform fk(const ArmModel& arm, const JointConfig& q) { return frames(arm, q)[kJoints + 1]; }

/// Geometric Jacobian of the tip frame in the base frame. Rows 0-2 are linear
/// velocity in metres per radian, rows 3-5 angular velocity.
inline Jacobian jacobian(const ArmModel& arm, const JointConfig& q) {
  const auto f = frames(arm, q);
  const Vec3 tip = f[kJoints + 1].translation();
  Jacobian j;
  for (int i = 0; i < kJoints; ++i) {
    const auto& fi = f[static_cast<std::size_t>(i)];
    const Vec3 z = fi.rotation().col(2);
    j.block<3, 1>(0, i) = z.cross(tip - fi.translation()) * 1e-3;
    j.block<3, 1>(3, i) = z;
  }
  return j;
}

struct IkOptions {
  double tol_mm = 0.5;
  double tol_deg = 0.5;
  int max_iters = 500;
  double damping = 0.05;
  double max_step_rad = 0.2;
};

enum class IkStatus { Converged, NoConvergence, UnreachableGoal };

struct IkResult {
  IkStatus status = IkStatus::NoConvergence;
  JointConfig q = JointConfig::Zero();
  int iterations = 0;
};

/// Damped least squares with the error measured in metres and radians, the
/// step clamped to max_step_rad and the configuration clamped to the joint
/// limits after every step.
inline IkResult try_ik_dls(const ArmModel& arm, const RigidTransform& goal, const JointConfig& seed,
                           const IkOptions& opt = {}) {
  IkResult res;
  res.q = arm.clamp(seed);
  if (goal.translation().norm() > arm.reach_bound()) {
    res.status = IkStatus::UnreachableGoal;
    return res;
  }
  const double lambda2 = opt.damping * opt.damping;
  for (int it = 0;; ++it) {
    const RigidTransform cur = fk(arm, res.q);
    Eigen::Matrix<double, 6, 1> e;
    e.head<3>() = (goal.translation() - cur.translation()) * 1e-3;
    e.tail<3>() = rotation_log(goal.rotation() * cur.rotation().transpose());
    if (e.head<3>().norm() * 1e3 < opt.tol_mm && rad_to_deg(e.tail<3>().norm()) < opt.tol_deg) {
      res.status = IkStatus::Converged;
      res.iterations = it;
      return res;
    }
    if (it >= opt.max_iters) break;
    const Jacobian j = jacobian(arm, res.q);
    const Eigen::Matrix<double, 6, 6> jjt = j * j.transpose() + lambda2 * Eigen::Matrix<double, 6, 6>::Identity();
    JointConfig dq = j.transpose() * jjt.ldlt().solve(e);
    const double m = dq.cwiseAbs().maxCoeff();
    if (m > opt.max_step_rad) dq *= opt.max_step_rad / m;
    res.q = arm.clamp(res.q + dq);
  }
  res.status = IkStatus::NoConvergence;
  res.iterations = opt.max_iters;
  return res;
}

inline JointConfig ik_dls(const ArmModel& arm, const RigidTransform& goal, const JointConfig& seed,
                          const IkOptions& opt = {}) {
  const IkResult r = try_ik_dls(arm, goal, seed, opt);
  if (r.status == IkStatus::UnreachableGoal) {
    throw Error(ErrorCode::UnreachableGoal, "goal lies beyond the arm's reach bound");
  }
  if (r.status == IkStatus::NoConvergence) {
    throw Error(ErrorCode::NoConvergence, "IK did not converge in " + std::to_string(opt.max_iters) + " iterations");
  }
  return r.q;
}

/// Rotation whose z column is `dir`, reached from the identity by the minimal
/// rotation; for dir = -z the rotation is pi about x.
inline Mat3 align_z(const Dir3& dir) {
  const Vec3 z(0.0, 0.0, 1.0);
  const Vec3 axis = z.cross(dir.vec());
  const double s = axis.norm(), c = z.dot(dir.vec());
  if (s < 1e-12) return c > 0.0 ? Mat3::Identity() : rotation_about(Vec3::UnitX(), std::numbers::pi);
  return rotation_about(axis / s, std::atan2(s, c));
}

struct Waypoints {
  std::vector<RigidTransform> poses;
  std::size_t entry_index = 0;  // first pose whose tip is at or past the entry point
};

constexpr double kWaypointStepMm = 5.0;

/// Tip poses from the approach point (entry - offset*dir) through the entry to
/// the target, every 5 mm along the line, with the entry point always present.
inline Waypoints insertion_waypoints(const Point3& entry, const Point3& target, double approach_offset_mm = 50.0) {
  const double depth = (target - entry).norm();
  if (!(depth > 1e-9)) throw Error(ErrorCode::DegeneratePath, "entry and target coincide");
  if (!(approach_offset_mm >= 0.0)) throw Error(ErrorCode::InvalidArgument, "approach offset must be >= 0");
  const Dir3 dir(target - entry);
  const Mat3 r = align_z(dir);
  const Point3 start = entry - approach_offset_mm * dir.vec();
  const double length = approach_offset_mm + depth;
  const auto n = static_cast<std::size_t>(std::ceil(length / kWaypointStepMm - 1e-9));

  std::vector<double> s;
  for (std::size_t k = 0; k <= n; ++k) s.push_back(std::min(static_cast<double>(k) * kWaypointStepMm, length));
  Waypoints w;
  const auto after = std::lower_bound(s.begin(), s.end(), approach_offset_mm - 1e-9);
  if (after == s.end() || std::abs(*after - approach_offset_mm) > 1e-9) s.insert(after, approach_offset_mm);
  for (std::size_t k = 0; k < s.size(); ++k) {
    Point3 p = start + s[k] * dir.vec();
    if (std::abs(s[k] - approach_offset_mm) <= 1e-9) {
      w.entry_index = k;
      p = entry;
    }
    if (k + 1 == s.size()) p = target;
    w.poses.emplace_back(r, p);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Arm description file

inline Json arm_to_json(const ArmModel& arm) {
  Json joints = Json::array();
  for (const auto& j : arm.joints) {
    joints.push_back({{"a", j.a},
                      {"alpha_deg", rad_to_deg(j.alpha)},
                      {"d", j.d},
                      {"theta_offset_deg", rad_to_deg(j.theta_offset)},
                      {"min_deg", rad_to_deg(j.min)},
                      {"max_deg", rad_to_deg(j.max)}});
  }
  Json links = Json::array();
  for (const auto& l : arm.links) {
    links.push_back({{"frame", l.frame}, {"p0", vec_to_json(l.p0)}, {"p1", vec_to_json(l.p1)}, {"radius", l.radius}});
  }
  return {{"joints", joints}, {"tool", {{"matrix", transform_to_json(arm.tool)}}}, {"links", links}};
}

inline ArmModel arm_from_json(const Json& j) {
  try {
    ArmModel arm;
    const Json& js = j.at("joints");
    if (!js.is_array() || js.size() != kJoints) {
      throw Error(ErrorCode::InvalidArgument, "arm file must list exactly 7 joints");
    }
    for (std::size_t i = 0; i < kJoints; ++i) {
      const Json& e = js[i];
      auto& dh = arm.joints[i];
      dh.a = e.value("a", 0.0);
      dh.alpha = deg_to_rad(e.value("alpha_deg", 0.0));
      dh.d = e.value("d", 0.0);
      dh.theta_offset = deg_to_rad(e.value("theta_offset_deg", 0.0));
      dh.min = deg_to_rad(e.at("min_deg").get<double>());
      dh.max = deg_to_rad(e.at("max_deg").get<double>());
    }
    if (j.contains("tool")) arm.tool = transform_from_json(j.at("tool").at("matrix"));
    if (j.contains("links")) {
      for (const Json& l : j.at("links")) {
        arm.links.push_back({l.at("frame").get<int>(), vec_from_json(l.at("p0")), vec_from_json(l.at("p1")),
                             l.at("radius").get<double>()});
      }
    }
    arm.validate();
    return arm;
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("arm file: ") + e.what());
  }
}

inline ArmModel read_arm(const std::string& path) { return arm_from_json(read_json_file(path)); }
inline void write_arm(const std::string& path, const ArmModel& arm) { write_json_file(path, arm_to_json(arm)); }

}  // namespace needleplan
