#pragma once

// Rigid-body primitives shared by every other module. Lengths are millimetres,
// angles are degrees at API boundaries and radians internally.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

#include "needleplan/error.hpp"

namespace needleplan {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Point3 = Eigen::Vector3d;
using Json = nlohmann::json;

constexpr double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }
constexpr double rad_to_deg(double rad) { return rad * 180.0 / std::numbers::pi; }

/// Unit-length direction. Construction normalizes; zero vectors are rejected.
class Dir3 {
 public:
  Dir3() : v_(0.0, 0.0, 1.0) {}
  explicit Dir3(const Vec3& v) {
    const double n = v.norm();
    if (!(n > 1e-12) || !std::isfinite(n)) {
      throw Error(ErrorCode::InvalidArgument, "direction has zero or non-finite length");
    }
    v_ = v / n;
  }
  Dir3(double x, double y, double z) : Dir3(Vec3(x, y, z)) {}

  [[nodiscard]] const Vec3& vec() const noexcept { return v_; }
  [[nodiscard]] double x() const noexcept { return v_.x(); }
  [[nodiscard]] double y() const noexcept { return v_.y(); }
  [[nodiscard]] double z() const noexcept { return v_.z(); }
  [[nodiscard]] double dot(const Vec3& o) const noexcept { return v_.dot(o); }

 private:
  Vec3 v_;
};

/// Nearest rotation (Frobenius sense) via SVD-based polar decomposition.
inline Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  return u * v.transpose();
}

inline double orthonormality_error(const Mat3& r) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
}

/// Rotation angle in radians of a proper rotation matrix.
inline double rotation_angle(const Mat3& r) {
  const double c = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
  // acos loses precision near 0; use atan2 on the skew part for stability.
  const Vec3 w(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return std::atan2(0.5 * w.norm(), c);
}

/// Axis-angle vector (axis * angle, radians) of a rotation matrix.
inline Vec3 rotation_log(const Mat3& r) {
  const double angle = rotation_angle(r);
  if (angle < 1e-12) {
    return 0.5 * Vec3(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  }
  if (angle > std::numbers::pi - 1e-6) {
    // Near pi the skew part vanishes; recover the axis from the symmetric part.
    const Mat3 b = 0.5 * (r + Mat3::Identity());
    int k = 0;
    b.diagonal().maxCoeff(&k);
    Vec3 axis = b.col(k) / std::sqrt(std::max(b(k, k), 1e-300));
    axis.normalize();
    return axis * angle;
  }
  const Vec3 w(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return w * (angle / (2.0 * std::sin(angle)));
}

inline Mat3 rotation_exp(const Vec3& w) {
  const double angle = w.norm();
  if (angle < 1e-300) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
}

inline Mat3 rotation_about(const Vec3& axis, double angle_rad) {
  return Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
}

/// Proper rigid motion x -> R x + t.
class RigidTransform {
 public:
  static constexpr double kRigidTolerance = 1e-6;
  static constexpr double kDriftTolerance = 1e-9;

  RigidTransform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

  /// Throws NonRigidTransform unless `rotation` is orthonormal with det +1 within 1e-6.
  RigidTransform(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    if (!rotation.allFinite() || !translation.allFinite() ||
        orthonormality_error(rotation) > kRigidTolerance ||
        std::abs(rotation.determinant() - 1.0) > kRigidTolerance) {
      throw Error(ErrorCode::NonRigidTransform, "rotation block is not a proper rotation");
    }
    if (orthonormality_error(rotation_) > kDriftTolerance) rotation_ = nearest_rotation(rotation_);
  }

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }
  static RigidTransform from_rotation(const Mat3& r) { return {r, Vec3::Zero()}; }

  static RigidTransform from_matrix(const Mat4& m) {
    const Eigen::RowVector4d last = m.row(3);
    if ((last - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > kRigidTolerance) {
      throw Error(ErrorCode::NonRigidTransform, "bottom row of homogeneous matrix must be 0 0 0 1");
    }
    return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
  }

  [[nodiscard]] Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation_;
    m.topRightCorner<3, 1>() = translation_;
    return m;
  }

  [[nodiscard]] const Mat3& rotation() const noexcept { return rotation_; }
  [[nodiscard]] const Vec3& translation() const noexcept { return translation_; }

  [[nodiscard]] Point3 apply(const Point3& p) const { return rotation_ * p + translation_; }
  [[nodiscard]] Vec3 rotate(const Vec3& v) const { return rotation_ * v; }

 private:
  struct Unchecked {};
  RigidTransform(Unchecked, const Mat3& r, const Vec3& t) : rotation_(r), translation_(t) {}

  friend RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
  friend RigidTransform inverse(const RigidTransform& t);

  Mat3 rotation_;
  Vec3 translation_;
};

/// a∘b: applies b first, then a.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  Mat3 r = a.rotation_ * b.rotation_;
  if (orthonormality_error(r) > RigidTransform::kDriftTolerance) r = nearest_rotation(r);
  return {RigidTransform::Unchecked{}, r, a.rotation_ * b.translation_ + a.translation_};
}

inline RigidTransform inverse(const RigidTransform& t) {
  const Mat3 rt = t.rotation_.transpose();
  return {RigidTransform::Unchecked{}, rt, -(rt * t.translation_)};
}

inline RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) { return compose(a, b); }

inline Point3 transform_point(const RigidTransform& t, const Point3& p) { return t.apply(p); }

/// Translation distance (mm) and rotation angle (deg) between two transforms.
struct PoseError {
  double translation_mm = 0.0;
  double rotation_deg = 0.0;
};

inline PoseError pose_error(const RigidTransform& a, const RigidTransform& b) {
  return {(a.translation() - b.translation()).norm(),
          rad_to_deg(rotation_angle(a.rotation().transpose() * b.rotation()))};
}

// ---------------------------------------------------------------------------
// Text formats

inline Json matrix_to_json(const Mat4& m) {
  Json arr = Json::array();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) arr.push_back(m(r, c));
  return arr;
}

inline Mat4 matrix_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 16) {
    throw Error(ErrorCode::InvalidArgument, "matrix must hold 16 numbers");
  }
  Mat4 m;
  for (int i = 0; i < 16; ++i) {
    if (!j[i].is_number()) throw Error(ErrorCode::InvalidArgument, "matrix entries must be numbers");
    m(i / 4, i % 4) = j[i].get<double>();
  }
  return m;
}

inline Json transform_to_json(const RigidTransform& t) { return matrix_to_json(t.matrix()); }
inline RigidTransform transform_from_json(const Json& j) { return RigidTransform::from_matrix(matrix_from_json(j)); }

inline Json vec_to_json(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }
inline Vec3 vec_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::InvalidArgument, "expected 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorCode::InvalidArgument, path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << j.dump(2) << '\n';
}

/// Transform file: {"matrix": [16 numbers, row-major 4x4, mm]}.
inline RigidTransform read_transform(const std::string& path) {
  const Json j = read_json_file(path);
  if (!j.is_object() || !j.contains("matrix")) {
    throw Error(ErrorCode::InvalidArgument, path + ": missing key \"matrix\"");
  }
  return transform_from_json(j.at("matrix"));
}

inline void write_transform(const std::string& path, const RigidTransform& t) {
  write_json_file(path, Json{{"matrix", transform_to_json(t)}});
}

/// Parses "x,y,z".
inline Point3 parse_point(const std::string& text) {
  std::array<double, 3> v{};
  std::stringstream ss(text);
  std::string item;
  int n = 0;
  while (std::getline(ss, item, ',')) {
    if (n >= 3) throw Error(ErrorCode::InvalidArgument, "expected x,y,z: " + text);
    try {
      std::size_t used = 0;
      v[n] = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidArgument, "expected x,y,z: " + text);
    }
    ++n;
  }
  if (n != 3) throw Error(ErrorCode::InvalidArgument, "expected x,y,z: " + text);
  return {v[0], v[1], v[2]};
}

}  // namespace needleplan
