#pragma once

// Synthetic test data: body phantoms, steel-ball scans and calibration pose
// sets with known ground truth. CT convention: +y anterior (up for a supine
// patient), z along the table.

#include <cmath>
#include <random>
#include <vector>

#include "needleplan/parallel.hpp"
#include "needleplan/registration.hpp"
#include "needleplan/volume.hpp"

namespace needleplan {

constexpr HU kSoftTissueHU = 40;
constexpr HU kLungHU = -850;
constexpr HU kBoneHU = 900;
constexpr HU kSteelHU = 3000;

/// Cube lattice of n voxels per side centred on the world origin.
inline Grid centred_grid(std::int64_t n, double spacing) {
  const double half = 0.5 * static_cast<double>(n - 1) * spacing;
  return Grid({n, n, n}, Vec3::Constant(spacing), Point3::Constant(-half), Mat3::Identity());
}

/// Evaluates hu(world point) at every voxel centre.
template <class Fn>
Volume paint_volume(const Grid& g, Fn&& hu, unsigned workers = 0) {
  std::vector<HU> vox(g.voxel_count());
  parallel_for(static_cast<std::size_t>(g.nz()), workers, [&](std::size_t k0, std::size_t k1) {
    for (auto k = static_cast<std::int64_t>(k0); k < static_cast<std::int64_t>(k1); ++k)
      for (std::int64_t j = 0; j < g.ny(); ++j)
        for (std::int64_t i = 0; i < g.nx(); ++i) vox[g.linear(i, j, k)] = hu(g.index_to_world({i, j, k}));
  });
  return {g, std::move(vox)};
}

struct SphereOptions {
  double radius_mm = 100.0;
  double spacing_mm = 2.0;
  double padding_mm = 20.0;
};

inline Volume sphere_phantom(const SphereOptions& o = {}) {
  if (!(o.radius_mm > 0.0) || !(o.spacing_mm > 0.0) || o.padding_mm < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "sphere phantom needs positive radius and spacing");
  }
  const auto half = static_cast<std::int64_t>(std::ceil((o.radius_mm + o.padding_mm) / o.spacing_mm));
  const double r2 = o.radius_mm * o.radius_mm;
  return paint_volume(centred_grid(2 * half + 1, o.spacing_mm),
                      [&](const Point3& p) { return p.squaredNorm() <= r2 ? kSoftTissueHU : kAirHU; });
}

/// Torso geometry in mm. The bone shell encloses the default target and opens
/// toward +y through a cone around its axis.
struct TorsoGeometry {
  Vec3 torso_semi_axes{115.0, 95.0, 140.0};  // elliptic cylinder: x, y semi-axes, z half-length
  std::array<Point3, 2> lung_centers{Point3(-70.0, 0.0, 30.0), Point3(70.0, 0.0, 30.0)};
  Vec3 lung_semi_axes{35.0, 50.0, 70.0};
  Point3 shell_center{0.0, 10.0, -20.0};
  double shell_inner_mm = 28.0;
  double shell_outer_mm = 35.0;
  double aperture_half_angle_deg = 25.0;
  Vec3 arm_axis_point{-140.0, -10.0, 0.0};  // detached arm cylinder along z
  double arm_radius_mm = 15.0;
  double arm_half_length_mm = 120.0;
};

struct TorsoOptions {
  std::int64_t dims = 128;
  double extent_mm = 320.0;
  TorsoGeometry geometry;
};

inline HU torso_hu(const TorsoGeometry& t, const Point3& p) {
  const Vec3 d = p - t.arm_axis_point;
  if (std::abs(p.z()) <= t.arm_half_length_mm && d.x() * d.x() + d.y() * d.y() <= t.arm_radius_mm * t.arm_radius_mm) {
    return kSoftTissueHU;
  }
  const double ex = p.x() / t.torso_semi_axes.x(), ey = p.y() / t.torso_semi_axes.y();
  if (std::abs(p.z()) > t.torso_semi_axes.z() || ex * ex + ey * ey > 1.0) return kAirHU;
  for (const auto& c : t.lung_centers) {
    if ((p - c).cwiseQuotient(t.lung_semi_axes).squaredNorm() <= 1.0) return kLungHU;
  }
  const Vec3 s = p - t.shell_center;
  const double r = s.norm();
  if (r >= t.shell_inner_mm && r <= t.shell_outer_mm) {
    const bool in_aperture = s.y() > 0.0 && s.y() >= r * std::cos(deg_to_rad(t.aperture_half_angle_deg));
    if (!in_aperture) return kBoneHU;
  }
  return kSoftTissueHU;
}

inline Volume torso_phantom(const TorsoOptions& o = {}) {
  if (o.dims < 8 || !(o.extent_mm > 0.0)) throw Error(ErrorCode::InvalidArgument, "torso phantom too small");
  const double spacing = o.extent_mm / static_cast<double>(o.dims);
  return paint_volume(centred_grid(o.dims, spacing), [&](const Point3& p) { return torso_hu(o.geometry, p); });
}

/// Target at the centre of the bone shell.
inline Point3 torso_default_target(const TorsoOptions& o = {}) { return o.geometry.shell_center; }

// ---------------------------------------------------------------------------
// Steel-ball scans

struct BallScanOptions {
  double spacing_mm = 0.8;
  double padding_mm = 6.0;
  int supersample = 4;  // per axis, for partial-volume edges
  std::vector<std::size_t> omit;
};

constexpr HU kBallThresholdHU = 1000;  // half-way between air and steel

/// CT scan of `model` placed by ct_from_sb on an axis-aligned lattice.
inline Volume ball_phantom_volume(const PhantomModel& model, const RigidTransform& ct_from_sb,
                                  const BallScanOptions& o = {}) {
  std::vector<std::pair<Point3, double>> balls;
  for (std::size_t b = 0; b < model.balls.size(); ++b) {
    if (std::find(o.omit.begin(), o.omit.end(), b) != o.omit.end()) continue;
    balls.emplace_back(ct_from_sb.apply(model.balls[b].center), radius_of(model.balls[b].radius_class));
  }
  if (balls.empty()) throw Error(ErrorCode::InvalidArgument, "no balls to scan");
  Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
  for (const auto& [c, r] : balls) {
    lo = lo.cwiseMin(c - Vec3::Constant(r + o.padding_mm));
    hi = hi.cwiseMax(c + Vec3::Constant(r + o.padding_mm));
  }
  std::array<std::int64_t, 3> dims{};
  for (int a = 0; a < 3; ++a) dims[a] = static_cast<std::int64_t>(std::ceil((hi[a] - lo[a]) / o.spacing_mm)) + 1;
  const Grid g(dims, Vec3::Constant(o.spacing_mm), lo, Mat3::Identity());
  const int ss = std::max(1, o.supersample);
  const double reach = 0.5 * std::sqrt(3.0) * o.spacing_mm;
  return paint_volume(g, [&](const Point3& p) {
    for (const auto& [c, r] : balls) {
      const double d = (p - c).norm();
      if (d > r + reach) continue;
      if (d < r - reach) return kSteelHU;
      int inside = 0;
      for (int a = 0; a < ss; ++a)
        for (int b = 0; b < ss; ++b)
          for (int e = 0; e < ss; ++e) {
            const Vec3 off = (Vec3(a, b, e) + Vec3::Constant(0.5)) / ss - Vec3::Constant(0.5);
            if ((p + o.spacing_mm * off - c).squaredNorm() <= r * r) ++inside;
          }
      const double frac = static_cast<double>(inside) / (ss * ss * ss);
      return static_cast<HU>(std::lround(kAirHU + frac * (kSteelHU - kAirHU)));
    }
    return kAirHU;
  });
}

// ---------------------------------------------------------------------------
// Hand-eye calibration data

struct CalibrationTruth {
  RigidTransform ee_from_marker;
  RigidTransform base_from_cam;
};

inline CalibrationTruth reference_calibration_truth() {
  return {RigidTransform(rotation_about(Vec3(1.0, 2.0, 0.5).normalized(), deg_to_rad(35.0)), Vec3(12.0, -30.0, 85.0)),
          RigidTransform(rotation_about(Vec3(0.2, -0.4, 1.0).normalized(), deg_to_rad(150.0)),
                         Vec3(1400.0, 350.0, 900.0))};
}

struct PoseNoise {
  double translation_mm = 0.0;  // per-axis Gaussian sigma
  double rotation_deg = 0.0;    // per-axis Gaussian sigma of the rotation vector
};

/// Robot poses spread over a 400 mm box with rotations up to 60 degrees from
/// a tool-down nominal; camera poses follow from the truth. Noise perturbs the
/// tracked marker position additively and its orientation in the marker frame.
inline std::vector<CalibrationSample> synthetic_calibration(std::size_t n, const CalibrationTruth& truth,
                                                            std::mt19937_64& rng, const PoseNoise& noise = {}) {
  std::uniform_real_distribution<double> box(-200.0, 200.0), angle(0.0, deg_to_rad(60.0));
  std::normal_distribution<double> unit(0.0, 1.0);
  const RigidTransform nominal(rotation_about(Vec3::UnitX(), std::numbers::pi), Vec3(500.0, 0.0, 400.0));
  std::vector<CalibrationSample> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const Vec3 axis = Vec3(unit(rng), unit(rng), unit(rng)).normalized();
    const double a = angle(rng);
    const Vec3 t(box(rng), box(rng), box(rng));
    const RigidTransform robot = nominal * RigidTransform(rotation_about(axis, a), t);
    RigidTransform cam_from_marker = inverse(truth.base_from_cam) * robot * truth.ee_from_marker;
    if (noise.translation_mm > 0.0 || noise.rotation_deg > 0.0) {
      const double sr = deg_to_rad(noise.rotation_deg);
      const Vec3 w(sr * unit(rng), sr * unit(rng), sr * unit(rng));
      const Vec3 dt(noise.translation_mm * unit(rng), noise.translation_mm * unit(rng),
                    noise.translation_mm * unit(rng));
      cam_from_marker = RigidTransform(cam_from_marker.rotation() * rotation_exp(w), cam_from_marker.translation() + dt);
    }
    out.push_back({robot, inverse(cam_from_marker)});
  }
  return out;
}

}  // namespace needleplan
