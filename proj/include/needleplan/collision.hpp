#pragma once

// Capsule collision scene (skin mesh, gantry plane, table box, arm links and
// needle) and the per-entry-point reachability check.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "needleplan/kinematics.hpp"
#include "needleplan/mesh.hpp"
#include "needleplan/parallel.hpp"
#include "needleplan/planner.hpp"

namespace needleplan {

struct Capsule {
  Point3 a = Point3::Zero();
  Point3 b = Point3::Zero();
  double radius = 0.0;
};

/// Half-space boundary; the solid lies on the side opposite to `normal`.
struct Plane {
  Point3 point = Point3::Zero();
  Vec3 normal = Vec3::UnitZ();

  [[nodiscard]] double signed_distance(const Point3& p) const { return normal.dot(p - point); }
};

struct Box {
  Point3 min = Point3::Zero();
  Point3 max = Point3::Zero();
};

// ---------------------------------------------------------------------------
// Distances

inline Point3 closest_point_on_segment(const Point3& p, const Point3& a, const Point3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 <= 0.0) return a;
  return a + std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) * ab;
}

/// Closest point of triangle abc to p (Voronoi-region walk).
inline Point3 closest_point_on_triangle(const Point3& p, const Point3& a, const Point3& b, const Point3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + (d1 / (d1 - d3)) * ab;
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + (d2 / (d2 - d6)) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

inline double segment_segment_distance(const Point3& p1, const Point3& q1, const Point3& p2, const Point3& q2) {
  const Vec3 d1 = q1 - p1, d2 = q2 - p2, r = p1 - p2;
  const double a = d1.squaredNorm(), e = d2.squaredNorm(), f = d2.dot(r);
  double s = 0.0, t = 0.0;
  if (a <= 1e-300 && e <= 1e-300) return r.norm();
  if (a <= 1e-300) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= 1e-300) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2), denom = a * e - b * b;
      s = denom > 1e-12 * a * e ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0.0) {
        t = 0.0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1.0) {
        t = 1.0;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  return ((p1 + s * d1) - (p2 + t * d2)).norm();
}

inline bool segment_hits_triangle(const Point3& p, const Point3& q, const Point3& a, const Point3& b, const Point3& c) {
  const Vec3 d = q - p, e1 = b - a, e2 = c - a;
  const Vec3 h = d.cross(e2);
  const double det = e1.dot(h);
  if (std::abs(det) < 1e-14 * (e1.norm() * e2.norm() * std::max(d.norm(), 1e-300))) return false;
  const double inv = 1.0 / det;
  const Vec3 s = p - a;
  const double u = inv * s.dot(h);
  if (u < 0.0 || u > 1.0) return false;
  const Vec3 qv = s.cross(e1);
  const double v = inv * d.dot(qv);
  if (v < 0.0 || u + v > 1.0) return false;
  const double t = inv * e2.dot(qv);
  return t >= 0.0 && t <= 1.0;
}

inline double segment_triangle_distance(const Point3& p, const Point3& q, const Point3& a, const Point3& b,
                                        const Point3& c) {
  if (segment_hits_triangle(p, q, a, b, c)) return 0.0;
  double d = std::min((p - closest_point_on_triangle(p, a, b, c)).norm(),
                      (q - closest_point_on_triangle(q, a, b, c)).norm());
  d = std::min(d, segment_segment_distance(p, q, a, b));
  d = std::min(d, segment_segment_distance(p, q, b, c));
  d = std::min(d, segment_segment_distance(p, q, c, a));
  return d;
}

inline double point_box_distance(const Point3& p, const Box& box) {
  return (box.min - p).cwiseMax(p - box.max).cwiseMax(Vec3::Zero()).norm();
}

/// Distance to a convex set is convex along a segment, so golden-section search is exact up to its tolerance.
inline double segment_box_distance(const Point3& p, const Point3& q, const Box& box) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  auto f = [&](double t) { return point_box_distance(p + t * (q - p), box); };
  double lo = 0.0, hi = 1.0;
  double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
  double f1 = f(x1), f2 = f(x2);
  for (int it = 0; it < 90 && hi - lo > 1e-15; ++it) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = f(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = f(x2);
    }
  }
  return std::min({f(0.0), f(1.0), f1, f2});
}

inline bool capsule_triangle_intersect(const Capsule& cap, const Point3& a, const Point3& b, const Point3& c) {
  return segment_triangle_distance(cap.a, cap.b, a, b, c) < cap.radius;
}

inline bool capsule_plane_intersect(const Capsule& cap, const Plane& plane) {
  return std::min(plane.signed_distance(cap.a), plane.signed_distance(cap.b)) < cap.radius;
}

inline bool capsule_box_intersect(const Capsule& cap, const Box& box) {
  return segment_box_distance(cap.a, cap.b, box) < cap.radius;
}

// ---------------------------------------------------------------------------
// Triangle index

/// Uniform grid over the mesh bounding box; each triangle is listed in every cell its box overlaps.
class TriangleGrid {
 public:
  TriangleGrid() = default;

  TriangleGrid(const SurfaceMesh& mesh, double cell_mm) : mesh_(&mesh), cell_(cell_mm) {
    if (mesh.vertices.empty()) return;
    lo_ = hi_ = mesh.vertices.front();
    for (const auto& v : mesh.vertices) {
      lo_ = lo_.cwiseMin(v);
      hi_ = hi_.cwiseMax(v);
    }
    for (int a = 0; a < 3; ++a) n_[a] = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil((hi_[a] - lo_[a]) / cell_)));
    cells_.assign(static_cast<std::size_t>(n_[0] * n_[1] * n_[2]), {});
    for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
      const auto& tri = mesh.triangles[t];
      Vec3 tlo = mesh.vertices[tri[0]], thi = tlo;
      for (auto v : tri) {
        tlo = tlo.cwiseMin(mesh.vertices[v]);
        thi = thi.cwiseMax(mesh.vertices[v]);
      }
      const auto c0 = cell_of(tlo), c1 = cell_of(thi);
      for (auto k = c0[2]; k <= c1[2]; ++k)
        for (auto j = c0[1]; j <= c1[1]; ++j)
          for (auto i = c0[0]; i <= c1[0]; ++i) cells_[index(i, j, k)].push_back(static_cast<std::uint32_t>(t));
    }
  }

  /// True iff some triangle lies closer than the capsule radius to its axis.
  [[nodiscard]] bool intersects(const Capsule& cap) const {
    if (!mesh_ || mesh_->triangles.empty()) return false;
    const Vec3 r = Vec3::Constant(cap.radius);
    const Vec3 qlo = cap.a.cwiseMin(cap.b) - r, qhi = cap.a.cwiseMax(cap.b) + r;
    if ((qlo.array() > hi_.array()).any() || (qhi.array() < lo_.array()).any()) return false;
    const auto c0 = cell_of(qlo), c1 = cell_of(qhi);
    std::vector<std::uint32_t> seen;
    for (auto k = c0[2]; k <= c1[2]; ++k)
      for (auto j = c0[1]; j <= c1[1]; ++j)
        for (auto i = c0[0]; i <= c1[0]; ++i)
          for (auto t : cells_[index(i, j, k)]) {
            if (std::find(seen.begin(), seen.end(), t) != seen.end()) continue;
            seen.push_back(t);
            const auto& tri = mesh_->triangles[t];
            if (capsule_triangle_intersect(cap, mesh_->vertices[tri[0]], mesh_->vertices[tri[1]],
                                           mesh_->vertices[tri[2]])) {
              return true;
            }
          }
    return false;
  }

 private:
  [[nodiscard]] std::array<std::int64_t, 3> cell_of(const Point3& p) const {
    std::array<std::int64_t, 3> c{};
    for (int a = 0; a < 3; ++a) {
      c[a] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor((p[a] - lo_[a]) / cell_)), 0, n_[a] - 1);
    }
    return c;
  }
  [[nodiscard]] std::size_t index(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return static_cast<std::size_t>(i + n_[0] * (j + n_[1] * k));
  }

  const SurfaceMesh* mesh_ = nullptr;
  double cell_ = 1.0;
  Point3 lo_ = Point3::Zero(), hi_ = Point3::Zero();
  std::array<std::int64_t, 3> n_{1, 1, 1};
  std::vector<std::vector<std::uint32_t>> cells_;
};

// ---------------------------------------------------------------------------
// Scene

struct SceneOptions {
  double link_margin_mm = 10.0;  // added to every arm capsule radius
  double needle_length_mm = 190.0;
  double needle_radius_mm = 1.2;
  double approach_offset_mm = 50.0;
  IkOptions ik;
};

/// Obstacles live in CT coordinates; the arm base is placed by base_from_ct.
class CollisionScene {
 public:
  CollisionScene(SurfaceMesh body, Plane gantry, Box table, ArmModel arm, RigidTransform base_from_ct,
                 SceneOptions options = {})
      : body_(std::make_shared<SurfaceMesh>(std::move(body))),
        gantry_(gantry),
        table_(table),
        arm_(std::move(arm)),
        base_from_ct_(base_from_ct),
        ct_from_base_(inverse(base_from_ct)),
        options_(options) {
    const double n = gantry_.normal.norm();
    if (!(n > 1e-12)) throw Error(ErrorCode::InvalidArgument, "gantry normal must be nonzero");
    gantry_.normal /= n;
    if ((table_.min.array() > table_.max.array()).any()) throw Error(ErrorCode::InvalidArgument, "table box min > max");
    if (!(options_.needle_radius_mm > 0.0) || !(options_.needle_length_mm > 0.0) || options_.link_margin_mm < 0.0) {
      throw Error(ErrorCode::InvalidArgument, "needle radius and length must be positive, margin >= 0");
    }
    arm_.validate();
    index_ = std::make_shared<TriangleGrid>(*body_, 20.0);
  }

  [[nodiscard]] const SurfaceMesh& body() const { return *body_; }
  [[nodiscard]] const Plane& gantry() const { return gantry_; }
  [[nodiscard]] const Box& table() const { return table_; }
  [[nodiscard]] const ArmModel& arm() const { return arm_; }
  [[nodiscard]] const RigidTransform& base_from_ct() const { return base_from_ct_; }
  [[nodiscard]] const RigidTransform& ct_from_base() const { return ct_from_base_; }
  [[nodiscard]] const SceneOptions& options() const { return options_; }
  [[nodiscard]] const TriangleGrid& body_index() const { return *index_; }

 private:
  std::shared_ptr<const SurfaceMesh> body_;
  Plane gantry_;
  Box table_;
  ArmModel arm_;
  RigidTransform base_from_ct_;
  RigidTransform ct_from_base_;
  SceneOptions options_;
  std::shared_ptr<const TriangleGrid> index_;
};

struct PosedCapsules {
  std::vector<Capsule> links;  // inflated arm capsules, CT frame
  Capsule needle;              // from the tip back along the needle axis
};

inline PosedCapsules posed_capsules(const CollisionScene& scene, const JointConfig& q) {
  const auto f = frames(scene.arm(), q);
  PosedCapsules out;
  for (const auto& l : scene.arm().links) {
    const RigidTransform t = scene.ct_from_base() * f[static_cast<std::size_t>(l.frame)];
    out.links.push_back({t.apply(l.p0), t.apply(l.p1), l.radius + scene.options().link_margin_mm});
  }
  const RigidTransform tip = scene.ct_from_base() * f[kJoints + 1];
  out.needle = {tip.apply({0.0, 0.0, -scene.options().needle_length_mm}), tip.translation(),
                scene.options().needle_radius_mm};
  return out;
}

enum class CollisionKind { None, Link, Needle };

inline CollisionKind collision_kind(const CollisionScene& scene, const JointConfig& q, bool allow_needle_body_contact) {
  const PosedCapsules pc = posed_capsules(scene, q);
  for (const auto& c : pc.links) {
    if (capsule_plane_intersect(c, scene.gantry()) || capsule_box_intersect(c, scene.table()) ||
        scene.body_index().intersects(c)) {
      return CollisionKind::Link;
    }
  }
  if (capsule_plane_intersect(pc.needle, scene.gantry()) || capsule_box_intersect(pc.needle, scene.table())) {
    return CollisionKind::Needle;
  }
  if (!allow_needle_body_contact && scene.body_index().intersects(pc.needle)) return CollisionKind::Needle;
  return CollisionKind::None;
}

inline bool config_in_collision(const CollisionScene& scene, const JointConfig& q, bool allow_needle_body_contact) {
  return collision_kind(scene, q, allow_needle_body_contact) != CollisionKind::None;
}

enum class ReachFailure { IKFailure, LinkCollision, NeedleSideCollision, JointLimit };

constexpr std::string_view to_string(ReachFailure r) {
  switch (r) {
    case ReachFailure::IKFailure: return "IKFailure";
    case ReachFailure::LinkCollision: return "LinkCollision";
    case ReachFailure::NeedleSideCollision: return "NeedleSideCollision";
    case ReachFailure::JointLimit: return "JointLimit";
  }
  return "Unknown";
}

struct ReachabilityResult {
  bool reachable = false;
  std::optional<std::size_t> failing_waypoint;
  std::optional<ReachFailure> reason;
  Waypoints waypoints;              // tip poses in the base frame
  std::vector<JointConfig> configs;  // one per waypoint when reachable
};

/// Deterministic starting configurations for the first waypoint: the caller's
/// seed, then the arm turned towards the goal with a few elbow and wrist bends.
inline std::vector<JointConfig> ik_seeds(const JointConfig& seed, const RigidTransform& goal_in_base) {
  std::vector<JointConfig> seeds{seed};
  const double yaw = std::atan2(goal_in_base.translation().y(), goal_in_base.translation().x());
  const std::array<std::array<double, 3>, 6> bends{{
      {0.6, 1.2, 0.9}, {0.9, 1.6, 0.6}, {0.3, 1.8, 1.0}, {-0.6, -1.2, -0.9}, {1.2, 0.6, 1.2}, {0.0, 0.0, 0.0},
  }};
  for (const auto& b : bends) {
    JointConfig q = JointConfig::Zero();
    q[0] = yaw;
    q[1] = b[0];
    q[3] = -b[1];
    q[5] = b[2];
    seeds.push_back(q);
  }
  return seeds;
}

namespace detail {

inline ReachFailure ik_failure_reason(const ArmModel& arm, const IkResult& r) {
  if (r.status == IkStatus::NoConvergence) {
    for (int i = 0; i < kJoints; ++i) {
      const auto& j = arm.joints[static_cast<std::size_t>(i)];
      if (r.q[i] <= j.min + 1e-9 || r.q[i] >= j.max - 1e-9) return ReachFailure::JointLimit;
    }
  }
  return ReachFailure::IKFailure;
}

inline ReachFailure from_collision(CollisionKind k) {
  return k == CollisionKind::Needle ? ReachFailure::NeedleSideCollision : ReachFailure::LinkCollision;
}

}  // namespace detail

namespace detail {

struct ChainOutcome {
  std::vector<JointConfig> configs;
  std::size_t failing_waypoint = 0;
  std::optional<ReachFailure> reason;  // absent on success
};

inline ChainOutcome run_chain(const CollisionScene& scene, const Waypoints& w, const JointConfig& seed) {
  ChainOutcome out;
  JointConfig q = seed;
  for (std::size_t k = 0; k < w.poses.size(); ++k) {
    const IkResult r = try_ik_dls(scene.arm(), w.poses[k], q, scene.options().ik);
    if (r.status != IkStatus::Converged) {
      out.failing_waypoint = k;
      out.reason = r.status == IkStatus::UnreachableGoal ? ReachFailure::IKFailure : ik_failure_reason(scene.arm(), r);
      return out;
    }
    const CollisionKind c = collision_kind(scene, r.q, k >= w.entry_index);
    if (c != CollisionKind::None) {
      out.failing_waypoint = k;
      out.reason = from_collision(c);
      return out;
    }
    q = r.q;
    out.configs.push_back(q);
  }
  return out;
}

}  // namespace detail

/// Simulated insertion: IK at every waypoint (each seeded by the previous
/// solution) and a collision check, with needle-body contact allowed from the
/// entry waypoint on. The chain is restarted from each deterministic seed in
/// turn; on failure the chain that got furthest (first on ties) gives the
/// reason. `entry` and `target` are CT coordinates.
inline ReachabilityResult insertion_feasible(const CollisionScene& scene, const Point3& entry, const Point3& target,
                                             const JointConfig& seed = JointConfig::Zero()) {
  ReachabilityResult res;
  const RigidTransform& b = scene.base_from_ct();
  res.waypoints = insertion_waypoints(b.apply(entry), b.apply(target), scene.options().approach_offset_mm);
  if (res.waypoints.poses.front().translation().norm() > scene.arm().reach_bound()) {
    res.failing_waypoint = 0;
    res.reason = ReachFailure::IKFailure;
    return res;
  }
  std::optional<detail::ChainOutcome> furthest;
  for (const auto& s : ik_seeds(seed, res.waypoints.poses.front())) {
    detail::ChainOutcome c = detail::run_chain(scene, res.waypoints, s);
    if (!c.reason) {
      res.reachable = true;
      res.configs = std::move(c.configs);
      return res;
    }
    if (!furthest || c.failing_waypoint > furthest->failing_waypoint) furthest = std::move(c);
  }
  res.failing_waypoint = furthest->failing_waypoint;
  res.reason = furthest->reason;
  return res;
}

// ---------------------------------------------------------------------------
// Grid reachability

struct GridReachabilityReport {
  std::size_t cells = 0;           // cells holding at least one Feasible vertex
  std::size_t cells_unreachable = 0;
  std::size_t demoted_optimum = 0;  // optima demoted by their exact re-check
  std::optional<ReachabilityResult> optimum;  // exact result for the final optimum
};

/// Integer cell of `p` in a grid of `grid_mm` along the lattice axes, anchored at the lattice origin.
inline std::array<std::int64_t, 3> reach_cell(const Grid& lattice, double grid_mm, const Point3& p) {
  const Vec3 u = lattice.direction().transpose() * (p - lattice.origin());
  return {static_cast<std::int64_t>(std::floor(u.x() / grid_mm)), static_cast<std::int64_t>(std::floor(u.y() / grid_mm)),
          static_cast<std::int64_t>(std::floor(u.z() / grid_mm))};
}

/// Buckets Feasible vertices into grid cells, tests the vertex nearest each
/// cell centre and applies its verdict to the whole cell. The optimum is then
/// checked exactly; a failing optimum is demoted and selection repeats.
inline GridReachabilityReport grid_reachability(const CollisionScene& scene, HeatMap& hm, unsigned workers = 1) {
  const double grid = hm.params.grid_mm;
  if (!(grid > 0.0)) throw Error(ErrorCode::InvalidArgument, "grid_mm must be positive");
  std::map<std::array<std::int64_t, 3>, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < hm.candidates.size(); ++i) {
    if (hm.candidates[i].classification != Classification::Feasible) continue;
    buckets[reach_cell(hm.lattice, grid, hm.candidates[i].position)].push_back(i);
  }
  std::vector<std::vector<std::size_t>> members;
  std::vector<std::size_t> reps;
  for (auto& [cell, ids] : buckets) {
    const Vec3 centre_u = (Vec3(static_cast<double>(cell[0]), static_cast<double>(cell[1]), static_cast<double>(cell[2])) +
                           Vec3::Constant(0.5)) * grid;
    const Point3 centre = hm.lattice.origin() + hm.lattice.direction() * centre_u;
    std::size_t best = ids.front();
    double best_d = (hm.candidates[best].position - centre).squaredNorm();
    for (auto id : ids) {
      const double d = (hm.candidates[id].position - centre).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = id;
      }
    }
    reps.push_back(best);
    members.push_back(std::move(ids));
  }

  std::vector<char> ok(reps.size(), 0);
  parallel_for(reps.size(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t c = begin; c < end; ++c) {
      ok[c] = insertion_feasible(scene, hm.candidates[reps[c]].position, hm.target).reachable ? 1 : 0;
    }
  });

  GridReachabilityReport report;
  report.cells = reps.size();
  for (std::size_t c = 0; c < reps.size(); ++c) {
    if (ok[c]) continue;
    ++report.cells_unreachable;
    for (auto id : members[c]) mark_unreachable(hm, id);
  }

  while (true) {
    hm.optimal_index = select_optimal(hm);
    if (!hm.optimal_index) break;
    ReachabilityResult exact = insertion_feasible(scene, hm.candidates[*hm.optimal_index].position, hm.target);
    if (exact.reachable) {
      report.optimum = std::move(exact);
      break;
    }
    mark_unreachable(hm, *hm.optimal_index);
    ++report.demoted_optimum;
  }
  return report;
}

/// Exact verdict for every Feasible vertex; vertices that fail become Unreachable.
inline void exhaustive_reachability(const CollisionScene& scene, HeatMap& hm, unsigned workers = 1) {
  std::vector<char> ok(hm.candidates.size(), 1);
  parallel_for(hm.candidates.size(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      if (hm.candidates[i].classification != Classification::Feasible) continue;
      ok[i] = insertion_feasible(scene, hm.candidates[i].position, hm.target).reachable ? 1 : 0;
    }
  });
  for (std::size_t i = 0; i < ok.size(); ++i)
    if (!ok[i]) mark_unreachable(hm, i);
  hm.optimal_index = select_optimal(hm);
}

// ---------------------------------------------------------------------------
// Default placement and scene file

struct PlacementOptions {
  double shoulder_lateral_mm = 550.0;  // shoulder offset from the body centre along +x
  double shoulder_height_mm = 500.0;   // shoulder offset from the body centre along +y
  double gantry_clearance_mm = 350.0;  // gantry plane distance beyond the body's +z extent
  Vec3 table_size_mm{500.0, 200.0, 2000.0};
};

namespace detail {

inline std::pair<Point3, Point3> bounds(const SurfaceMesh& body) {
  if (body.vertices.empty()) throw Error(ErrorCode::InvalidArgument, "body mesh is empty");
  Point3 lo = body.vertices.front(), hi = lo;
  for (const auto& v : body.vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  return {lo, hi};
}

}  // namespace detail

/// CT convention for the defaults: +y points up (anterior), the table lies
/// below the body, the gantry is beyond the body's +z end and the arm stands
/// on the +x side with its base z axis along +y.
inline RigidTransform default_base_from_ct(const SurfaceMesh& body, const ArmModel& arm, const PlacementOptions& p = {}) {
  const auto [lo, hi] = detail::bounds(body);
  const Point3 centre = 0.5 * (lo + hi);
  Mat3 ct_r_base;
  ct_r_base.col(0) = Vec3(-1, 0, 0);
  ct_r_base.col(1) = Vec3(0, 0, 1);
  ct_r_base.col(2) = Vec3(0, 1, 0);
  // Joint 1 sits at height d1 above the base; place the base so the shoulder lands at the requested offset.
  const double shoulder = arm.joints[0].d;
  const Point3 base(centre.x() + p.shoulder_lateral_mm, centre.y() + p.shoulder_height_mm - shoulder, centre.z());
  return inverse(RigidTransform(ct_r_base, base));
}

inline CollisionScene default_scene(const SurfaceMesh& body, ArmModel arm = reference_arm(),
                                    const PlacementOptions& p = {}, SceneOptions options = {}) {
  const auto [lo, hi] = detail::bounds(body);
  const Point3 centre = 0.5 * (lo + hi);
  const Plane gantry{Point3(centre.x(), centre.y(), hi.z() + p.gantry_clearance_mm), Vec3(0, 0, -1)};
  const Box table{Point3(centre.x() - 0.5 * p.table_size_mm.x(), lo.y() - p.table_size_mm.y(),
                         centre.z() - 0.5 * p.table_size_mm.z()),
                  Point3(centre.x() + 0.5 * p.table_size_mm.x(), lo.y(), centre.z() + 0.5 * p.table_size_mm.z())};
  const RigidTransform base = default_base_from_ct(body, arm, p);
  return {body, gantry, table, std::move(arm), base, options};
}

inline Json scene_to_json(const CollisionScene& s, const std::string& body_ply, const std::string& arm_file) {
  const auto& o = s.options();
  Json j = {{"body", body_ply},
            {"gantry", {{"point", vec_to_json(s.gantry().point)}, {"normal", vec_to_json(s.gantry().normal)}}},
            {"table", {{"min", vec_to_json(s.table().min)}, {"max", vec_to_json(s.table().max)}}},
            {"base_from_ct", {{"matrix", transform_to_json(s.base_from_ct())}}},
            {"link_margin_mm", o.link_margin_mm},
            {"needle", {{"length_mm", o.needle_length_mm}, {"radius_mm", o.needle_radius_mm}}},
            {"approach_offset_mm", o.approach_offset_mm}};
  if (!arm_file.empty()) j["arm"] = arm_file;
  return j;
}

/// Relative paths inside the scene file resolve against the file's directory.
inline CollisionScene scene_from_json(const Json& j, const std::filesystem::path& base_dir) {
  try {
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path path(p);
      return (path.is_absolute() ? path : base_dir / path).string();
    };
    SurfaceMesh body = read_ply(resolve(j.at("body").get<std::string>())).mesh;
    ArmModel arm = j.contains("arm") ? read_arm(resolve(j.at("arm").get<std::string>())) : reference_arm();
    const Plane gantry{vec_from_json(j.at("gantry").at("point")), vec_from_json(j.at("gantry").at("normal"))};
    const Box table{vec_from_json(j.at("table").at("min")), vec_from_json(j.at("table").at("max"))};
    const RigidTransform base = transform_from_json(j.at("base_from_ct").at("matrix"));
    SceneOptions o;
    o.link_margin_mm = j.value("link_margin_mm", o.link_margin_mm);
    if (j.contains("needle")) {
      o.needle_length_mm = j.at("needle").value("length_mm", o.needle_length_mm);
      o.needle_radius_mm = j.at("needle").value("radius_mm", o.needle_radius_mm);
    }
    o.approach_offset_mm = j.value("approach_offset_mm", o.approach_offset_mm);
    return {std::move(body), gantry, table, std::move(arm), base, o};
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("scene file: ") + e.what());
  }
}

inline CollisionScene read_scene(const std::string& path) {
  return scene_from_json(read_json_file(path), std::filesystem::path(path).parent_path());
}

}  // namespace needleplan
