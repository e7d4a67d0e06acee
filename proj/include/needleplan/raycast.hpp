#pragma once

// Voxel traversal along straight needle paths (Amanatides & Woo), maximum-HU
// projection and the air-gap test.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "needleplan/mask.hpp"
#include "needleplan/parallel.hpp"

namespace needleplan {

struct RaySegment {
  Point3 start;  // target
  Point3 end;    // surface point
};

namespace detail {

/// Parameter tolerance used for boundary ties, in units of the segment length.
constexpr double kTraverseTieEps = 1e-9;

struct Clip {
  double t0 = 0.0;
  double t1 = 1.0;
};

/// Clips p0 + t d, t in [0,1], against the lattice box [-0.5, n-0.5]^3 in index space.
inline std::optional<Clip> clip_to_lattice(const Grid& g, const Vec3& p0, const Vec3& d) {
  Clip c;
  for (int a = 0; a < 3; ++a) {
    const double lo = -0.5, hi = static_cast<double>(g.dims()[a]) - 0.5;
    if (d[a] == 0.0) {
      if (p0[a] < lo || p0[a] > hi) return std::nullopt;
      continue;
    }
    double ta = (lo - p0[a]) / d[a], tb = (hi - p0[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    c.t0 = std::max(c.t0, ta);
    c.t1 = std::min(c.t1, tb);
  }
  if (c.t1 - c.t0 <= kTraverseTieEps) return std::nullopt;
  return c;
}

struct Traversal {
  std::vector<VoxelIndex> cells;
  std::vector<double> t_enter;  // parameter at which each cell is entered
  bool leaves_lattice = false;  // part of the segment lies outside the lattice
};

inline Traversal traverse_detailed(const Grid& g, const RaySegment& seg) {
  if ((seg.end - seg.start).norm() < 1e-9) {
    throw Error(ErrorCode::DegenerateSegment, "segment length is below 1e-9 mm");
  }
  const Vec3 p0 = g.world_to_continuous_index(seg.start);
  const Vec3 d = g.world_to_continuous_index(seg.end) - p0;
  Traversal out;
  const auto clip = clip_to_lattice(g, p0, d);
  if (!clip) {
    out.leaves_lattice = true;
    return out;
  }
  out.leaves_lattice = clip->t0 > kTraverseTieEps || clip->t1 < 1.0 - kTraverseTieEps;

  const Vec3 ps = p0 + clip->t0 * d;
  std::array<std::int64_t, 3> cell{}, step{};
  std::array<double, 3> t_max{}, t_delta{};
  for (int a = 0; a < 3; ++a) {
    const double s = ps[a] + 0.5;
    auto c = static_cast<std::int64_t>(std::floor(s));
    // On an exact cell boundary a ray moving downwards starts in the lower cell.
    if (d[a] < 0.0 && s == std::floor(s)) --c;
    cell[a] = std::clamp<std::int64_t>(c, 0, g.dims()[a] - 1);
    if (d[a] > 0.0) {
      step[a] = 1;
      t_delta[a] = 1.0 / d[a];
      t_max[a] = clip->t0 + (static_cast<double>(cell[a]) + 0.5 - ps[a]) / d[a];
    } else if (d[a] < 0.0) {
      step[a] = -1;
      t_delta[a] = -1.0 / d[a];
      t_max[a] = clip->t0 + (static_cast<double>(cell[a]) - 0.5 - ps[a]) / d[a];
    } else {
      step[a] = 0;
      t_delta[a] = std::numeric_limits<double>::infinity();
      t_max[a] = std::numeric_limits<double>::infinity();
    }
  }

  double t = clip->t0;
  while (true) {
    out.cells.push_back({cell[0], cell[1], cell[2]});
    out.t_enter.push_back(t);
    const double t_next = std::min({t_max[0], t_max[1], t_max[2]});
    if (t_next >= clip->t1 - kTraverseTieEps) break;
    // Step every axis whose boundary is hit at (numerically) the same parameter,
    // so rays through edges and corners never visit zero-length cells.
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      if (t_max[a] <= t_next + kTraverseTieEps) {
        cell[a] += step[a];
        t_max[a] += t_delta[a];
        if (cell[a] < 0 || cell[a] >= g.dims()[a]) inside = false;
      }
    }
    if (!inside) break;
    t = t_next;
  }
  return out;
}

}  // namespace detail

/// Lattice voxels whose cells the segment crosses, ordered from start to end.
/// Portions of the segment outside the lattice are clipped away.
inline std::vector<VoxelIndex> traverse(const Grid& g, const RaySegment& seg) {
  return detail::traverse_detailed(g, seg).cells;
}

inline std::vector<VoxelIndex> traverse(const Volume& v, const RaySegment& seg) { return traverse(v.grid(), seg); }

/// Maximum raw HU over the traversed voxels; clipped-off portions count as air.
inline HU max_hu_along(const Volume& v, const RaySegment& seg) {
  const auto tr = detail::traverse_detailed(v.grid(), seg);
  HU m = std::numeric_limits<HU>::min();
  for (const auto& c : tr.cells) m = std::max(m, v.at(c));
  if (tr.leaves_lattice || tr.cells.empty()) m = std::max(m, kAirHU);
  return m;
}

/// Distance from the surface point within which re-entry into the body is not
/// counted: one voxel diagonal, the scale on which the surface vertex itself is defined.
inline double air_gap_end_tolerance(const Grid& g) { return g.spacing().norm(); }

/// True iff, walking from the target towards the surface point, the ray leaves
/// the body and later re-enters it (another body part lies in the air gap).
/// Cells entered within air_gap_end_tolerance of the surface point are ignored.
inline bool air_gap_blocked(const Mask& body, const RaySegment& seg) {
  const Grid& g = body.grid();
  if (!body.at_or_false(g.nearest_voxel(seg.start))) {
    throw Error(ErrorCode::StartOutsideBody, "ray start is not inside the body mask");
  }
  const auto tr = detail::traverse_detailed(g, seg);
  const double length = (seg.end - seg.start).norm();
  const double t_ignore = 1.0 - air_gap_end_tolerance(g) / length;
  bool exited = false;
  for (std::size_t n = 0; n < tr.cells.size(); ++n) {
    const bool in_body = body.at(tr.cells[n]);
    if (!in_body) {
      exited = true;
    } else if (exited) {
      if (tr.t_enter[n] < t_ignore) return true;
    }
  }
  return false;
}

struct HeatSample {
  HU max_hu = kAirHU;
  bool blocked = false;
  double distance_mm = 0.0;
  bool evaluated = false;  // false when skipped for being beyond max_distance
};

/// Per-point ray statistics from `target`. Points farther than `max_distance_mm`
/// only get their distance. Output is identical for any worker count.
inline std::vector<HeatSample> heat_values(const Volume& v, const Mask& body, const Point3& target,
                                           const std::vector<Point3>& points, unsigned workers = 1,
                                           double max_distance_mm = std::numeric_limits<double>::infinity()) {
  if (!body.at_or_false(body.grid().nearest_voxel(target))) {
    throw Error(ErrorCode::StartOutsideBody, "target is not inside the body mask");
  }
  std::vector<HeatSample> out(points.size());
  parallel_for(points.size(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      HeatSample& s = out[i];
      s.distance_mm = (points[i] - target).norm();
      if (s.distance_mm > max_distance_mm) continue;
      const RaySegment seg{target, points[i]};
      s.max_hu = max_hu_along(v, seg);
      s.blocked = air_gap_blocked(body, seg);
      s.evaluated = true;
    }
  });
  return out;
}

}  // namespace needleplan
