#pragma once

// Small constructed collision scenes shared by unit and acceptance tests. The
// robot base coincides with the CT frame; obstacles not under test are far away.

#include "needleplan/collision.hpp"

namespace testsupport {

using namespace needleplan;

inline const Plane kFarGantry{Point3(0, 0, -5000), Vec3(0, 0, 1)};
inline const Box kFarTable{Point3(-6000, -6000, -6000), Point3(-5000, -5000, -5000)};

/// Coarse sphere: 42 vertices, neighbouring vertices about 25 mm apart.
inline SurfaceMesh coarse_body(const Point3& centre, double radius = 40.0) { return make_icosphere(centre, radius, 1); }

inline CollisionScene clear_scene(const SurfaceMesh& body) {
  return {body, kFarGantry, kFarTable, reference_arm(), RigidTransform::identity()};
}

/// A wall (gantry-style half-space) at x = wall_x; everything beyond it is solid.
inline CollisionScene wall_scene(const SurfaceMesh& body, double wall_x) {
  return {body, Plane{Point3(wall_x, 0, 0), Vec3(-1, 0, 0)}, kFarTable, reference_arm(), RigidTransform::identity()};
}

/// Heat map with every vertex Feasible at unit cost plus its distance, on a unit lattice at the origin.
inline HeatMap all_feasible_heatmap(const SurfaceMesh& mesh, const Point3& target, double grid_mm) {
  HeatMap hm;
  hm.mesh = mesh;
  if (hm.mesh.normals.size() != hm.mesh.vertices.size()) hm.mesh.compute_normals();
  hm.lattice = Grid({1, 1, 1}, Vec3::Ones(), Point3::Zero(), Mat3::Identity());
  hm.target = target;
  hm.params.grid_mm = grid_mm;
  hm.candidates.resize(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    auto& c = hm.candidates[i];
    c.position = mesh.vertices[i];
    c.normal = hm.mesh.normals[i];
    c.distance_mm = (c.position - target).norm();
    c.angle_deg = insertion_angle_deg(c.position, c.normal, target);
    c.classification = Classification::Feasible;
    c.cost = cost(c.distance_mm, c.angle_deg, hm.params);
  }
  hm.optimal_index = select_optimal(hm);
  return hm;
}

}  // namespace testsupport
