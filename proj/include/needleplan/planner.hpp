#pragma once

// Entry-point overlay: classification, margin, cost, optimum selection and
// needle-placement metrics.

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "needleplan/mesh.hpp"
#include "needleplan/raycast.hpp"

namespace needleplan {

struct PlanParams {
  double needle_length_mm = 160.0;
  double margin_mm = 5.0;
  HU dense_hu_threshold = 200;
  double weight_distance = 0.5;
  double weight_angle = 0.5;
  double grid_mm = 30.0;

  void validate() const {
    if (!(needle_length_mm > 0.0) || !(margin_mm > 0.0) || dense_hu_threshold <= 0 || !(weight_distance > 0.0) ||
        !(weight_angle > 0.0) || !(grid_mm > 0.0)) {
      throw Error(ErrorCode::InvalidArgument, "plan parameters must all be positive");
    }
    if (std::abs(weight_distance + weight_angle - 1.0) > 1e-9) {
      throw Error(ErrorCode::InvalidArgument, "cost weights must sum to 1");
    }
  }
};

inline Json params_to_json(const PlanParams& p) {
  return {{"needle_length_mm", p.needle_length_mm}, {"margin_mm", p.margin_mm},
          {"dense_hu_threshold", p.dense_hu_threshold}, {"weight_distance", p.weight_distance},
          {"weight_angle", p.weight_angle}, {"grid_mm", p.grid_mm}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline PlanParams params_from_json(const Json& j) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "plan parameters must be an object");
  PlanParams p;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_number()) throw Error(ErrorCode::InvalidArgument, "parameter " + key + " must be a number");
    if (key == "needle_length_mm") p.needle_length_mm = value.get<double>();
    else if (key == "margin_mm") p.margin_mm = value.get<double>();
    else if (key == "dense_hu_threshold") p.dense_hu_threshold = value.get<HU>();
    else if (key == "weight_distance") p.weight_distance = value.get<double>();
    else if (key == "weight_angle") p.weight_angle = value.get<double>();
    else if (key == "grid_mm") p.grid_mm = value.get<double>();
    else throw Error(ErrorCode::InvalidArgument, "unknown parameter " + key);
  }
  p.validate();
  return p;
}

enum class Classification : std::uint8_t { Feasible, OutOfRange, Occluded, MarginOccluded, AirBlocked, Unreachable };

constexpr std::string_view to_string(Classification c) {
  switch (c) {
    case Classification::Feasible: return "Feasible";
    case Classification::OutOfRange: return "OutOfRange";
    case Classification::Occluded: return "Occluded";
    case Classification::MarginOccluded: return "MarginOccluded";
    case Classification::AirBlocked: return "AirBlocked";
    case Classification::Unreachable: return "Unreachable";
  }
  return "Unknown";
}

inline Classification classification_from_string(std::string_view s) {
  for (auto c : {Classification::Feasible, Classification::OutOfRange, Classification::Occluded,
                 Classification::MarginOccluded, Classification::AirBlocked, Classification::Unreachable})
    if (to_string(c) == s) return c;
  throw Error(ErrorCode::InvalidArgument, "unknown classification " + std::string(s));
}

struct EntryCandidate {
  Point3 position;
  Vec3 normal;
  double distance_mm = 0.0;
  double angle_deg = 0.0;
  HU max_hu = kAirHU;
  Classification classification = Classification::Feasible;
  std::optional<double> cost;  // present iff Feasible
};

struct HeatMap {
  SurfaceMesh mesh;
  Grid lattice;  // geometry of the planning volume; defines the reachability grid axes
  std::vector<EntryCandidate> candidates;
  Point3 target;
  PlanParams params;
  std::optional<std::size_t> optimal_index;
};

/// q = w_d d/l + w_a a/90. Weights only need to be positive here.
inline double cost(double d_mm, double a_deg, const PlanParams& p) {
  if (!(d_mm >= 0.0) || d_mm > p.needle_length_mm || !(a_deg >= 0.0) || a_deg > 90.0) {
    throw Error(ErrorCode::OutOfDomain, "cost needs 0 <= d <= needle length and 0 <= a <= 90");
  }
  return p.weight_distance * (d_mm / p.needle_length_mm) + p.weight_angle * (a_deg / 90.0);
}

/// Angle in degrees between the needle axis through `position` towards `target` and the skin normal.
inline double insertion_angle_deg(const Point3& position, const Vec3& normal, const Point3& target) {
  const Vec3 dir = target - position;
  const double len = dir.norm(), nlen = normal.norm();
  if (len == 0.0 || nlen == 0.0) return 0.0;
  const double c = std::clamp(std::abs(dir.dot(normal)) / (len * nlen), 0.0, 1.0);
  return std::clamp(rad_to_deg(std::acos(c)), 0.0, 90.0);
}

/// Priority: OutOfRange > AirBlocked > Occluded > MarginOccluded > Feasible.
/// MarginOccluded means within margin_mm (3D) of any Occluded vertex.
inline std::vector<Classification> classify(const std::vector<Point3>& positions, const std::vector<HeatSample>& hv,
                                            const PlanParams& p) {
  const std::size_t n = positions.size();
  std::vector<Classification> out(n, Classification::Feasible);
  for (std::size_t i = 0; i < n; ++i) {
    if (hv[i].distance_mm > p.needle_length_mm) out[i] = Classification::OutOfRange;
    else if (hv[i].blocked) out[i] = Classification::AirBlocked;
    else if (hv[i].max_hu >= p.dense_hu_threshold) out[i] = Classification::Occluded;
  }

  // Spatial hash of Occluded vertices with cell size = margin.
  const double cell = p.margin_mm;
  auto key_of = [&](const std::array<std::int64_t, 3>& c) {
    return (static_cast<std::uint64_t>(c[0] & 0x1fffff) << 42) | (static_cast<std::uint64_t>(c[1] & 0x1fffff) << 21) |
           static_cast<std::uint64_t>(c[2] & 0x1fffff);
  };
  auto cell_of = [&](const Point3& x) {
    return std::array<std::int64_t, 3>{static_cast<std::int64_t>(std::floor(x.x() / cell)),
                                       static_cast<std::int64_t>(std::floor(x.y() / cell)),
                                       static_cast<std::int64_t>(std::floor(x.z() / cell))};
  };
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> occluded;
  for (std::size_t i = 0; i < n; ++i)
    if (out[i] == Classification::Occluded) occluded[key_of(cell_of(positions[i]))].push_back(i);
  if (occluded.empty()) return out;

  const double m2 = p.margin_mm * p.margin_mm;
  for (std::size_t i = 0; i < n; ++i) {
    if (out[i] != Classification::Feasible) continue;
    const auto c = cell_of(positions[i]);
    bool near = false;
    for (int dz = -1; dz <= 1 && !near; ++dz)
      for (int dy = -1; dy <= 1 && !near; ++dy)
        for (int dx = -1; dx <= 1 && !near; ++dx) {
          const auto it = occluded.find(key_of({c[0] + dx, c[1] + dy, c[2] + dz}));
          if (it == occluded.end()) continue;
          for (auto o : it->second)
            if ((positions[o] - positions[i]).squaredNorm() <= m2) {
              near = true;
              break;
            }
        }
    if (near) out[i] = Classification::MarginOccluded;
  }
  return out;
}

/// Feasible vertex of minimal cost; ties go to the lowest vertex id.
inline std::optional<std::size_t> select_optimal(const HeatMap& hm) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < hm.candidates.size(); ++i) {
    const auto& c = hm.candidates[i];
    if (c.classification != Classification::Feasible || !c.cost) continue;
    if (!best || *c.cost < *hm.candidates[*best].cost) best = i;
  }
  return best;
}

/// Marks a vertex Unreachable and drops its cost.
inline void mark_unreachable(HeatMap& hm, std::size_t vertex) {
  auto& c = hm.candidates.at(vertex);
  c.classification = Classification::Unreachable;
  c.cost.reset();
}

/// Voxel of `p` and its 26 neighbours all lie in the body.
inline bool strictly_inside(const Mask& body, const Point3& p) {
  const VoxelIndex c = body.grid().nearest_voxel(p);
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (!body.at_or_false({c.i + dx, c.j + dy, c.k + dz})) return false;
  return true;
}

inline HeatMap build_heatmap(const Volume& v, const Mask& body, const SurfaceMesh& mesh, const Point3& target,
                             const PlanParams& params, unsigned workers = 1) {
  params.validate();
  if (!strictly_inside(body, target)) {
    throw Error(ErrorCode::TargetOutsideBody, "target must lie inside the body, at least one voxel from its boundary");
  }
  HeatMap hm;
  hm.mesh = mesh;
  if (hm.mesh.normals.size() != hm.mesh.vertices.size()) hm.mesh.compute_normals();
  hm.lattice = v.grid();
  hm.target = target;
  hm.params = params;
  const auto hv = heat_values(v, body, target, hm.mesh.vertices, workers, params.needle_length_mm);
  const auto classes = classify(hm.mesh.vertices, hv, params);
  hm.candidates.resize(hm.mesh.vertices.size());
  for (std::size_t i = 0; i < hm.candidates.size(); ++i) {
    auto& c = hm.candidates[i];
    c.position = hm.mesh.vertices[i];
    c.normal = hm.mesh.normals[i];
    c.distance_mm = hv[i].distance_mm;
    c.angle_deg = insertion_angle_deg(c.position, c.normal, target);
    c.max_hu = hv[i].max_hu;
    c.classification = classes[i];
    if (c.classification == Classification::Feasible) c.cost = cost(c.distance_mm, c.angle_deg, params);
  }
  hm.optimal_index = select_optimal(hm);
  return hm;
}

struct ClassCounts {
  std::array<std::size_t, 6> n{};
  [[nodiscard]] std::size_t operator[](Classification c) const { return n[static_cast<std::size_t>(c)]; }
};

inline ClassCounts count_classes(const HeatMap& hm) {
  ClassCounts k;
  for (const auto& c : hm.candidates) ++k.n[static_cast<std::size_t>(c.classification)];
  return k;
}

inline Json counts_to_json(const ClassCounts& k) {
  Json j = Json::object();
  for (std::size_t i = 0; i < k.n.size(); ++i) j[std::string(to_string(static_cast<Classification>(i)))] = k.n[i];
  return j;
}

// ---------------------------------------------------------------------------
// Export: PLY whose per-vertex quality is the cost, or a sentinel for
// non-feasible vertices, plus a JSON sidecar.

inline double heat_value(const EntryCandidate& c) {
  switch (c.classification) {
    case Classification::Feasible: return *c.cost;
    case Classification::OutOfRange: return 2.0;
    case Classification::Occluded:
    case Classification::MarginOccluded: return 3.0;
    case Classification::AirBlocked: return 4.0;
    case Classification::Unreachable: return 5.0;
  }
  return 5.0;
}

inline std::vector<double> heat_values_for_export(const HeatMap& hm) {
  std::vector<double> q(hm.candidates.size());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = heat_value(hm.candidates[i]);
  return q;
}

inline Json grid_to_json(const Grid& g) {
  Json dir = Json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) dir.push_back(g.direction()(r, c));
  return {{"dims", {g.nx(), g.ny(), g.nz()}}, {"spacing", vec_to_json(g.spacing())},
          {"origin", vec_to_json(g.origin())}, {"direction", dir}};
}

inline Grid grid_from_json(const Json& j) {
  const auto dims = j.at("dims").get<std::array<std::int64_t, 3>>();
  Mat3 d;
  for (int i = 0; i < 9; ++i) d(i / 3, i % 3) = j.at("direction").at(i).get<double>();
  return {dims, vec_from_json(j.at("spacing")), vec_from_json(j.at("origin")), d};
}

inline Json heatmap_sidecar(const HeatMap& hm) {
  Json classes = Json::array();
  for (const auto& c : hm.candidates) classes.push_back(static_cast<int>(c.classification));
  Json j = {{"target", vec_to_json(hm.target)},
            {"params", params_to_json(hm.params)},
            {"lattice", grid_to_json(hm.lattice)},
            {"counts", counts_to_json(count_classes(hm))},
            {"classification", classes}};
  j["optimal_vertex"] = hm.optimal_index ? Json(*hm.optimal_index) : Json(nullptr);
  if (hm.optimal_index) j["optimal_position"] = vec_to_json(hm.candidates[*hm.optimal_index].position);
  return j;
}

inline std::string heatmap_to_ply(const HeatMap& hm) {
  const auto q = heat_values_for_export(hm);
  return ply_to_string(hm.mesh, &q);
}

inline void write_heatmap(const std::string& ply_path, const HeatMap& hm) {
  const auto q = heat_values_for_export(hm);
  write_ply(ply_path, hm.mesh, &q);
  write_json_file(ply_path + ".json", heatmap_sidecar(hm));
}

/// Reads a heat map written by write_heatmap (PLY plus "<path>.json").
inline HeatMap read_heatmap(const std::string& ply_path) {
  const PlyData ply = read_ply(ply_path);
  const Json side = read_json_file(ply_path + ".json");
  if (!ply.quality) throw Error(ErrorCode::MalformedHeader, ply_path + ": missing quality property");
  HeatMap hm;
  hm.mesh = ply.mesh;
  hm.target = vec_from_json(side.at("target"));
  hm.params = params_from_json(side.at("params"));
  hm.lattice = grid_from_json(side.at("lattice"));
  const auto& classes = side.at("classification");
  if (classes.size() != hm.mesh.vertices.size()) {
    throw Error(ErrorCode::DimensionMismatch, "sidecar classification count does not match the mesh");
  }
  hm.candidates.resize(hm.mesh.vertices.size());
  for (std::size_t i = 0; i < hm.candidates.size(); ++i) {
    auto& c = hm.candidates[i];
    c.position = hm.mesh.vertices[i];
    c.normal = hm.mesh.normals[i];
    c.distance_mm = (c.position - hm.target).norm();
    c.angle_deg = insertion_angle_deg(c.position, c.normal, hm.target);
    c.classification = static_cast<Classification>(classes[i].get<int>());
    if (c.classification == Classification::Feasible) c.cost = (*ply.quality)[i];
  }
  hm.optimal_index = select_optimal(hm);
  return hm;
}

// ---------------------------------------------------------------------------
// Needle-placement metrics.

/// Centre of the biopsy notch, 10 mm beyond the guide tip along the insertion direction.
inline Point3 biopsy_center(const Point3& tip, const Dir3& direction) { return tip + 10.0 * direction.vec(); }

struct PlacementReport {
  double deviation_3d_mm = 0.0;
  double deviation_lateral_mm = 0.0;
  Point3 biopsy_center;
};

/// Deviations of `target` from the detected needle (axis entry -> tip).
inline PlacementReport placement_report(const Point3& target, const Point3& entry, const Point3& tip) {
  const Vec3 axis = tip - entry;
  if (axis.norm() < 1e-9) throw Error(ErrorCode::DegenerateNeedle, "entry and tip coincide");
  const Dir3 dir(axis);
  PlacementReport r;
  r.biopsy_center = biopsy_center(tip, dir);
  r.deviation_3d_mm = (target - r.biopsy_center).norm();
  const Vec3 rel = target - r.biopsy_center;
  // The biopsy centre is on the axis, so the exact lateral distance never exceeds
  // the 3D one; the min removes rounding when the two are equal.
  r.deviation_lateral_mm = std::min((rel - rel.dot(dir.vec()) * dir.vec()).norm(), r.deviation_3d_mm);
  return r;
}

inline Json report_to_json(const PlacementReport& r) {
  return {{"dev3d", r.deviation_3d_mm}, {"devlat", r.deviation_lateral_mm},
          {"biopsy_center", vec_to_json(r.biopsy_center)}};
}

}  // namespace needleplan
