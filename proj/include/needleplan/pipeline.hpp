#pragma once

// End-to-end planning shared by the batch CLI and the plan service: volume
// preparation, heat map, grid reachability, entry selection and simulated
// execution.

#include <cstdint>
#include <fstream>
#include <iterator>
#include <memory>
#include <random>
#include <sstream>
#include <string>

#include "needleplan/collision.hpp"
#include "needleplan/planner.hpp"
#include "needleplan/segmentation.hpp"
#include "needleplan/volume.hpp"

namespace needleplan {

/// FNV-1a over the bytes, as 16 hex digits.
inline std::string content_id(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// A loaded CT with everything derived from it that does not depend on the target.
struct PreparedVolume {
  std::string id;
  Volume ct;
  Mask body;
  SurfaceMesh skin;            // full resolution, carries the heat map
  SurfaceMesh collision_body;  // from the half-resolution volume, used by the collision scene
};

inline PreparedVolume prepare_volume(Volume ct, std::string id = {}, const SegmentationParams& seg = {}) {
  PreparedVolume p{std::move(id), std::move(ct), Mask(), SurfaceMesh(), SurfaceMesh()};
  p.body = body_mask(p.ct, seg);
  p.skin = extract_surface(p.body);
  p.collision_body = extract_surface(body_mask(downsample_half(p.ct), seg));
  return p;
}

inline PreparedVolume load_prepared_volume(const std::string& path, const SegmentationParams& seg = {}) {
  const std::string bytes = read_file_bytes(path);
  std::istringstream in(bytes);
  return prepare_volume(parse_nrrd(in), content_id(bytes), seg);
}

struct PlanOutcome {
  HeatMap heatmap;
  std::optional<GridReachabilityReport> reachability;  // absent without a scene
};

inline std::optional<std::size_t> chosen_entry(const PlanOutcome& o) { return o.heatmap.optimal_index; }

/// Heat map, then (with a scene) grid reachability and exact re-verification of the optimum.
inline PlanOutcome plan_entry(const PreparedVolume& v, const CollisionScene* scene, const Point3& target,
                              const PlanParams& params, unsigned workers) {
  PlanOutcome o{build_heatmap(v.ct, v.body, v.skin, target, params, workers), std::nullopt};
  if (scene) o.reachability = grid_reachability(*scene, o.heatmap, workers);
  return o;
}

inline Json reachability_to_json(const ReachabilityResult& r) {
  Json j = {{"reachable", r.reachable}};
  if (r.failing_waypoint) j["failing_waypoint"] = *r.failing_waypoint;
  if (r.reason) j["reason"] = std::string(to_string(*r.reason));
  return j;
}

inline Json plan_to_json(const PlanOutcome& o) {
  const HeatMap& hm = o.heatmap;
  Json j = {{"target", vec_to_json(hm.target)}, {"counts", counts_to_json(count_classes(hm))}};
  if (const auto e = chosen_entry(o)) {
    const EntryCandidate& c = hm.candidates[*e];
    j["entry_index"] = *e;
    j["entry"] = vec_to_json(c.position);
    j["cost"] = *c.cost;
    j["distance_mm"] = c.distance_mm;
    j["angle_deg"] = c.angle_deg;
  } else {
    j["entry_index"] = nullptr;
  }
  if (o.reachability) {
    j["reachability"] = {{"cells", o.reachability->cells},
                         {"cells_unreachable", o.reachability->cells_unreachable},
                         {"demoted_optimum", o.reachability->demoted_optimum}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Simulated execution

/// Zero-mean isotropic Gaussian offset perpendicular to the planned axis, sigma per axis.
struct NoiseModel {
  double lateral_sigma_mm = 0.0;
};

struct SimulatedInsertion {
  Point3 entry;  // executed skin entry
  Point3 tip;    // executed guide-needle tip
};

/// Guide tip planned 10 mm short of the target so the biopsy centre lands on
/// it; the executed needle is the planned one shifted sideways by the noise.
inline SimulatedInsertion simulate_insertion(const Point3& entry, const Point3& target, const NoiseModel& noise,
                                             std::mt19937_64& rng) {
  const Dir3 dir(target - entry);
  const Point3 planned_tip = target - 10.0 * dir.vec();
  Vec3 offset = Vec3::Zero();
  if (noise.lateral_sigma_mm > 0.0) {
    const Mat3 frame = align_z(dir);
    std::normal_distribution<double> n(0.0, noise.lateral_sigma_mm);
    const double a = n(rng), b = n(rng);
    offset = a * frame.col(0) + b * frame.col(1);
  }
  return {entry + offset, planned_tip + offset};
}

struct PlanRecord {
  Point3 target;
  std::size_t entry_index = 0;
  Point3 entry;
  ClassCounts counts;
  ReachabilityResult verdict;
  SimulatedInsertion executed;
  PlacementReport report;
};

inline Json record_to_json(const PlanRecord& r) {
  return {{"target", vec_to_json(r.target)},
          {"entry_index", r.entry_index},
          {"entry", vec_to_json(r.entry)},
          {"counts", counts_to_json(r.counts)},
          {"verdict", reachability_to_json(r.verdict)},
          {"executed_entry", vec_to_json(r.executed.entry)},
          {"executed_tip", vec_to_json(r.executed.tip)},
          {"report", report_to_json(r.report)}};
}

/// Exact reachability check of the chosen entry followed by a simulated insertion.
inline PlanRecord execute_entry(const CollisionScene& scene, const HeatMap& hm, std::size_t entry_index,
                                const NoiseModel& noise, std::mt19937_64& rng) {
  if (entry_index >= hm.candidates.size()) throw Error(ErrorCode::InvalidArgument, "entry vertex out of range");
  const EntryCandidate& c = hm.candidates[entry_index];
  if (c.classification != Classification::Feasible) {
    throw Error(ErrorCode::NotFeasible, "entry vertex is " + std::string(to_string(c.classification)));
  }
  PlanRecord r;
  r.target = hm.target;
  r.entry_index = entry_index;
  r.entry = c.position;
  r.counts = count_classes(hm);
  r.verdict = insertion_feasible(scene, c.position, hm.target);
  if (!r.verdict.reachable) {
    throw Error(ErrorCode::NotReachable,
                "entry fails at waypoint " + std::to_string(r.verdict.failing_waypoint.value_or(0)) + ": " +
                    std::string(to_string(r.verdict.reason.value_or(ReachFailure::IKFailure))));
  }
  r.executed = simulate_insertion(c.position, hm.target, noise, rng);
  r.report = placement_report(hm.target, r.executed.entry, r.executed.tip);
  return r;
}

}  // namespace needleplan
