#pragma once

// Skin segmentation pipeline, surface extraction and steel-ball detection.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <unordered_map>
#include <vector>

#include "needleplan/mask.hpp"
#include "needleplan/mesh.hpp"

namespace needleplan {

struct SegmentationParams {
  HU skin_threshold_hu = -300;
  /// Radius of the closing ball (a 1 cm kernel read as its diameter).
  double closing_radius_mm = 5.0;
};

/// threshold -> largest component -> closing -> invert -> largest exterior-air
/// component -> invert. Enclosed cavities end up inside the returned mask.
inline Mask body_mask(const Volume& v, HU t_hu, double closing_radius_mm = 5.0) {
  const Mask tissue = largest_component(threshold(v, t_hu), Connectivity::Six);
  const Mask closed = morph_close(tissue, closing_radius_mm);
  const Mask exterior_air = largest_component(invert(closed), Connectivity::TwentySix);
  return invert(exterior_air);
}

inline Mask body_mask(const Volume& v, const SegmentationParams& p = {}) {
  return body_mask(v, p.skin_threshold_hu, p.closing_radius_mm);
}

namespace detail {

/// Binary mask smoothed by a separable [1 2 1]/4 kernel on a lattice padded
/// by one empty layer; index (i, j, k) of the result is voxel (i-1, j-1, k-1).
inline std::vector<float> smoothed_indicator(const Mask& m) {
  const Grid& g = m.grid();
  const std::int64_t px = g.nx() + 2, py = g.ny() + 2, pz = g.nz() + 2;
  std::vector<float> f(static_cast<std::size_t>(px * py * pz), 0.0f), tmp(f.size());
  for (std::int64_t k = 0; k < g.nz(); ++k)
    for (std::int64_t j = 0; j < g.ny(); ++j)
      for (std::int64_t i = 0; i < g.nx(); ++i)
        if (m.at(i, j, k)) f[static_cast<std::size_t>((i + 1) + px * ((j + 1) + py * (k + 1)))] = 1.0f;
  const std::array<std::int64_t, 3> n{px, py, pz};
  const std::array<std::int64_t, 3> stride{1, px, px * py};
  for (int axis = 0; axis < 3; ++axis) {
    for (std::size_t q = 0; q < f.size(); ++q) {
      const auto idx = static_cast<std::int64_t>(q);
      const std::int64_t c = (idx / stride[axis]) % n[axis];
      const float lo = c > 0 ? f[q - static_cast<std::size_t>(stride[axis])] : 0.0f;
      const float hi = c + 1 < n[axis] ? f[q + static_cast<std::size_t>(stride[axis])] : 0.0f;
      tmp[q] = 0.25f * lo + 0.5f * f[q] + 0.25f * hi;
    }
    f.swap(tmp);
  }
  return f;
}

}  // namespace detail

/// Surface of a binary mask by marching tetrahedra on a Kuhn (six tetrahedra
/// per cube) subdivision. Inside/outside comes from the mask itself, so the
/// result is always a closed, outward-oriented 2-manifold; the mask is padded
/// by one empty layer. Along each crossing edge the vertex sits where a lightly
/// smoothed indicator passes 0.5, which removes most of the staircase.
inline SurfaceMesh extract_surface(const Mask& m) {
  if (m.empty()) throw Error(ErrorCode::EmptyMask, "cannot extract a surface from an empty mask");
  const Grid& g = m.grid();
  const std::int64_t px = g.nx() + 2, py = g.ny() + 2, pz = g.nz() + 2;
  const std::vector<float> field = detail::smoothed_indicator(m);
  auto point_id = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    return static_cast<std::uint64_t>(i + px * (j + py * k));
  };
  auto inside = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    --i, --j, --k;  // padded -> mask coordinates
    return g.contains(i, j, k) && m.at(i, j, k);
  };

  // Cube corner c has offset (c&1, c>>1&1, c>>2&1). Kuhn tetrahedra all share corners 0 and 7.
  static constexpr std::array<std::array<int, 4>, 6> kTets = {{
      {0, 1, 3, 7}, {0, 1, 5, 7}, {0, 2, 3, 7}, {0, 2, 6, 7}, {0, 4, 5, 7}, {0, 4, 6, 7},
  }};

  SurfaceMesh mesh;
  std::unordered_map<std::uint64_t, std::uint32_t> edge_vertex;
  edge_vertex.reserve(m.count() * 8);

  // Edges join a lattice point to one with larger coordinates, so (lower id,
  // id difference) identifies an edge; the difference takes 7 values.
  const std::array<std::uint64_t, 7> offsets{1,
                                             static_cast<std::uint64_t>(px),
                                             static_cast<std::uint64_t>(px + 1),
                                             static_cast<std::uint64_t>(px * py),
                                             static_cast<std::uint64_t>(px * py + 1),
                                             static_cast<std::uint64_t>(px * py + px),
                                             static_cast<std::uint64_t>(px * py + px + 1)};
  auto vertex_on_edge = [&](std::uint64_t in_id, std::uint64_t out_id, const Vec3& p_in, const Vec3& p_out) {
    const std::uint64_t lo = std::min(in_id, out_id), diff = std::max(in_id, out_id) - lo;
    const auto code = static_cast<std::uint64_t>(std::find(offsets.begin(), offsets.end(), diff) - offsets.begin());
    auto [it, inserted] = edge_vertex.try_emplace(lo * 8 + code, static_cast<std::uint32_t>(mesh.vertices.size()));
    if (inserted) {
      const double f_in = std::max(0.5, static_cast<double>(field[in_id]));
      const double f_out = std::min(0.5, static_cast<double>(field[out_id]));
      const double t = f_in > f_out ? std::clamp((f_in - 0.5) / (f_in - f_out), 0.05, 0.95) : 0.5;
      const Vec3 c = p_in + t * (p_out - p_in) - Vec3::Ones();
      mesh.vertices.push_back(g.continuous_to_world(c));
    }
    return it->second;
  };

  auto emit = [&](std::uint32_t a, std::uint32_t b, std::uint32_t c, const Vec3& in_pt, const Vec3& out_pt) {
    const Vec3 n = (mesh.vertices[b] - mesh.vertices[a]).cross(mesh.vertices[c] - mesh.vertices[a]);
    const Vec3 outward = g.continuous_to_world(out_pt) - g.continuous_to_world(in_pt);
    if (n.dot(outward) >= 0.0) mesh.triangles.push_back({a, b, c});
    else mesh.triangles.push_back({a, c, b});
  };

  std::array<bool, 8> corner_in{};
  std::array<Vec3, 8> corner_pos;
  std::array<std::uint64_t, 8> corner_id{};
  for (std::int64_t k = 0; k + 1 < pz; ++k)
    for (std::int64_t j = 0; j + 1 < py; ++j)
      for (std::int64_t i = 0; i + 1 < px; ++i) {
        int count = 0;
        for (int c = 0; c < 8; ++c) {
          corner_in[c] = inside(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
          count += corner_in[c];
        }
        if (count == 0 || count == 8) continue;
        for (int c = 0; c < 8; ++c) {
          const std::int64_t ci = i + (c & 1), cj = j + ((c >> 1) & 1), ck = k + ((c >> 2) & 1);
          corner_pos[c] = Vec3(static_cast<double>(ci), static_cast<double>(cj), static_cast<double>(ck));
          corner_id[c] = point_id(ci, cj, ck);
        }
        for (const auto& tet : kTets) {
          std::array<int, 4> ins{}, outs{};
          int ni = 0, no = 0;
          for (int c : tet) {
            if (corner_in[c]) ins[ni++] = c;
            else outs[no++] = c;
          }
          if (ni == 0 || no == 0) continue;
          auto ev = [&](int a, int b) { return vertex_on_edge(corner_id[a], corner_id[b], corner_pos[a], corner_pos[b]); };
          const Vec3& pin = corner_pos[ins[0]];
          const Vec3& pout = corner_pos[outs[0]];
          if (ni == 1) {
            emit(ev(ins[0], outs[0]), ev(ins[0], outs[1]), ev(ins[0], outs[2]), pin, pout);
          } else if (no == 1) {
            emit(ev(ins[0], outs[0]), ev(ins[1], outs[0]), ev(ins[2], outs[0]), pin, pout);
          } else {
            // Quad (i0,o0) (i0,o1) (i1,o1) (i1,o0), split along one diagonal.
            const auto a = ev(ins[0], outs[0]), b = ev(ins[0], outs[1]), c = ev(ins[1], outs[1]),
                       d = ev(ins[1], outs[0]);
            emit(a, b, c, pin, pout);
            emit(a, c, d, pin, pout);
          }
        }
      }
  mesh.compute_normals();
  return mesh;
}

struct DetectedSphere {
  Point3 centroid;
  double equivalent_radius_mm = 0.0;
  std::size_t voxel_count = 0;
};

/// Connected components at or above `t_hu`, largest first (ties by scan order).
/// Centroids are intensity weighted; radius is that of a ball of equal volume.
inline std::vector<DetectedSphere> detect_spheres(const Volume& v, HU t_hu, std::size_t expected) {
  const Mask m = threshold(v, t_hu);
  const Components comps = label_components(m, Connectivity::Six);
  if (comps.count() < expected || comps.count() == 0) {
    throw Error(ErrorCode::TooFewComponents, "found " + std::to_string(comps.count()) + " components, expected " +
                                                 std::to_string(expected));
  }
  const Grid& g = v.grid();
  const std::size_t n = comps.count();
  std::vector<Vec3> weighted(n, Vec3::Zero());
  std::vector<double> weight(n, 0.0);
  for (std::size_t q = 0; q < comps.labels.size(); ++q) {
    const auto l = comps.labels[q];
    if (l == 0) continue;
    const auto idx = g.unlinear(q);
    const double w = std::max(1.0, static_cast<double>(v.voxels()[q]));
    weighted[l - 1] += w * Vec3(static_cast<double>(idx.i), static_cast<double>(idx.j), static_cast<double>(idx.k));
    weight[l - 1] += w;
  }
  std::vector<std::size_t> order(n);
  for (std::size_t l = 0; l < n; ++l) order[l] = l;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return comps.sizes[a] > comps.sizes[b]; });
  const double voxel_volume = g.spacing().prod();
  std::vector<DetectedSphere> out;
  out.reserve(n);
  for (auto l : order) {
    DetectedSphere s;
    s.centroid = g.continuous_to_world(weighted[l] / weight[l]);
    s.voxel_count = comps.sizes[l];
    s.equivalent_radius_mm =
        std::cbrt(3.0 * static_cast<double>(comps.sizes[l]) * voxel_volume / (4.0 * std::numbers::pi));
    out.push_back(s);
  }
  return out;
}

}  // namespace needleplan
