#include <gtest/gtest.h>

#include <deque>
#include <numbers>

#include "needleplan/segmentation.hpp"
#include "test_support.hpp"

using namespace needleplan;
using testsupport::cube_grid;

namespace {

constexpr double kPi = std::numbers::pi;

template <class Inside>
Volume paint(const Grid& g, Inside inside_hu) {
  std::vector<HU> vox(g.voxel_count());
  for (std::size_t n = 0; n < vox.size(); ++n) vox[n] = inside_hu(g.index_to_world(g.unlinear(n)));
  return {g, std::move(vox)};
}

// Exterior air by 26-connected flood fill from a lattice corner.
Mask exterior_flood_fill(const Mask& solid) {
  const Grid& g = solid.grid();
  Mask seen(g);
  std::deque<VoxelIndex> q{{0, 0, 0}};
  seen.set({0, 0, 0}, true);
  while (!q.empty()) {
    const auto v = q.front();
    q.pop_front();
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const VoxelIndex n{v.i + dx, v.j + dy, v.k + dz};
          if (!g.contains(n) || seen.at(n) || solid.at(n)) continue;
          seen.set(n, true);
          q.push_back(n);
        }
  }
  return seen;
}

Mask ball_mask(const Grid& g, const Point3& c, double r) {
  Mask m(g);
  for (std::size_t n = 0; n < m.size(); ++n) m.set(n, (g.index_to_world(g.unlinear(n)) - c).norm() <= r);
  return m;
}

}  // namespace

TEST(Segmentation, SolidSphereBodyMaskIsTheSphere) {
  const Grid g = cube_grid(41, 1.0, Point3::Constant(-20));
  const Volume v = paint(g, [](const Point3& p) -> HU { return p.norm() <= 14.0 ? 0 : -1000; });
  EXPECT_EQ(body_mask(v, -300), threshold(v, -300));
}

TEST(Segmentation, InternalCavityEndsUpInsideMask) {
  const Grid g = cube_grid(41, 1.0, Point3::Constant(-20));
  const Volume v = paint(g, [](const Point3& p) -> HU {
    if (p.norm() <= 6.0) return -1000;
    return p.norm() <= 15.0 ? 20 : -1000;
  });
  const Mask body = body_mask(v, -300);
  EXPECT_TRUE(body.at(20, 20, 20));
  const Mask oracle = invert(exterior_flood_fill(threshold(v, -300)));
  EXPECT_EQ(body, oracle);
}

TEST(Segmentation, NostrilChannelIsSealedByClosing) {
  // 4 mm wide channel from the surface into an internal cavity.
  const Grid g = cube_grid(61, 1.0, Point3::Constant(-30));
  const Volume v = paint(g, [](const Point3& p) -> HU {
    if (p.norm() <= 8.0) return -1000;
    const bool channel = p.x() >= 0.0 && std::abs(p.y()) < 2.0 && std::abs(p.z()) < 2.0;
    if (channel) return -1000;
    return p.norm() <= 22.0 ? 20 : -1000;
  });
  const Mask body = body_mask(v, -300, 5.0);
  EXPECT_TRUE(body.at(30, 30, 30));  // cavity centre
  EXPECT_TRUE(body.at(30 + 15, 30, 30));  // inside the channel
  // Oracle: closed tissue, then exterior flood fill.
  const Mask closed = morph_close(threshold(v, -300), 5.0);
  EXPECT_EQ(body, invert(exterior_flood_fill(closed)));
}

TEST(SegmentationProperty, BodyMaskIsOneComponentWithoutExteriorReachableVoxels) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 4; ++trial) {
    const Grid g = cube_grid(36, 1.0);
    std::vector<std::pair<Point3, double>> blobs;
    for (int b = 0; b < 6; ++b) blobs.push_back({testsupport::random_vec(rng, 8, 27), 3.0 + 3.0 * (b % 3)});
    const Volume v = paint(g, [&](const Point3& p) -> HU {
      for (const auto& [c, r] : blobs)
        if ((p - c).norm() <= r) return 40;
      return -1000;
    });
    const Mask body = body_mask(v, -300, 3.0);
    EXPECT_EQ(label_components(body, Connectivity::Six).count(), 1u);
    const Mask largest = largest_component(threshold(v, -300));
    const Mask closed = morph_close(largest, 3.0);
    EXPECT_EQ(body, invert(exterior_flood_fill(closed)));
  }
}

TEST(Segmentation, SingleVoxelSurfaceIsClosedSphereTopology) {
  const Grid g = cube_grid(3);
  Mask m(g);
  m.set({1, 1, 1}, true);
  const SurfaceMesh mesh = extract_surface(m);
  EXPECT_TRUE(mesh.is_closed_oriented());
  EXPECT_EQ(mesh.euler_characteristic(), 2);
  EXPECT_GT(mesh.enclosed_volume(), 0.0);
}

TEST(Segmentation, VoxelizedSphereAreaAndVolume) {
  const double r = 20.0;
  const Grid g = cube_grid(51, 1.0, Point3::Constant(-25));
  const SurfaceMesh mesh = extract_surface(ball_mask(g, Point3::Zero(), r));
  EXPECT_TRUE(mesh.is_closed_oriented());
  EXPECT_EQ(mesh.euler_characteristic(), 2);
  const double area = 4.0 * kPi * r * r, volume = 4.0 / 3.0 * kPi * r * r * r;
  EXPECT_LT(std::abs(mesh.area() - area) / area, 0.05) << mesh.area() << " vs " << area;
  EXPECT_LT(std::abs(mesh.enclosed_volume() - volume) / volume, 0.03) << mesh.enclosed_volume() << " vs " << volume;
  for (const auto& n : mesh.normals) EXPECT_NEAR(n.norm(), 1.0, 1e-9);
}

TEST(Segmentation, TwoCubesGiveTwoShells) {
  const Grid g = cube_grid(12);
  Mask m(g);
  for (int k = 1; k < 4; ++k)
    for (int j = 1; j < 4; ++j)
      for (int i = 1; i < 4; ++i) {
        m.set({i, j, k}, true);
        m.set({i + 6, j + 6, k + 6}, true);
      }
  const SurfaceMesh mesh = extract_surface(m);
  EXPECT_TRUE(mesh.is_closed_oriented());
  EXPECT_EQ(mesh.euler_characteristic(), 4);
}

TEST(Segmentation, SurfaceOfEmptyMaskThrows) {
  try {
    extract_surface(Mask(cube_grid(4)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyMask);
  }
}

TEST(SegmentationProperty, RandomMasksYieldClosedOrientedManifolds) {
  std::mt19937_64 rng(32);
  std::bernoulli_distribution b(0.45);
  for (int trial = 0; trial < 20; ++trial) {
    const Grid g({7, 6, 5}, {1.0, 0.7, 1.9}, {3, -2, 1}, testsupport::random_rotation(rng));
    Mask m(g);
    for (std::size_t n = 0; n < m.size(); ++n) m.set(n, b(rng));
    if (m.empty()) continue;
    const SurfaceMesh mesh = extract_surface(m);
    EXPECT_TRUE(mesh.is_closed_oriented()) << trial;
    EXPECT_GT(mesh.enclosed_volume(), 0.0);
    // Every vertex lies strictly between voxel centres of the padded lattice.
    for (const auto& p : mesh.vertices) {
      const Vec3 c = g.world_to_continuous_index(p);
      EXPECT_TRUE((c.array() > -1.0).all() && (c.array() < Vec3(7, 6, 5).array()).all());
    }
  }
}

TEST(Segmentation, SurfaceOrientationPointsOutward) {
  const Grid g = cube_grid(31, 1.0, Point3::Constant(-15));
  const SurfaceMesh mesh = extract_surface(ball_mask(g, Point3::Zero(), 10.0));
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i)
    EXPECT_GT(mesh.normals[i].dot(mesh.vertices[i].normalized()), 0.5);
}

TEST(Segmentation, DetectSingleBallCentroid) {
  const Grid g = cube_grid(32, 0.8);
  const Point3 centre(12.37, 13.91, 11.05);
  // Supersampled partial-volume ball at 3000 HU.
  std::vector<HU> vox(g.voxel_count(), 0);
  for (std::size_t n = 0; n < vox.size(); ++n) {
    const Point3 p = g.index_to_world(g.unlinear(n));
    if ((p - centre).norm() > 5.0 + 0.8) continue;
    int inside = 0;
    for (int s = 0; s < 64; ++s) {
      const Vec3 o((s % 4 + 0.5) / 4 - 0.5, ((s / 4) % 4 + 0.5) / 4 - 0.5, (s / 16 + 0.5) / 4 - 0.5);
      inside += (p + 0.8 * o - centre).norm() <= 5.0;
    }
    vox[n] = static_cast<HU>(3000 * inside / 64);
  }
  const Volume v(g, vox);
  const auto found = detect_spheres(v, 1000, 1);
  ASSERT_EQ(found.size(), 1u);
  EXPECT_LT((found[0].centroid - centre).norm(), 0.25 * 0.8);
  EXPECT_NEAR(found[0].equivalent_radius_mm, 5.0, 0.8);
}

TEST(Segmentation, DetectSpheresSortedBySize) {
  const Grid g = cube_grid(30, 1.0);
  const Volume v = paint(g, [](const Point3& p) -> HU {
    if ((p - Point3(6, 6, 6)).norm() <= 2.0) return 3000;
    if ((p - Point3(20, 20, 20)).norm() <= 5.0) return 3000;
    return 0;
  });
  const auto found = detect_spheres(v, 1000, 2);
  ASSERT_EQ(found.size(), 2u);
  EXPECT_GT(found[0].equivalent_radius_mm, 3.5);
  EXPECT_LT(found[1].equivalent_radius_mm, 3.5);
  EXPECT_LT((found[0].centroid - Point3(20, 20, 20)).norm(), 1e-9);
}

TEST(Segmentation, DetectSpheresTooFew) {
  const Volume v = testsupport::filled_volume(cube_grid(8), 0);
  try {
    detect_spheres(v, 1000, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewComponents);
  }
}

TEST(Mesh, PlyRoundTripPreservesEverything) {
  SurfaceMesh mesh = make_icosphere({1, 2, 3}, 7.5, 2);
  std::vector<double> q(mesh.vertices.size());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = 0.1 * static_cast<double>(i) / 3.0;
  std::istringstream in(ply_to_string(mesh, &q));
  const PlyData back = parse_ply(in);
  ASSERT_EQ(back.mesh.vertices.size(), mesh.vertices.size());
  EXPECT_EQ(back.mesh.triangles, mesh.triangles);
  for (std::size_t i = 0; i < q.size(); ++i) {
    EXPECT_EQ(back.mesh.vertices[i], mesh.vertices[i]);
    EXPECT_EQ(back.mesh.normals[i], mesh.normals[i]);
    EXPECT_EQ((*back.quality)[i], q[i]);
  }
}

TEST(Mesh, IcosphereIsClosedAndOutward) {
  const SurfaceMesh s = make_icosphere({0, 0, 0}, 10.0, 3);
  EXPECT_TRUE(s.is_closed_oriented());
  EXPECT_EQ(s.euler_characteristic(), 2);
  EXPECT_GT(s.enclosed_volume(), 0.0);
}
