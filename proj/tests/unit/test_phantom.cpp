#include <gtest/gtest.h>

#include <algorithm>

#include "needleplan/phantom.hpp"
#include "needleplan/planner.hpp"
#include "needleplan/segmentation.hpp"

using namespace needleplan;

TEST(SpherePhantom, DefaultGeometry) {
  const Volume v = sphere_phantom();
  EXPECT_EQ(v.grid().dims(), (std::array<std::int64_t, 3>{121, 121, 121}));
  EXPECT_EQ(v.grid().spacing(), Vec3::Constant(2.0));
  EXPECT_LT(v.grid().index_to_world({60, 60, 60}).norm(), 1e-12);
  EXPECT_EQ(v.at({60, 60, 60}), kSoftTissueHU);
  EXPECT_EQ(v.at({0, 0, 0}), kAirHU);
  EXPECT_EQ(v.at({60 + 50, 60, 60}), kSoftTissueHU);  // 100 mm, on the surface
  EXPECT_EQ(v.at({60 + 51, 60, 60}), kAirHU);
  EXPECT_THROW(sphere_phantom({-1.0, 2.0, 20.0}), Error);
}

TEST(TorsoPhantom, StructuresWhereExpected) {
  const TorsoGeometry t;
  EXPECT_EQ(torso_hu(t, t.shell_center), kSoftTissueHU);
  EXPECT_EQ(torso_hu(t, t.shell_center + Vec3(0.0, -31.0, 0.0)), kBoneHU);
  EXPECT_EQ(torso_hu(t, t.shell_center + Vec3(31.0, 0.0, 0.0)), kBoneHU);
  EXPECT_EQ(torso_hu(t, t.shell_center + Vec3(0.0, 31.0, 0.0)), kSoftTissueHU);  // aperture
  EXPECT_EQ(torso_hu(t, t.lung_centers[0]), kLungHU);
  EXPECT_EQ(torso_hu(t, t.arm_axis_point), kSoftTissueHU);
  EXPECT_EQ(torso_hu(t, Point3(-120.0, -10.0, 0.0)), kAirHU);  // gap between torso and arm
  EXPECT_EQ(torso_hu(t, Point3(0.0, 120.0, 0.0)), kAirHU);
}

TEST(TorsoPhantom, BodyMaskKeepsTorsoOnly) {
  const Volume v = torso_phantom();
  EXPECT_EQ(v.grid().dims()[0], 128);
  const Mask body = body_mask(v);
  EXPECT_TRUE(strictly_inside(body, torso_default_target()));
  EXPECT_TRUE(body.at(body.grid().nearest_voxel(TorsoGeometry{}.lung_centers[1])));
  EXPECT_FALSE(body.at_or_false(body.grid().nearest_voxel(TorsoGeometry{}.arm_axis_point)));
}

TEST(TorsoPhantom, DeterministicAcrossWorkerCounts) {
  TorsoOptions o;
  o.dims = 48;
  const Grid g = centred_grid(o.dims, o.extent_mm / static_cast<double>(o.dims));
  const auto a = paint_volume(g, [&](const Point3& p) { return torso_hu(o.geometry, p); }, 1);
  const auto b = paint_volume(g, [&](const Point3& p) { return torso_hu(o.geometry, p); }, 5);
  const Volume c = torso_phantom(o);
  EXPECT_TRUE(std::ranges::equal(a.voxels(), b.voxels()));
  EXPECT_TRUE(std::ranges::equal(c.voxels(), a.voxels()));
}

TEST(BallPhantom, SingleBallCentroid) {
  PhantomModel one;
  one.balls.push_back({Point3(0.3, -0.2, 0.45), RadiusClass::Large});
  BallScanOptions o;
  o.spacing_mm = 1.0;
  const Volume v = ball_phantom_volume(one, RigidTransform::from_translation(Vec3(10.0, 20.0, 30.0)), o);
  const auto s = detect_spheres(v, kBallThresholdHU, 1);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_LT((s[0].centroid - Point3(10.3, 19.8, 30.45)).norm(), 0.25 * o.spacing_mm);
}
