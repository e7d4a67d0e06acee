#include <gtest/gtest.h>

#include <sstream>

#include "needleplan/volume.hpp"
#include "test_support.hpp"

using namespace needleplan;
using testsupport::cube_grid;

namespace {

Volume random_volume(std::mt19937_64& rng, std::array<std::int64_t, 3> dims, const Grid* like = nullptr) {
  const Grid g = like ? *like
                      : Grid(dims, {0.7, 0.9, 1.3}, {10.5, -20.25, 3.0},
                             testsupport::random_rotation(rng));
  std::uniform_int_distribution<int> u(-32768, 32767);
  std::vector<HU> v(g.voxel_count());
  for (auto& x : v) x = static_cast<HU>(u(rng));
  return {g, std::move(v)};
}

// Naive eight-corner weighting oracle written directly from the definition.
double naive_trilinear(const Volume& v, const Vec3& c) {
  const auto& d = v.grid().dims();
  double acc = 0.0;
  for (std::int64_t k = 0; k < d[2]; ++k)
    for (std::int64_t j = 0; j < d[1]; ++j)
      for (std::int64_t i = 0; i < d[0]; ++i) {
        const double wx = std::max(0.0, 1.0 - std::abs(c.x() - i));
        const double wy = std::max(0.0, 1.0 - std::abs(c.y() - j));
        const double wz = std::max(0.0, 1.0 - std::abs(c.z() - k));
        acc += wx * wy * wz * v.at(i, j, k);
      }
  return acc;
}

std::string header(const std::string& sizes, const std::string& extra = "") {
  return "NRRD0004\ntype: short\ndimension: 3\nsizes: " + sizes +
         "\nspace directions: (1,0,0) (0,1,0) (0,0,1)\nspace origin: (0,0,0)\nendian: little\nencoding: raw\n" +
         extra + "\n";
}

ErrorCode parse_error(const std::string& text) {
  std::istringstream in(text);
  try {
    parse_nrrd(in);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST(Volume, LoadsTinyAirVolume) {
  std::string text = header("2 2 2");
  std::vector<HU> vox(8, -1000);
  text.append(reinterpret_cast<const char*>(vox.data()), vox.size() * 2);
  std::istringstream in(text);
  const Volume v = parse_nrrd(in);
  EXPECT_EQ(v.grid().voxel_count(), 8u);
  for (auto x : v.voxels()) EXPECT_EQ(x, -1000);
  EXPECT_EQ(v.grid().spacing(), Vec3(1, 1, 1));
}

TEST(Volume, SaveLoadRoundTripIsBitExact) {
  std::mt19937_64 rng(11);
  const Volume v = random_volume(rng, {32, 32, 32});
  const auto dir = testsupport::scratch_dir("volume");
  const auto path = (dir / "v.nrrd").string();
  save_volume(path, v);
  const Volume back = load_volume(path);
  EXPECT_TRUE(std::equal(v.voxels().begin(), v.voxels().end(), back.voxels().begin(), back.voxels().end()));
  EXPECT_EQ(back.grid().dims(), v.grid().dims());
  EXPECT_EQ(back.grid().origin(), v.grid().origin());
  EXPECT_LT((back.grid().spacing() - v.grid().spacing()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((back.grid().direction() - v.grid().direction()).cwiseAbs().maxCoeff(), 1e-15);
  std::filesystem::remove_all(dir);
}

TEST(Volume, WrongVoxelCountIsDimensionMismatch) {
  std::string text = header("3 3 3");
  std::vector<HU> vox(7, 0);
  text.append(reinterpret_cast<const char*>(vox.data()), vox.size() * 2);
  EXPECT_EQ(parse_error(text), ErrorCode::DimensionMismatch);
}

TEST(Volume, HeaderValidation) {
  EXPECT_EQ(parse_error("NRRD0005\n"), ErrorCode::MalformedHeader);
  EXPECT_EQ(parse_error(header("2 2 2", "kinds: domain domain domain\n")), ErrorCode::MalformedHeader);
  std::string gz = header("2 2 2");
  gz.replace(gz.find("encoding: raw"), 13, "encoding: gzip");
  EXPECT_EQ(parse_error(gz), ErrorCode::UnsupportedEncoding);
  std::string big = header("2 2 2");
  big.replace(big.find("endian: little"), 14, "endian: big");
  EXPECT_EQ(parse_error(big), ErrorCode::UnsupportedEncoding);
  std::string flt = header("2 2 2");
  flt.replace(flt.find("type: short"), 11, "type: float");
  EXPECT_EQ(parse_error(flt), ErrorCode::UnsupportedEncoding);
  std::string missing = header("2 2 2");
  missing.erase(missing.find("space origin"), std::string("space origin: (0,0,0)\n").size());
  EXPECT_EQ(parse_error(missing), ErrorCode::MalformedHeader);
}

TEST(Volume, IndexToWorldBasics) {
  const Grid g({4, 4, 4}, {1, 1, 1}, {10, 20, 30}, Mat3::Identity());
  const Volume v(g, std::vector<HU>(64, 0));
  EXPECT_EQ(index_to_world(v, {0, 0, 0}), Point3(10, 20, 30));
  const Grid g2({4, 4, 4}, {2, 2, 2}, {10, 20, 30}, Mat3::Identity());
  EXPECT_EQ(g2.index_to_world({1, 1, 1}), Point3(12, 22, 32));
}

TEST(VolumeProperty, WorldIndexRoundTrip) {
  std::mt19937_64 rng(12);
  const Grid g({40, 50, 60}, {0.7, 0.9, 1.3}, {10.5, -20.25, 3.0}, testsupport::random_rotation(rng));
  for (int n = 0; n < 50; ++n) {
    const Point3 p = testsupport::random_vec(rng, -100, 100);
    EXPECT_LT((g.continuous_to_world(g.world_to_continuous_index(p)) - p).norm(), 1e-9);
  }
  for (std::int64_t k = 0; k < 60; k += 7)
    for (std::int64_t j = 0; j < 50; j += 7)
      for (std::int64_t i = 0; i < 40; i += 7) {
        const Vec3 c = g.world_to_continuous_index(g.index_to_world({i, j, k}));
        EXPECT_LT((c - Vec3(i, j, k)).norm(), 1e-9);
      }
}

TEST(Volume, TrilinearAtCentresAndMidpoints) {
  const Grid g = cube_grid(3);
  std::vector<HU> vox(27, 0);
  vox[g.linear(1, 1, 1)] = 100;
  const Volume v(g, vox);
  EXPECT_EQ(sample_trilinear(v, {1, 1, 1}), 100.0);
  EXPECT_EQ(sample_trilinear(v, {0.5, 1, 1}), 50.0);
  EXPECT_THROW(sample_trilinear(v, {-0.1, 1, 1}), Error);
  EXPECT_THROW(sample_trilinear(v, {1, 1, 2.5}), Error);
}

TEST(Volume, TrilinearMatchesNaiveWeighting) {
  std::mt19937_64 rng(13);
  const Volume v = random_volume(rng, {6, 7, 8});
  std::uniform_real_distribution<double> ux(0, 5), uy(0, 6), uz(0, 7);
  for (int n = 0; n < 200; ++n) {
    const Vec3 c(ux(rng), uy(rng), uz(rng));
    const Point3 p = v.grid().continuous_to_world(c);
    EXPECT_NEAR(sample_trilinear(v, p), naive_trilinear(v, c), 1e-9);
  }
}

TEST(Volume, DownsampleConstant) {
  const Grid g = cube_grid(16, 1.5);
  const Volume v = testsupport::filled_volume(g, 42);
  const Volume d = downsample_half(v);
  EXPECT_EQ(d.grid().dims(), (std::array<std::int64_t, 3>{8, 8, 8}));
  EXPECT_EQ(d.grid().spacing(), Vec3::Constant(3.0));
  for (auto x : d.voxels()) EXPECT_EQ(x, 42);
}

TEST(Volume, DownsampleRampPreserved) {
  const Grid g({20, 8, 8}, {1.0, 1.0, 1.0}, {0, 0, 0}, Mat3::Identity());
  std::vector<HU> vox(g.voxel_count());
  for (std::size_t n = 0; n < vox.size(); ++n) vox[n] = static_cast<HU>(10 * g.unlinear(n).i);
  const Volume v(g, vox);
  const Volume d = downsample_half(v);
  for (std::int64_t k = 1; k < d.grid().nz() - 1; ++k)
    for (std::int64_t j = 1; j < d.grid().ny() - 1; ++j)
      for (std::int64_t i = 1; i < d.grid().nx() - 1; ++i) {
        const double analytic = 10.0 * d.grid().index_to_world({i, j, k}).x();
        EXPECT_LE(std::abs(d.at(i, j, k) - analytic), 0.5);
      }
  // World extent preserved within one (output) voxel.
  const Point3 last_in = g.index_to_world({19, 7, 7});
  const Point3 last_out = d.grid().index_to_world({9, 3, 3});
  EXPECT_LE((last_in - last_out).cwiseAbs().maxCoeff(), d.grid().spacing().maxCoeff());
}

TEST(Volume, DownsampleTooSmall) {
  const Volume v = testsupport::filled_volume(cube_grid(3), 0);
  try {
    downsample_half(v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooSmall);
  }
}

TEST(VolumeProperty, DownsampleCommutesWithWorldQueriesOnSmoothFields) {
  const Grid g({32, 32, 32}, {1.0, 1.0, 1.0}, {-5, 3, 7}, Mat3::Identity());
  auto field = [](const Vec3& c) { return 400.0 * std::sin(0.11 * c.x()) * std::cos(0.07 * c.y()) + 3.0 * c.z(); };
  std::vector<HU> vox(g.voxel_count());
  for (std::size_t n = 0; n < vox.size(); ++n) {
    const auto idx = g.unlinear(n);
    vox[n] = static_cast<HU>(std::lround(field(Vec3(idx.i, idx.j, idx.k))));
  }
  const Volume v(g, vox);
  const Volume d = downsample_half(v);
  // Second-derivative bound of the field times the squared sample offset, plus rounding.
  const double curvature = 400.0 * (0.11 * 0.11 + 0.07 * 0.07);
  const double bound = curvature * 4.0 + 1.0;
  std::mt19937_64 rng(14);
  for (int n = 0; n < 200; ++n) {
    const Vec3 c = testsupport::random_vec(rng, 0.0, 14.0);
    const Point3 p = d.grid().continuous_to_world(c);
    EXPECT_LT(std::abs(sample_trilinear(d, p) - sample_trilinear(v, p)), bound);
  }
}

TEST(Volume, ConstructorValidation) {
  EXPECT_THROW(Volume(cube_grid(1), std::vector<HU>(1, 0)), Error);
  EXPECT_THROW(Volume(cube_grid(2), std::vector<HU>(7, 0)), Error);
}
