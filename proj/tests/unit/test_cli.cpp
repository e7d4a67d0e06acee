#include <gtest/gtest.h>

#include "needleplan/cli.hpp"
#include "test_support.hpp"

using namespace needleplan;
using namespace testsupport;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "needleplan");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string source_path(const std::string& rel) { return std::string(NEEDLEPLAN_SOURCE_DIR) + "/" + rel; }

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"heatmap", "x.nrrd"}).code, 2);  // --target and -o missing
  EXPECT_EQ(run({"evaluate", "--target", "0,0,0"}).code, 2);
  EXPECT_EQ(run({"gen-phantom"}).code, 2);
  EXPECT_EQ(run({"plan", "a.nrrd", "--target", "1,2,3", "--bogus"}).code, 2);
}

TEST(Cli, HelpExitsZero) {
  const CliRun r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gen-phantom"), std::string::npos);
}

TEST(Cli, RuntimeErrorsExitOne) {
  const CliRun r = run({"volume-info", "/nonexistent/volume.nrrd"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("IoError"), std::string::npos);
  EXPECT_EQ(run({"evaluate", "--target", "0,0,0", "--entry", "1,1,1", "--tip", "1,1,1"}).code, 1);
  EXPECT_EQ(run({"evaluate", "--target", "0,0", "--entry", "1,1,1", "--tip", "1,1,2"}).code, 1);
}

TEST(Cli, EvaluateMatchesLibrary) {
  const CliRun r = run({"evaluate", "--target", "3,4,20", "--entry", "0,0,0", "--tip", "1,0,12"});
  ASSERT_EQ(r.code, 0) << r.err;
  const Json j = Json::parse(r.out);
  const PlacementReport rep = placement_report(Point3(3, 4, 20), Point3(0, 0, 0), Point3(1, 0, 12));
  EXPECT_EQ(j["dev3d"].get<double>(), rep.deviation_3d_mm);
  EXPECT_EQ(j["devlat"].get<double>(), rep.deviation_lateral_mm);
}

TEST(Cli, SpherePipelineIsDeterministic) {
  const auto dir = scratch_dir("cli_sphere");
  const std::string vol = (dir / "sphere.nrrd").string();
  ASSERT_EQ(run({"gen-phantom", "sphere", "--radius", "100", "-o", vol}).code, 0);
  const CliRun info = run({"volume-info", vol});
  ASSERT_EQ(info.code, 0);
  EXPECT_EQ(Json::parse(info.out)["dims"], Json::array({121, 121, 121}));

  const CliRun hm = run({"heatmap", vol, "--target", "20,30,5", "-o", (dir / "hm.ply").string()});
  ASSERT_EQ(hm.code, 0) << hm.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "hm.ply.json"));

  const CliRun a = run({"plan", vol, "--target", "20,30,5", "--execute", "--noise-lateral", "2", "--seed", "9"});
  const CliRun b = run({"plan", vol, "--target", "20,30,5", "--execute", "--noise-lateral", "2", "--seed", "9",
                     "--workers", "3"});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  const Json j = Json::parse(a.out);
  ASSERT_FALSE(j["entry_index"].is_null());
  const CliRun c = run({"plan", vol, "--target", "20,30,5", "--execute", "--noise-lateral", "2", "--seed", "10"});
  EXPECT_EQ(Json::parse(c.out)["entry_index"], j["entry_index"]);
  EXPECT_NE(Json::parse(c.out)["record"]["executed_tip"], j["record"]["executed_tip"]);
  std::filesystem::remove_all(dir);
}

TEST(Cli, SegmentSceneAndReachAgreeWithPlan) {
  const auto dir = scratch_dir("cli_reach");
  const std::string vol = (dir / "s.nrrd").string();
  ASSERT_EQ(run({"gen-phantom", "sphere", "--radius", "80", "--spacing", "4", "-o", vol}).code, 0);
  const std::string scene = (dir / "scene.json").string();
  ASSERT_EQ(run({"segment", vol, "-o", (dir / "skin.ply").string(), "--scene", scene}).code, 0);
  const std::string hm = (dir / "hm.ply").string();
  ASSERT_EQ(run({"heatmap", vol, "--target", "0,10,0", "-o", hm}).code, 0);
  const CliRun r = run({"reach", scene, "--heatmap", hm, "--target", "0,10,0"});
  ASSERT_EQ(r.code, 0) << r.err;
  const CliRun p = run({"plan", vol, "--target", "0,10,0", "--scene", scene});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_EQ(Json::parse(r.out)["optimal"], Json::parse(p.out)["entry_index"]);
  EXPECT_EQ(run({"reach", scene, "--heatmap", hm, "--target", "0,11,0"}).code, 1);
  std::filesystem::remove_all(dir);
}

TEST(Cli, PhantomRegistrationAndCalibration) {
  const auto dir = scratch_dir("cli_reg");
  const std::string vol = (dir / "balls.nrrd").string(), truth = (dir / "truth.json").string();
  ASSERT_EQ(run({"gen-phantom", "balls", "--seed", "4", "-o", vol, "--truth", truth}).code, 0);
  const CliRun r = run({"register", "phantom", vol, source_path("examples/config/phantom.json"), "-o",
                     (dir / "fit.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const PoseError e = pose_error(read_transform((dir / "fit.json").string()), read_transform(truth));
  EXPECT_LT(e.translation_mm, 0.3);
  EXPECT_LT(e.rotation_deg, 0.2);

  const std::string samples = (dir / "samples.json").string();
  ASSERT_EQ(run({"gen-phantom", "calibration", "--seed", "2", "-o", samples}).code, 0);
  const CliRun c = run({"calibrate", "hand-eye", samples});
  ASSERT_EQ(c.code, 0) << c.err;
  const RigidTransform z = transform_from_json(Json::parse(c.out)["base_from_cam"]["matrix"]);
  EXPECT_LT(pose_error(z, reference_calibration_truth().base_from_cam).translation_mm, 1e-6);
  std::filesystem::remove_all(dir);
}

TEST(Cli, ShippedConfigsMatchLibraryDefaults) {
  const ArmModel file = read_arm(source_path("examples/config/reference_arm.json"));
  const ArmModel ref = reference_arm();
  ASSERT_EQ(file.links.size(), ref.links.size());
  for (int k = 0; k < 20; ++k) {
    JointConfig q = JointConfig::Constant(0.05 * k);
    EXPECT_LT((fk(file, q).matrix() - fk(ref, q).matrix()).cwiseAbs().maxCoeff(), 1e-9);
  }
  for (std::size_t i = 0; i < kJoints; ++i) {
    EXPECT_NEAR(file.joints[i].min, ref.joints[i].min, 1e-12);
    EXPECT_NEAR(file.joints[i].max, ref.joints[i].max, 1e-12);
  }
  const PhantomModel ph = phantom_from_json(read_json_file(source_path("examples/config/phantom.json")));
  EXPECT_EQ(ph.balls.size(), reference_phantom().balls.size());
  const PlanParams p = params_from_json(read_json_file(source_path("examples/config/plan_params.json")));
  EXPECT_EQ(params_to_json(p), params_to_json(PlanParams{}));
}
