#include <gtest/gtest.h>

#include <random>

#include "needleplan/phantom.hpp"
#include "needleplan/service.hpp"
#include "test_support.hpp"

using namespace needleplan;
using namespace testsupport;

namespace {

const Point3 kTarget(10.0, 20.0, -5.0);

Json req(const std::string& op, Json body = Json::object()) {
  body["op"] = op;
  return body;
}

Json set_target_req(const Point3& p) { return req("set_target", {{"x", p.x()}, {"y", p.y()}, {"z", p.z()}}); }

class ServiceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new std::filesystem::path(scratch_dir("service"));
    save_volume(volume_path(), sphere_phantom({80.0, 4.0, 12.0}));
  }
  static void TearDownTestSuite() {
    std::filesystem::remove_all(*dir_);
    delete dir_;
  }
  static std::string volume_path() { return (*dir_ / "sphere.nrrd").string(); }

  /// Session advanced through volume, default scene and target.
  void prepare(PlanSession& s) {
    ASSERT_EQ(s.handle(req("set_volume", {{"path", volume_path()}}))["status"], "ok");
    ASSERT_EQ(s.handle(req("set_scene"))["status"], "ok");
    ASSERT_EQ(s.handle(set_target_req(kTarget))["status"], "ok");
  }

  ServiceConfig config_;
  VolumeCache cache_;
  static std::filesystem::path* dir_;
};
std::filesystem::path* ServiceTest::dir_ = nullptr;

}  // namespace

TEST(Base64, KnownVectorsAndRoundTrip) {
  EXPECT_EQ(base64_encode(""), "");
  EXPECT_EQ(base64_encode("f"), "Zg==");
  EXPECT_EQ(base64_encode("fo"), "Zm8=");
  EXPECT_EQ(base64_encode("foo"), "Zm9v");
  EXPECT_EQ(base64_encode("foobar"), "Zm9vYmFy");
  std::mt19937_64 rng(1);
  for (int n = 0; n < 40; ++n) {
    std::string bytes(static_cast<std::size_t>(n), '\0');
    for (auto& c : bytes) c = static_cast<char>(rng() & 0xFF);
    EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
  }
  EXPECT_THROW(base64_decode("abc"), Error);
  EXPECT_THROW(base64_decode("a=bc"), Error);
}

TEST_F(ServiceTest, SetVolumeEchoesGeometry) {
  PlanSession s(config_, cache_);
  const Json r = s.handle(req("set_volume", {{"path", volume_path()}}));
  ASSERT_EQ(r["status"], "ok") << r.dump();
  const Json info = s.handle(req("info"));
  EXPECT_EQ(info["dims"], r["dims"]);
  EXPECT_EQ(info["dims"][0], 47);
  EXPECT_EQ(info["spacing"], Json::array({4.0, 4.0, 4.0}));
}

TEST_F(ServiceTest, VolumesAreSharedByContent) {
  PlanSession a(config_, cache_), b(config_, cache_);
  const auto copy = (*dir_ / "copy.nrrd").string();
  std::filesystem::copy_file(volume_path(), copy, std::filesystem::copy_options::overwrite_existing);
  const Json ra = a.handle(req("set_volume", {{"path", volume_path()}}));
  const Json rb = b.handle(req("set_volume", {{"path", copy}}));
  EXPECT_EQ(ra["volume_id"], rb["volume_id"]);
  EXPECT_EQ(cache_.size(), 1u);
}

TEST_F(ServiceTest, MalformedAndUnknownRequests) {
  PlanSession s(config_, cache_);
  const Json bad = Json::parse(s.handle_line("{not json"));
  EXPECT_EQ(bad["status"], "err");
  EXPECT_EQ(bad["code"], "BadRequest");
  EXPECT_EQ(s.handle(req("fly"))["code"], "BadRequest");
  EXPECT_EQ(s.handle(Json::array({1, 2}))["code"], "BadRequest");
  EXPECT_EQ(s.handle(req("set_volume"))["code"], "BadRequest");  // missing path
  EXPECT_EQ(s.handle(req("set_target", {{"x", 1}, {"y", 2}, {"z", 3}}))["code"], "NoVolume");
}

TEST_F(ServiceTest, PreconditionsReported) {
  PlanSession s(config_, cache_);
  ASSERT_EQ(s.handle(req("set_volume", {{"path", volume_path()}}))["status"], "ok");
  EXPECT_EQ(s.handle(req("check_reachability", {{"points", Json::array()}}))["code"], "NoTarget");
  EXPECT_EQ(s.handle(req("heatmap"))["code"], "NoTarget");
  EXPECT_EQ(s.handle(req("select"))["code"], "NoHeatMap");
  ASSERT_EQ(s.handle(set_target_req(kTarget))["status"], "ok");
  EXPECT_EQ(s.handle(req("check_reachability", {{"points", Json::array()}}))["code"], "NoScene");
  EXPECT_EQ(s.handle(set_target_req(Point3(0.0, 0.0, 200.0)))["code"], "TargetOutsideBody");
}

TEST_F(ServiceTest, EmptyReachabilityBatch) {
  PlanSession s(config_, cache_);
  prepare(s);
  const Json r = s.handle(req("check_reachability", {{"points", Json::array()}}));
  ASSERT_EQ(r["status"], "ok");
  EXPECT_TRUE(r["verdicts"].empty());
}

TEST_F(ServiceTest, ShardedReachabilityEqualsUnsharded) {
  PlanSession whole(config_, cache_), left(config_, cache_), right(config_, cache_);
  prepare(whole);
  prepare(left);
  prepare(right);
  const SurfaceMesh mesh = cache_.get(volume_path())->skin;
  Json all = Json::array(), first = Json::array(), second = Json::array();
  for (std::size_t i = 0; i < mesh.vertices.size(); i += mesh.vertices.size() / 60) {
    const Json p = vec_to_json(mesh.vertices[i]);
    all.push_back(p);
    (all.size() % 2 ? first : second).push_back(p);
  }
  const Json w = whole.handle(req("check_reachability", {{"points", all}}))["verdicts"];
  const Json a = left.handle(req("check_reachability", {{"points", first}}))["verdicts"];
  const Json b = right.handle(req("check_reachability", {{"points", second}}))["verdicts"];
  ASSERT_EQ(w.size(), all.size());
  std::size_t ia = 0, ib = 0, reachable = 0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const Json& merged = (k + 1) % 2 ? a[ia++] : b[ib++];
    EXPECT_EQ(w[k], merged) << k;
    reachable += w[k]["reachable"].get<bool>();
  }
  EXPECT_GT(reachable, 0u);
  EXPECT_LT(reachable, w.size());
}

TEST_F(ServiceTest, FullSequenceMatchesBatchPlan) {
  PlanSession s(config_, cache_);
  prepare(s);
  const Json hm = s.handle(req("heatmap"));
  ASSERT_EQ(hm["status"], "ok");
  const std::string ply = base64_decode(hm["ply_payload_base64"].get<std::string>());
  std::istringstream in(ply);
  EXPECT_EQ(parse_ply(in).mesh.vertices.size(), cache_.get(volume_path())->skin.vertices.size());
  const Json sel = s.handle(req("select"));
  ASSERT_EQ(sel["status"], "ok") << sel.dump();

  const PreparedVolume v = load_prepared_volume(volume_path());
  const CollisionScene scene = default_scene(v.collision_body);
  const PlanOutcome batch = plan_entry(v, &scene, kTarget, PlanParams{}, 3);
  ASSERT_TRUE(chosen_entry(batch).has_value());
  EXPECT_EQ(sel["entry"].get<std::size_t>(), *chosen_entry(batch));
  EXPECT_EQ(vec_from_json(sel["position"]), batch.heatmap.candidates[*chosen_entry(batch)].position);

  const Json approach = s.handle(req("execute"));
  ASSERT_EQ(approach["status"], "needs_confirm") << approach.dump();
  const Json done = s.handle(req("execute", {{"confirm_token", approach["token"]}}));
  ASSERT_EQ(done["status"], "ok") << done.dump();
  EXPECT_NEAR(done["record"]["report"]["dev3d"].get<double>(), 0.0, 1e-9);
  EXPECT_NEAR(done["record"]["report"]["devlat"].get<double>(), 0.0, 1e-9);
  EXPECT_EQ(s.history().size(), 1u);
}

TEST_F(ServiceTest, ExecuteRequiresConfirmation) {
  PlanSession s(config_, cache_);
  prepare(s);
  ASSERT_EQ(s.handle(req("heatmap"))["status"], "ok");
  ASSERT_EQ(s.handle(req("select"))["status"], "ok");
  EXPECT_EQ(s.handle(req("execute", {{"confirm_token", "guess"}}))["code"], "NotConfirmed");
  const Json approach = s.handle(req("execute"));
  ASSERT_EQ(approach["status"], "needs_confirm");
  EXPECT_EQ(s.handle(req("execute", {{"confirm_token", "wrong"}}))["code"], "NotConfirmed");
  EXPECT_TRUE(s.history().empty());
  ASSERT_EQ(s.handle(req("execute", {{"confirm_token", approach["token"]}}))["status"], "ok");
  // A token is good for one insertion only.
  EXPECT_EQ(s.handle(req("execute", {{"confirm_token", approach["token"]}}))["code"], "NotConfirmed");
  EXPECT_EQ(s.history().size(), 1u);
}

TEST_F(ServiceTest, SelectRefusesNonFeasibleVertex) {
  PlanSession s(config_, cache_);
  prepare(s);
  ASSERT_EQ(s.handle(req("heatmap"))["status"], "ok");
  ASSERT_EQ(s.handle(req("select"))["status"], "ok");
  const PreparedVolume& v = *cache_.get(volume_path());
  const CollisionScene scene = default_scene(v.collision_body);
  HeatMap hm = build_heatmap(v.ct, v.body, v.skin, kTarget, PlanParams{}, 1);
  grid_reachability(scene, hm, 1);
  std::size_t unreachable = hm.candidates.size();
  for (std::size_t i = 0; i < hm.candidates.size(); ++i)
    if (hm.candidates[i].classification == Classification::Unreachable) {
      unreachable = i;
      break;
    }
  ASSERT_LT(unreachable, hm.candidates.size());
  const Json before = s.describe();
  EXPECT_EQ(s.handle(req("select", {{"vertex", unreachable}}))["code"], "NotFeasible");
  EXPECT_EQ(s.describe(), before);
}

TEST_F(ServiceTest, FailedRequestsLeaveStateUnchanged) {
  PlanSession s(config_, cache_);
  prepare(s);
  ASSERT_EQ(s.handle(req("heatmap"))["status"], "ok");
  ASSERT_EQ(s.handle(req("select"))["status"], "ok");
  ASSERT_EQ(s.handle(req("execute"))["status"], "needs_confirm");
  const Json before = s.describe();
  const std::vector<Json> failing = {
      req("set_volume", {{"path", "/nonexistent.nrrd"}}),
      req("set_scene", {{"path", "/nonexistent.json"}}),
      set_target_req(Point3(500.0, 0.0, 0.0)),
      req("select", {{"vertex", 1u << 30}}),
      req("execute", {{"confirm_token", "nope"}}),
      req("evaluate", {{"target", {0, 0, 0}}, {"entry", {1, 1, 1}}, {"tip", {1, 1, 1}}}),
      req("check_reachability", {{"points", {{1, 2}}}}),
      req("bogus"),
  };
  for (const Json& f : failing) {
    const Json r = s.handle(f);
    EXPECT_EQ(r["status"], "err") << f.dump();
    EXPECT_EQ(s.describe(), before) << f.dump();
  }
}

TEST_F(ServiceTest, EvaluateMatchesPlacementReport) {
  PlanSession s(config_, cache_);
  const Point3 t(1, 2, 3), e(-40, 10, 5), tip(-2, 3, 2);
  const Json r = s.handle(req("evaluate", {{"target", vec_to_json(t)}, {"entry", vec_to_json(e)}, {"tip", vec_to_json(tip)}}));
  const PlacementReport rep = placement_report(t, e, tip);
  EXPECT_EQ(r["dev3d"].get<double>(), rep.deviation_3d_mm);
  EXPECT_EQ(r["devlat"].get<double>(), rep.deviation_lateral_mm);
}

TEST(SimulatedInsertion, LateralNoiseHasRayleighMean) {
  std::mt19937_64 rng(5);
  const double sigma = 2.0;
  const Point3 target(5.0, -3.0, 2.0), entry(60.0, 40.0, -10.0);
  double sum = 0.0;
  const int runs = 500;
  for (int i = 0; i < runs; ++i) {
    const SimulatedInsertion ins = simulate_insertion(entry, target, {sigma}, rng);
    const PlacementReport r = placement_report(target, ins.entry, ins.tip);
    EXPECT_LE(r.deviation_lateral_mm, r.deviation_3d_mm + 1e-12);
    sum += r.deviation_lateral_mm;
  }
  const double expected = sigma * std::sqrt(std::numbers::pi / 2.0);
  EXPECT_NEAR(sum / runs, expected, 0.2 * expected);
}

TEST(SimulatedInsertion, ZeroNoiseLandsOnTarget) {
  std::mt19937_64 rng(6);
  const Point3 target(1.0, 2.0, 3.0), entry(-50.0, 80.0, 3.0);
  const SimulatedInsertion ins = simulate_insertion(entry, target, {}, rng);
  const PlacementReport r = placement_report(target, ins.entry, ins.tip);
  EXPECT_LT(r.deviation_3d_mm, 1e-12);
  EXPECT_LT((ins.tip - target).norm() - 10.0, 1e-12);
}

TEST_F(ServiceTest, TcpSessionsAreIsolated) {
  PlanServer server(config_);
  server.start("127.0.0.1", 0);
  ASSERT_NE(server.port(), 0);
  PlanClient a("127.0.0.1", server.port()), b("127.0.0.1", server.port());
  const Json ra = a.request(req("set_volume", {{"path", volume_path()}}));
  ASSERT_EQ(ra["status"], "ok");
  EXPECT_EQ(a.request(req("info"))["dims"], ra["dims"]);
  const Json bad = Json::parse(a.request_line("{{{"));
  EXPECT_EQ(bad["code"], "BadRequest");
  EXPECT_EQ(a.request(set_target_req(kTarget))["status"], "ok");  // connection still usable
  EXPECT_EQ(b.request(req("heatmap"))["code"], "NoVolume");
  EXPECT_EQ(b.request(req("evaluate", {{"target", {0, 0, 20}}, {"entry", {0, 0, 0}}, {"tip", {0, 0, 10}}}))["dev3d"], 0.0);
  server.stop();
}

TEST_F(ServiceTest, BindFailureOnBusyPort) {
  PlanServer first(config_);
  first.start("127.0.0.1", 0);
  PlanServer second(config_);
  try {
    second.start("127.0.0.1", first.port());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BindFailure);
  }
  first.stop();
}

TEST_F(ServiceTest, PlansAppendToLog) {
  ServiceConfig cfg;
  cfg.log_path = (*dir_ / "plans.log").string();
  SessionLog log(cfg.log_path);
  PlanSession s(cfg, cache_, &log, 7);
  prepare(s);
  ASSERT_EQ(s.handle(req("heatmap"))["status"], "ok");
  ASSERT_EQ(s.handle(req("select"))["status"], "ok");
  for (int i = 0; i < 2; ++i) {
    const Json approach = s.handle(req("execute"));
    ASSERT_EQ(s.handle(req("execute", {{"confirm_token", approach["token"]}}))["status"], "ok");
  }
  std::ifstream in(cfg.log_path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const Json j = Json::parse(line);
    EXPECT_EQ(j["session"], 7);
    ++lines;
  }
  EXPECT_EQ(lines, 2);
}
