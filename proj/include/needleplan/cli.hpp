#pragma once

// needleplan command line. cli_main is the whole program; tools/needleplan.cpp
// only forwards argv. Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <random>

#include "needleplan/phantom.hpp"
#include "needleplan/pipeline.hpp"
#include "needleplan/registration.hpp"
#include "needleplan/service.hpp"

namespace needleplan {

namespace cli {

inline Json volume_info(const Volume& v, const std::string& id) {
  const Grid& g = v.grid();
  Json dir = Json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) dir.push_back(g.direction()(r, c));
  const auto vox = v.voxels();
  const auto [lo, hi] = std::minmax_element(vox.begin(), vox.end());
  return {{"dims", g.dims()},           {"spacing", vec_to_json(g.spacing())}, {"origin", vec_to_json(g.origin())},
          {"direction", dir},           {"min_hu", *lo},                        {"max_hu", *hi},
          {"volume_id", id}};
}

inline PlanParams load_params(const std::string& path) {
  return path.empty() ? PlanParams{} : params_from_json(read_json_file(path));
}

inline CollisionScene load_scene_or_default(const std::string& path, const PreparedVolume& v) {
  return path.empty() ? default_scene(v.collision_body) : read_scene(path);
}

/// Writes the default scene for `v` plus its collision body PLY next to `scene_path`.
inline void write_default_scene(const std::string& scene_path, const PreparedVolume& v, const std::string& arm_path) {
  const std::filesystem::path sp(scene_path);
  const std::string body_name = sp.stem().string() + "_body.ply";
  write_ply((sp.parent_path() / body_name).string(), v.collision_body);
  const ArmModel arm = arm_path.empty() ? reference_arm() : read_arm(arm_path);
  write_json_file(scene_path, scene_to_json(default_scene(v.collision_body, arm), body_name, arm_path));
}

}  // namespace cli

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"CT-guided needle insertion planning"};
  app.require_subcommand(1);
  app.fallthrough();
  unsigned workers = 0;
  app.add_option("--workers", workers, "worker threads (0 = all cores)");

  std::string vol_path, out_path, params_path, scene_path, arm_path, heatmap_path, target_text;
  double threshold = -300.0, closing = 5.0;

  auto* info = app.add_subcommand("volume-info", "print volume geometry and HU range");
  info->add_option("volume", vol_path, "NRRD volume")->required();

  auto* seg = app.add_subcommand("segment", "segment the skin surface");
  seg->add_option("volume", vol_path, "NRRD volume")->required();
  seg->add_option("-o,--output", out_path, "skin mesh PLY")->required();
  seg->add_option("--threshold", threshold, "skin threshold (HU)");
  seg->add_option("--closing", closing, "closing radius (mm)");
  seg->add_option("--scene", scene_path, "also write a default collision scene here");
  seg->add_option("--arm", arm_path, "arm file referenced by the scene");

  auto* heat = app.add_subcommand("heatmap", "compute the entry-point heat map");
  heat->add_option("volume", vol_path, "NRRD volume")->required();
  heat->add_option("--target", target_text, "target x,y,z (mm)")->required();
  heat->add_option("--params", params_path, "plan parameter file");
  heat->add_option("-o,--output", out_path, "heat map PLY (sidecar written to <output>.json)")->required();

  bool exhaustive = false;
  auto* reach = app.add_subcommand("reach", "apply reachability to a heat map");
  reach->add_option("scene", scene_path, "scene file")->required();
  reach->add_option("--heatmap", heatmap_path, "heat map PLY")->required();
  reach->add_option("--target", target_text, "target x,y,z (mm)")->required();
  reach->add_option("-o,--output", out_path, "updated heat map PLY");
  reach->add_flag("--exhaustive", exhaustive, "check every feasible vertex instead of grid cells");

  bool execute = false;
  double noise_lateral = 0.0;
  std::uint64_t seed = 0;
  auto* plan = app.add_subcommand("plan", "heat map, reachability and entry selection in one run");
  plan->add_option("volume", vol_path, "NRRD volume")->required();
  plan->add_option("--target", target_text, "target x,y,z (mm)")->required();
  plan->add_option("--scene", scene_path, "scene file (default: placement around the body)");
  plan->add_option("--params", params_path, "plan parameter file");
  plan->add_option("-o,--output", out_path, "heat map PLY after reachability");
  plan->add_flag("--execute", execute, "simulate the insertion and report placement");
  plan->add_option("--noise-lateral", noise_lateral, "lateral sigma of the simulated insertion (mm)");
  plan->add_option("--seed", seed, "random seed");

  std::string samples_path;
  auto* calib = app.add_subcommand("calibrate", "calibration");
  calib->require_subcommand(1);
  auto* hand_eye = calib->add_subcommand("hand-eye", "QR24 hand-eye calibration");
  hand_eye->add_option("samples", samples_path, "calibration sample file")->required();
  hand_eye->add_option("-o,--output", out_path, "result file");

  std::string phantom_path, bcam_path, camr_path, rsb_path, sbct_path;
  double ball_threshold = kBallThresholdHU;
  auto* reg = app.add_subcommand("register", "registration");
  reg->require_subcommand(1);
  auto* reg_ph = reg->add_subcommand("phantom", "fit the steel-ball phantom in a CT scan");
  reg_ph->add_option("volume", vol_path, "NRRD volume")->required();
  reg_ph->add_option("phantom", phantom_path, "phantom file")->required();
  reg_ph->add_option("--threshold", ball_threshold, "ball threshold (HU)");
  reg_ph->add_option("-o,--output", out_path, "ct_from_sb transform file");
  auto* reg_chain = reg->add_subcommand("chain", "compose base_from_ct");
  reg_chain->add_option("--base-from-cam", bcam_path)->required();
  reg_chain->add_option("--cam-from-ref", camr_path)->required();
  reg_chain->add_option("--ref-from-sb", rsb_path)->required();
  reg_chain->add_option("--ct-from-sb", sbct_path, "phantom fit result (inverted internally)")->required();
  reg_chain->add_option("-o,--output", out_path, "base_from_ct transform file");

  std::string entry_text, tip_text;
  auto* eval = app.add_subcommand("evaluate", "needle placement deviations");
  eval->add_option("--target", target_text)->required();
  eval->add_option("--entry", entry_text)->required();
  eval->add_option("--tip", tip_text)->required();

  std::string bind = "127.0.0.1", log_path;
  std::uint16_t port = kDefaultPort;
  auto* serve = app.add_subcommand("serve", "run the plan service");
  serve->add_option("--bind", bind, "IPv4 address");
  serve->add_option("--port", port, "TCP port");
  serve->add_option("--params", params_path, "plan parameter file");
  serve->add_option("--noise-lateral", noise_lateral, "lateral sigma of simulated insertions (mm)");
  serve->add_option("--seed", seed, "random seed");
  serve->add_option("--log", log_path, "append-only plan log");

  double radius = 100.0, spacing = 2.0, extent = 320.0, noise_mm = 0.0, noise_deg = 0.0;
  double ball_spacing = BallScanOptions{}.spacing_mm;
  std::int64_t dims = 128;
  std::size_t n_samples = 60;
  std::vector<std::size_t> omit;
  std::string truth_path, model_path;
  auto* gen = app.add_subcommand("gen-phantom", "synthetic test data");
  gen->require_subcommand(1);
  auto* gen_sphere = gen->add_subcommand("sphere", "homogeneous sphere");
  gen_sphere->add_option("--radius", radius, "mm");
  gen_sphere->add_option("--spacing", spacing, "mm");
  gen_sphere->add_option("-o,--output", out_path)->required();
  auto* gen_torso = gen->add_subcommand("torso", "torso with lungs, bone shell and detached arm");
  gen_torso->add_option("--dims", dims, "voxels per side");
  gen_torso->add_option("--extent", extent, "mm per side");
  gen_torso->add_option("-o,--output", out_path)->required();
  auto* gen_balls = gen->add_subcommand("balls", "steel-ball phantom scan at a random pose");
  gen_balls->add_option("--phantom", phantom_path, "phantom file (default: shipped layout)");
  gen_balls->add_option("--spacing", ball_spacing, "mm");
  gen_balls->add_option("--omit", omit, "ball indices left out of the scan");
  gen_balls->add_option("--seed", seed, "random seed");
  gen_balls->add_option("--truth", truth_path, "write the true ct_from_sb here");
  gen_balls->add_option("--model-out", model_path, "write the phantom file used");
  gen_balls->add_option("-o,--output", out_path)->required();
  auto* gen_cal = gen->add_subcommand("calibration", "hand-eye sample set with known truth");
  gen_cal->add_option("--samples", n_samples, "number of pose pairs");
  gen_cal->add_option("--noise-mm", noise_mm, "per-axis translation sigma");
  gen_cal->add_option("--noise-deg", noise_deg, "per-axis rotation sigma");
  gen_cal->add_option("--seed", seed, "random seed");
  gen_cal->add_option("--truth", truth_path, "write the true transforms here");
  gen_cal->add_option("-o,--output", out_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return 0;
    err << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
    return 2;
  }

  try {
    if (*info) {
      const std::string bytes = read_file_bytes(vol_path);
      std::istringstream in(bytes);
      out << cli::volume_info(parse_nrrd(in), content_id(bytes)).dump(2) << "\n";
    } else if (*seg) {
      const SegmentationParams sp{static_cast<HU>(threshold), closing};
      const PreparedVolume v = load_prepared_volume(vol_path, sp);
      write_ply(out_path, v.skin);
      if (!scene_path.empty()) cli::write_default_scene(scene_path, v, arm_path);
      out << Json{{"vertices", v.skin.vertices.size()}, {"triangles", v.skin.triangles.size()}}.dump(2) << "\n";
    } else if (*heat) {
      const PreparedVolume v = load_prepared_volume(vol_path);
      const HeatMap hm = build_heatmap(v.ct, v.body, v.skin, parse_point(target_text), cli::load_params(params_path),
                                       workers);
      write_heatmap(out_path, hm);
      Json j = {{"counts", counts_to_json(count_classes(hm))}};
      j["optimal"] = hm.optimal_index ? Json(*hm.optimal_index) : Json(nullptr);
      out << j.dump(2) << "\n";
    } else if (*reach) {
      HeatMap hm = read_heatmap(heatmap_path);
      const Point3 target = parse_point(target_text);
      if ((target - hm.target).norm() > 1e-6) {
        throw Error(ErrorCode::InvalidArgument, "heat map was built for a different target");
      }
      const CollisionScene scene = read_scene(scene_path);
      Json j;
      if (exhaustive) {
        exhaustive_reachability(scene, hm, workers);
      } else {
        const auto rep = grid_reachability(scene, hm, workers);
        j["cells"] = rep.cells;
        j["cells_unreachable"] = rep.cells_unreachable;
        j["demoted_optimum"] = rep.demoted_optimum;
      }
      j["counts"] = counts_to_json(count_classes(hm));
      j["optimal"] = hm.optimal_index ? Json(*hm.optimal_index) : Json(nullptr);
      if (!out_path.empty()) write_heatmap(out_path, hm);
      out << j.dump(2) << "\n";
    } else if (*plan) {
      const PreparedVolume v = load_prepared_volume(vol_path);
      const CollisionScene scene = cli::load_scene_or_default(scene_path, v);
      const PlanOutcome o = plan_entry(v, &scene, parse_point(target_text), cli::load_params(params_path), workers);
      if (!out_path.empty()) write_heatmap(out_path, o.heatmap);
      Json j = plan_to_json(o);
      if (execute) {
        const auto e = chosen_entry(o);
        if (!e) throw Error(ErrorCode::NotFeasible, "no feasible entry point to execute");
        std::mt19937_64 rng(seed);
        j["record"] = record_to_json(execute_entry(scene, o.heatmap, *e, {noise_lateral}, rng));
      }
      out << j.dump(2) << "\n";
    } else if (*hand_eye) {
      const Json j = calibration_to_json(hand_eye_qr24(samples_from_json(read_json_file(samples_path))));
      if (!out_path.empty()) write_json_file(out_path, j);
      out << j.dump(2) << "\n";
    } else if (*reg_ph) {
      const PhantomModel model = phantom_from_json(read_json_file(phantom_path));
      const Volume v = load_volume(vol_path);
      const auto det = to_detections(detect_spheres(v, static_cast<HU>(ball_threshold), 4));
      const PhantomMatch m = match_phantom(det, model);
      if (!out_path.empty()) write_transform(out_path, m.ct_from_sb);
      out << Json{{"ct_from_sb", transform_to_json(m.ct_from_sb)},
                  {"rms_mm", m.rms_mm},
                  {"matched", m.matched},
                  {"detections", det.size()}}
                 .dump(2)
          << "\n";
    } else if (*reg_chain) {
      const RigidTransform b = compose_ct_registration(read_transform(bcam_path), read_transform(camr_path),
                                                       read_transform(rsb_path), inverse(read_transform(sbct_path)));
      if (!out_path.empty()) write_transform(out_path, b);
      out << Json{{"base_from_ct", transform_to_json(b)}}.dump(2) << "\n";
    } else if (*eval) {
      out << report_to_json(placement_report(parse_point(target_text), parse_point(entry_text), parse_point(tip_text)))
                 .dump(2)
          << "\n";
    } else if (*serve) {
      ServiceConfig cfg;
      cfg.workers = workers;
      cfg.noise.lateral_sigma_mm = noise_lateral;
      cfg.seed = seed;
      cfg.log_path = log_path;
      cfg.params = cli::load_params(params_path);
      PlanServer server(cfg);
      server.start(bind, port);
      err << "listening on " << bind << ":" << server.port() << "\n";
      server.wait();
    } else if (*gen_sphere) {
      save_volume(out_path, sphere_phantom({radius, spacing, 20.0}));
    } else if (*gen_torso) {
      TorsoOptions o;
      o.dims = dims;
      o.extent_mm = extent;
      save_volume(out_path, torso_phantom(o));
      out << Json{{"target", vec_to_json(torso_default_target(o))}}.dump(2) << "\n";
    } else if (*gen_balls) {
      const PhantomModel model = phantom_path.empty() ? reference_phantom() : phantom_from_json(read_json_file(phantom_path));
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> n(0.0, 1.0);
      std::uniform_real_distribution<double> u(-50.0, 50.0);
      Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
      q.normalize();
      const RigidTransform truth(q.toRotationMatrix(), Vec3(u(rng), u(rng), u(rng)));
      BallScanOptions o;
      o.spacing_mm = ball_spacing;
      o.omit = omit;
      save_volume(out_path, ball_phantom_volume(model, truth, o));
      if (!truth_path.empty()) write_transform(truth_path, truth);
      if (!model_path.empty()) write_json_file(model_path, phantom_to_json(model));
    } else if (*gen_cal) {
      std::mt19937_64 rng(seed);
      const CalibrationTruth truth = reference_calibration_truth();
      write_json_file(out_path, samples_to_json(synthetic_calibration(n_samples, truth, rng, {noise_mm, noise_deg})));
      if (!truth_path.empty()) {
        write_json_file(truth_path, {{"ee_from_marker", {{"matrix", transform_to_json(truth.ee_from_marker)}}},
                                     {"base_from_cam", {{"matrix", transform_to_json(truth.base_from_cam)}}}});
      }
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace needleplan
