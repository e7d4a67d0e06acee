#pragma once

// Rigid point-set fit, steel-ball phantom matching, QR24 hand-eye calibration
// and the CT-to-robot transform chain.
//
// Transform names read target_from_source: base_from_cam maps camera
// coordinates to robot-base coordinates.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "needleplan/geometry.hpp"
#include "needleplan/segmentation.hpp"

namespace needleplan {

struct KabschResult {
  RigidTransform transform;  // dest_from_source
  double rms_mm = 0.0;
};

/// Least-squares rigid map source -> dest (SVD with reflection correction).
inline KabschResult kabsch(const std::vector<Point3>& source, const std::vector<Point3>& dest) {
  if (source.size() != dest.size()) throw Error(ErrorCode::InvalidArgument, "kabsch: point counts differ");
  if (source.size() < 3) throw Error(ErrorCode::DegenerateConfiguration, "kabsch needs at least 3 point pairs");
  const auto n = static_cast<double>(source.size());
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    cs += source[i];
    cd += dest[i];
  }
  cs /= n;
  cd /= n;
  Mat3 h = Mat3::Zero(), spread = Mat3::Zero();
  for (std::size_t i = 0; i < source.size(); ++i) {
    h += (source[i] - cs) * (dest[i] - cd).transpose();
    spread += (source[i] - cs) * (source[i] - cs).transpose();
  }
  const Eigen::SelfAdjointEigenSolver<Mat3> es(spread);
  const Vec3 ev = es.eigenvalues();  // ascending
  if (!(ev[2] > 0.0) || ev[1] <= 1e-12 * ev[2]) {
    throw Error(ErrorCode::DegenerateConfiguration, "source points are coincident or collinear");
  }
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU(), v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  if ((v * u.transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  const Mat3 r = v * d * u.transpose();
  KabschResult res{RigidTransform(r, cd - r * cs), 0.0};
  double sq = 0.0;
  for (std::size_t i = 0; i < source.size(); ++i) sq += (res.transform.apply(source[i]) - dest[i]).squaredNorm();
  res.rms_mm = std::sqrt(sq / n);
  return res;
}

// ---------------------------------------------------------------------------
// Steel-ball phantom

enum class RadiusClass : std::uint8_t { Small, Large };

constexpr double kSmallBallMm = 2.0;
constexpr double kLargeBallMm = 5.0;
constexpr double kRadiusClassSplitMm = 3.5;

constexpr double radius_of(RadiusClass c) { return c == RadiusClass::Small ? kSmallBallMm : kLargeBallMm; }
constexpr RadiusClass classify_radius(double r_mm) {
  return r_mm < kRadiusClassSplitMm ? RadiusClass::Small : RadiusClass::Large;
}

struct PhantomBall {
  Point3 center;  // SB frame, mm
  RadiusClass radius_class = RadiusClass::Small;
};

struct PhantomModel {
  std::vector<PhantomBall> balls;
  RigidTransform marker_from_sb;  // reflective marker (R) <- steel balls (SB)
};

/// Shipped layout: a 6 x 4 plate on a 25 mm pitch with irregular offsets and
/// heights, 8 large and 16 small balls placed without any symmetry.
inline PhantomModel reference_phantom() {
  static constexpr std::array<std::array<double, 4>, 24> kRows = {{
      {1.8, -0.6, 0.0, 1},    {26.1, 1.2, 3.0, 0},    {48.7, -1.9, 6.5, 0},  {76.4, 0.8, 1.5, 1},
      {99.2, 2.3, 4.0, 0},    {126.5, -1.1, 8.0, 0},  {-0.9, 27.4, 5.0, 0},  {24.3, 23.8, 0.5, 0},
      {51.6, 26.7, 2.5, 1},   {74.1, 24.2, 7.0, 0},   {101.7, 22.9, 1.0, 1}, {123.8, 26.1, 3.5, 0},
      {2.7, 48.9, 2.0, 0},    {23.5, 51.8, 7.5, 1},   {49.8, 48.1, 4.5, 0},  {77.9, 52.4, 0.0, 0},
      {98.6, 49.3, 6.0, 1},   {125.1, 51.2, 2.0, 0},  {-1.6, 76.8, 8.5, 1},  {26.8, 73.7, 1.0, 0},
      {52.2, 77.5, 5.5, 0},   {73.3, 74.6, 3.0, 0},   {100.9, 76.2, 0.5, 0}, {124.4, 73.1, 6.0, 1},
  }};
  PhantomModel m;
  for (const auto& r : kRows) m.balls.push_back({Point3(r[0], r[1], r[2]), r[3] > 0.5 ? RadiusClass::Large : RadiusClass::Small});
  m.marker_from_sb = RigidTransform(rotation_about(Vec3::UnitX(), std::numbers::pi / 2), Vec3(-62.5, -40.0, 35.0));
  return m;
}

struct BallDetection {
  Point3 centroid;  // CT world, mm
  RadiusClass radius_class = RadiusClass::Small;
};

inline std::vector<BallDetection> to_detections(const std::vector<DetectedSphere>& spheres) {
  std::vector<BallDetection> out;
  for (const auto& s : spheres) out.push_back({s.centroid, classify_radius(s.equivalent_radius_mm)});
  return out;
}

struct PhantomMatch {
  std::vector<std::optional<std::size_t>> model_index;  // per detection
  RigidTransform ct_from_sb;
  double rms_mm = 0.0;
  std::size_t matched = 0;
};

struct MatchOptions {
  double distance_tolerance_mm = 1.5;  // pairwise-distance and inlier tolerance
};

/// Correspondence by radius class and pairwise-distance signature, then a rigid
/// fit. Hypotheses come from detection triples matched against model triples;
/// the one explaining the most detections wins, and its pairs (ordered by model
/// index) give the final fit.
inline PhantomMatch match_phantom(const std::vector<BallDetection>& det, const PhantomModel& model,
                                  const MatchOptions& opt = {}) {
  bool small = false, large = false;
  for (const auto& d : det) (d.radius_class == RadiusClass::Small ? small : large) = true;
  if (det.size() < 4 || !small || !large) {
    throw Error(ErrorCode::TooFewDetections, "need at least 4 detections covering both radius classes");
  }
  const double tol = opt.distance_tolerance_mm;
  const auto& balls = model.balls;

  // Base pair: the two detections farthest apart, a choice independent of input order.
  std::size_t bi = 0, bj = 1;
  double best_d = -1.0;
  for (std::size_t i = 0; i < det.size(); ++i)
    for (std::size_t j = i + 1; j < det.size(); ++j) {
      const double d = (det[i].centroid - det[j].centroid).norm();
      if (d > best_d + 1e-9) {
        best_d = d;
        bi = i;
        bj = j;
      }
    }

  struct Hypothesis {
    std::vector<std::optional<std::size_t>> assign;
    std::size_t inliers = 0;
    double rms = 0.0;
    RigidTransform ct_from_sb;
  };
  auto evaluate = [&](const RigidTransform& t) {
    Hypothesis h;
    h.assign.assign(det.size(), std::nullopt);
    const RigidTransform sb_from_ct = inverse(t);
    std::vector<char> used(balls.size(), 0);
    double sq = 0.0;
    for (std::size_t i = 0; i < det.size(); ++i) {
      const Point3 p = sb_from_ct.apply(det[i].centroid);
      std::optional<std::size_t> best;
      double bd = tol;
      for (std::size_t m = 0; m < balls.size(); ++m) {
        if (balls[m].radius_class != det[i].radius_class || used[m]) continue;
        const double d = (balls[m].center - p).norm();
        if (d < bd) {
          bd = d;
          best = m;
        }
      }
      if (best) {
        used[*best] = 1;
        h.assign[i] = best;
        ++h.inliers;
        sq += bd * bd;
      }
    }
    h.rms = h.inliers ? std::sqrt(sq / static_cast<double>(h.inliers)) : 0.0;
    h.ct_from_sb = t;
    return h;
  };

  std::optional<Hypothesis> best, runner_up;
  auto consider = [&](Hypothesis h) {
    auto better = [](const Hypothesis& a, const Hypothesis& b) {
      return a.inliers > b.inliers || (a.inliers == b.inliers && a.rms < b.rms);
    };
    if (!best || better(h, *best)) {
      if (best && best->assign != h.assign) runner_up = std::move(best);
      best = std::move(h);
    } else if (h.assign != best->assign && (!runner_up || better(h, *runner_up))) {
      runner_up = std::move(h);
    }
  };

  const double dij = (det[bi].centroid - det[bj].centroid).norm();
  for (std::size_t a = 0; a < balls.size(); ++a) {
    if (balls[a].radius_class != det[bi].radius_class) continue;
    for (std::size_t b = 0; b < balls.size(); ++b) {
      if (b == a || balls[b].radius_class != det[bj].radius_class) continue;
      if (std::abs((balls[a].center - balls[b].center).norm() - dij) > tol) continue;
      for (std::size_t k = 0; k < det.size(); ++k) {
        if (k == bi || k == bj) continue;
        const double dik = (det[bi].centroid - det[k].centroid).norm();
        const double djk = (det[bj].centroid - det[k].centroid).norm();
        for (std::size_t c = 0; c < balls.size(); ++c) {
          if (c == a || c == b || balls[c].radius_class != det[k].radius_class) continue;
          if (std::abs((balls[a].center - balls[c].center).norm() - dik) > tol) continue;
          if (std::abs((balls[b].center - balls[c].center).norm() - djk) > tol) continue;
          try {
            const auto fit = kabsch({balls[a].center, balls[b].center, balls[c].center},
                                    {det[bi].centroid, det[bj].centroid, det[k].centroid});
            consider(evaluate(fit.transform));
          } catch (const Error&) {
            // collinear triple: no hypothesis
          }
        }
      }
    }
  }
  if (!best || best->inliers < 4) throw Error(ErrorCode::AmbiguousMatch, "no consistent correspondence found");
  if (runner_up && runner_up->inliers == best->inliers && runner_up->rms <= best->rms + 0.1 * tol) {
    throw Error(ErrorCode::AmbiguousMatch, "several correspondences explain the detections equally well");
  }

  // Refit on all inliers, ordered by model index so the result ignores detection order.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (model, detection)
  for (std::size_t i = 0; i < det.size(); ++i)
    if (best->assign[i]) pairs.emplace_back(*best->assign[i], i);
  std::sort(pairs.begin(), pairs.end());
  std::vector<Point3> src, dst;
  for (const auto& [m, i] : pairs) {
    src.push_back(balls[m].center);
    dst.push_back(det[i].centroid);
  }
  const KabschResult fit = kabsch(src, dst);
  PhantomMatch out;
  out.model_index = best->assign;
  out.ct_from_sb = fit.transform;
  out.rms_mm = fit.rms_mm;
  out.matched = pairs.size();
  return out;
}

// ---------------------------------------------------------------------------
// Hand-eye calibration

struct CalibrationSample {
  RigidTransform robot_pose;   // base_from_ee
  RigidTransform camera_pose;  // marker_from_cam
};

struct CalibrationResult {
  RigidTransform x;  // ee_from_marker
  RigidTransform z;  // base_from_cam
  double residual_translation_mm = 0.0;
  double residual_rotation_deg = 0.0;
  double projection_deviation = 0.0;  // Frobenius distance of the linear rotation blocks from SO(3)
};

constexpr double kMinPoseDiversityDeg = 5.0;

/// Mean (translation mm, rotation deg) error of the tracked marker poses
/// (cam_from_marker) predicted by x = ee_from_marker and z = base_from_cam.
inline std::pair<double, double> prediction_residuals(const RigidTransform& x, const RigidTransform& z,
                                                      const std::vector<CalibrationSample>& samples) {
  if (samples.empty()) return {0.0, 0.0};
  double te = 0.0, re = 0.0;
  for (const auto& s : samples) {
    const RigidTransform predicted = inverse(z) * s.robot_pose * x;  // cam_from_marker
    const PoseError e = pose_error(predicted, inverse(s.camera_pose));
    te += e.translation_mm;
    re += e.rotation_deg;
  }
  const auto n = static_cast<double>(samples.size());
  return {te / n, re / n};
}

/// True iff some three robot poses are pairwise at least `min_deg` apart in rotation.
inline bool rotationally_diverse(const std::vector<CalibrationSample>& s, double min_deg = kMinPoseDiversityDeg) {
  const std::size_t n = s.size();
  auto apart = [&](std::size_t i, std::size_t j) {
    return rad_to_deg(rotation_angle(s[i].robot_pose.rotation().transpose() * s[j].robot_pose.rotation())) >= min_deg;
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      if (!apart(i, j)) continue;
      for (std::size_t k = j + 1; k < n; ++k)
        if (apart(i, k) && apart(j, k)) return true;
    }
  return false;
}

/// QR24: base_from_ee * X = Z * cam_from_marker stacked over all samples as
/// one linear system in the 24 entries of X and Z (rotation blocks and
/// translations, translations in metres), solved by column-pivoting QR; the
/// rotation blocks are then projected onto SO(3).
inline CalibrationResult hand_eye_qr24(const std::vector<CalibrationSample>& samples) {
  if (samples.size() < 3 || !rotationally_diverse(samples)) {
    throw Error(ErrorCode::InsufficientDiversity,
                "need at least 3 robot poses pairwise >= 5 degrees apart in rotation");
  }
  // Unknowns: vec(Rx) [0,9), vec(Rz) [9,18), tx [18,21), tz [21,24); vec is column-major.
  const auto rows = static_cast<Eigen::Index>(12 * samples.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(rows, 24);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(rows);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const Mat3 ra = samples[s].robot_pose.rotation();
    const Vec3 ta = samples[s].robot_pose.translation() * 1e-3;
    const RigidTransform cam_from_marker = inverse(samples[s].camera_pose);
    const Mat3 rb = cam_from_marker.rotation();
    const Vec3 tb = cam_from_marker.translation() * 1e-3;
    const auto r0 = static_cast<Eigen::Index>(12 * s);
    // Ra Rx - Rz Rb = 0, entry (i, j).
    for (int j = 0; j < 3; ++j)
      for (int i = 0; i < 3; ++i) {
        const Eigen::Index row = r0 + 3 * j + i;
        for (int k = 0; k < 3; ++k) {
          a(row, 3 * j + k) += ra(i, k);       // Ra(i,k) Rx(k,j)
          a(row, 9 + 3 * k + i) -= rb(k, j);   // Rz(i,k) Rb(k,j)
        }
      }
    // Ra tx - Rz tb - tz = -ta.
    for (int i = 0; i < 3; ++i) {
      const Eigen::Index row = r0 + 9 + i;
      for (int k = 0; k < 3; ++k) {
        a(row, 18 + k) += ra(i, k);
        a(row, 9 + 3 * k + i) -= tb[k];
      }
      a(row, 21 + i) -= 1.0;
      b[row] = -ta[i];
    }
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  qr.setThreshold(1e-10);
  if (qr.rank() < 24) throw Error(ErrorCode::SingularSystem, "calibration system is rank deficient");
  const Eigen::VectorXd x = qr.solve(b);

  Mat3 rx_lin, rz_lin;
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 3; ++i) {
      rx_lin(i, j) = x[3 * j + i];
      rz_lin(i, j) = x[9 + 3 * j + i];
    }
  CalibrationResult res;
  const Mat3 rx = nearest_rotation(rx_lin), rz = nearest_rotation(rz_lin);
  res.projection_deviation = std::max((rx - rx_lin).norm(), (rz - rz_lin).norm());
  res.x = RigidTransform(rx, Vec3(x[18], x[19], x[20]) * 1e3);
  res.z = RigidTransform(rz, Vec3(x[21], x[22], x[23]) * 1e3);

  std::tie(res.residual_translation_mm, res.residual_rotation_deg) = prediction_residuals(res.x, res.z, samples);
  return res;
}

/// base_from_ct = base_from_cam * cam_from_ref * ref_from_sb * sb_from_ct.
inline RigidTransform compose_ct_registration(const RigidTransform& base_from_cam, const RigidTransform& cam_from_ref,
                                              const RigidTransform& ref_from_sb, const RigidTransform& sb_from_ct) {
  return base_from_cam * cam_from_ref * ref_from_sb * sb_from_ct;
}

// ---------------------------------------------------------------------------
// Files

inline Json phantom_to_json(const PhantomModel& m) {
  Json rows = Json::array();
  for (const auto& b : m.balls) {
    rows.push_back({b.center.x(), b.center.y(), b.center.z(), radius_of(b.radius_class)});
  }
  return {{"balls", rows}, {"marker_from_sb", {{"matrix", transform_to_json(m.marker_from_sb)}}}};
}

inline PhantomModel phantom_from_json(const Json& j) {
  try {
    PhantomModel m;
    for (const Json& r : j.at("balls")) {
      if (!r.is_array() || r.size() != 4) throw Error(ErrorCode::InvalidArgument, "phantom rows are x, y, z, radius");
      m.balls.push_back({Point3(r[0].get<double>(), r[1].get<double>(), r[2].get<double>()),
                         classify_radius(r[3].get<double>())});
    }
    m.marker_from_sb = transform_from_json(j.at("marker_from_sb").at("matrix"));
    return m;
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("phantom file: ") + e.what());
  }
}

inline Json samples_to_json(const std::vector<CalibrationSample>& samples) {
  Json arr = Json::array();
  for (const auto& s : samples) {
    arr.push_back({{"robot_pose", transform_to_json(s.robot_pose)}, {"camera_pose", transform_to_json(s.camera_pose)}});
  }
  return {{"samples", arr}};
}

inline std::vector<CalibrationSample> samples_from_json(const Json& j) {
  try {
    std::vector<CalibrationSample> out;
    for (const Json& s : j.at("samples")) {
      out.push_back({transform_from_json(s.at("robot_pose")), transform_from_json(s.at("camera_pose"))});
    }
    return out;
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("calibration samples: ") + e.what());
  }
}

inline Json calibration_to_json(const CalibrationResult& r) {
  return {{"ee_from_marker", {{"matrix", transform_to_json(r.x)}}},
          {"base_from_cam", {{"matrix", transform_to_json(r.z)}}},
          {"residual_translation_mm", r.residual_translation_mm},
          {"residual_rotation_deg", r.residual_rotation_deg},
          {"projection_deviation", r.projection_deviation}};
}

}  // namespace needleplan
