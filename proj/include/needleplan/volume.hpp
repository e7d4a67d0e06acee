#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "needleplan/geometry.hpp"

namespace needleplan {

using HU = std::int16_t;

constexpr HU kAirHU = -1000;

struct VoxelIndex {
  std::int64_t i = 0;
  std::int64_t j = 0;
  std::int64_t k = 0;

  friend bool operator==(const VoxelIndex&, const VoxelIndex&) = default;
  friend auto operator<=>(const VoxelIndex&, const VoxelIndex&) = default;
};

/// Lattice geometry shared by volumes and masks. Voxel (0,0,0) is centred on
/// `origin`; world = origin + direction * (index ∘ spacing).
class Grid {
 public:
  Grid() = default;
  Grid(std::array<std::int64_t, 3> dims, Vec3 spacing, Point3 origin, Mat3 direction)
      : dims_(dims), spacing_(spacing), origin_(origin), direction_(direction) {
    for (int a = 0; a < 3; ++a) {
      if (dims_[a] < 1) throw Error(ErrorCode::InvalidArgument, "grid dimensions must be positive");
      if (!(spacing_[a] > 0.0)) throw Error(ErrorCode::InvalidArgument, "grid spacing must be positive");
    }
    if (orthonormality_error(direction_) > 1e-6) {
      throw Error(ErrorCode::InvalidArgument, "grid direction is not orthonormal");
    }
  }

  [[nodiscard]] const std::array<std::int64_t, 3>& dims() const noexcept { return dims_; }
  [[nodiscard]] const Vec3& spacing() const noexcept { return spacing_; }
  [[nodiscard]] const Point3& origin() const noexcept { return origin_; }
  [[nodiscard]] const Mat3& direction() const noexcept { return direction_; }
  [[nodiscard]] std::int64_t nx() const noexcept { return dims_[0]; }
  [[nodiscard]] std::int64_t ny() const noexcept { return dims_[1]; }
  [[nodiscard]] std::int64_t nz() const noexcept { return dims_[2]; }
  [[nodiscard]] std::size_t voxel_count() const noexcept {
    return static_cast<std::size_t>(dims_[0] * dims_[1] * dims_[2]);
  }

  [[nodiscard]] bool contains(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept {
    return i >= 0 && j >= 0 && k >= 0 && i < dims_[0] && j < dims_[1] && k < dims_[2];
  }
  [[nodiscard]] bool contains(const VoxelIndex& v) const noexcept { return contains(v.i, v.j, v.k); }

  [[nodiscard]] std::size_t linear(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept {
    return static_cast<std::size_t>(i + dims_[0] * (j + dims_[1] * k));
  }
  [[nodiscard]] std::size_t linear(const VoxelIndex& v) const noexcept { return linear(v.i, v.j, v.k); }
  [[nodiscard]] VoxelIndex unlinear(std::size_t n) const noexcept {
    const auto idx = static_cast<std::int64_t>(n);
    return {idx % dims_[0], (idx / dims_[0]) % dims_[1], idx / (dims_[0] * dims_[1])};
  }

  [[nodiscard]] Point3 continuous_to_world(const Vec3& c) const {
    return origin_ + direction_ * c.cwiseProduct(spacing_);
  }
  [[nodiscard]] Point3 index_to_world(const VoxelIndex& v) const {
    return continuous_to_world(Vec3(static_cast<double>(v.i), static_cast<double>(v.j), static_cast<double>(v.k)));
  }
  [[nodiscard]] Vec3 world_to_continuous_index(const Point3& p) const {
    return (direction_.transpose() * (p - origin_)).cwiseQuotient(spacing_);
  }
  /// Voxel whose cell contains p (cells span ±0.5 around centres); may lie outside the lattice.
  [[nodiscard]] VoxelIndex nearest_voxel(const Point3& p) const {
    const Vec3 c = world_to_continuous_index(p);
    return {static_cast<std::int64_t>(std::floor(c.x() + 0.5)), static_cast<std::int64_t>(std::floor(c.y() + 0.5)),
            static_cast<std::int64_t>(std::floor(c.z() + 0.5))};
  }

  [[nodiscard]] bool same_geometry(const Grid& o, double tol = 1e-9) const {
    return dims_ == o.dims_ && (spacing_ - o.spacing_).cwiseAbs().maxCoeff() <= tol &&
           (origin_ - o.origin_).cwiseAbs().maxCoeff() <= tol &&
           (direction_ - o.direction_).cwiseAbs().maxCoeff() <= tol;
  }

 private:
  std::array<std::int64_t, 3> dims_{1, 1, 1};
  Vec3 spacing_{1.0, 1.0, 1.0};
  Point3 origin_{0.0, 0.0, 0.0};
  Mat3 direction_ = Mat3::Identity();
};

/// Immutable CT volume: signed 16-bit HU, x-fastest.
class Volume {
 public:
  Volume(Grid grid, std::vector<HU> voxels) : grid_(std::move(grid)), voxels_(std::move(voxels)) {
    for (auto d : grid_.dims()) {
      if (d < 2) throw Error(ErrorCode::InvalidArgument, "volume needs at least 2 voxels per axis");
    }
    if (voxels_.size() != grid_.voxel_count()) {
      throw Error(ErrorCode::DimensionMismatch, "voxel count does not match dimensions");
    }
  }

  [[nodiscard]] const Grid& grid() const noexcept { return grid_; }
  [[nodiscard]] std::span<const HU> voxels() const noexcept { return voxels_; }
  [[nodiscard]] HU at(std::int64_t i, std::int64_t j, std::int64_t k) const { return voxels_[grid_.linear(i, j, k)]; }
  [[nodiscard]] HU at(const VoxelIndex& v) const { return voxels_[grid_.linear(v)]; }
  /// Raw HU with air outside the lattice.
  [[nodiscard]] HU at_or_air(const VoxelIndex& v) const { return grid_.contains(v) ? at(v) : kAirHU; }

  [[nodiscard]] Point3 index_to_world(const VoxelIndex& v) const { return grid_.index_to_world(v); }
  [[nodiscard]] Vec3 world_to_continuous_index(const Point3& p) const { return grid_.world_to_continuous_index(p); }

 private:
  Grid grid_;
  std::vector<HU> voxels_;
};

inline Point3 index_to_world(const Volume& v, const VoxelIndex& idx) { return v.index_to_world(idx); }
inline Vec3 world_to_continuous_index(const Volume& v, const Point3& p) { return v.world_to_continuous_index(p); }

namespace detail {

/// Trilinear interpolation at a continuous index known to lie inside [0, n-1]^3.
inline double trilinear_at_index(const Volume& v, const Vec3& c) {
  const auto& d = v.grid().dims();
  std::array<std::int64_t, 3> i0{};
  std::array<double, 3> f{};
  for (int a = 0; a < 3; ++a) {
    const double x = std::clamp(c[a], 0.0, static_cast<double>(d[a] - 1));
    auto lo = static_cast<std::int64_t>(std::floor(x));
    if (lo >= d[a] - 1) lo = d[a] - 2;
    i0[a] = lo;
    f[a] = x - static_cast<double>(lo);
  }
  double acc = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    const int bx = corner & 1, by = (corner >> 1) & 1, bz = (corner >> 2) & 1;
    const double w = (bx ? f[0] : 1.0 - f[0]) * (by ? f[1] : 1.0 - f[1]) * (bz ? f[2] : 1.0 - f[2]);
    if (w != 0.0) acc += w * v.at(i0[0] + bx, i0[1] + by, i0[2] + bz);
  }
  return acc;
}

}  // namespace detail

/// Trilinear HU at a world point; OutOfBounds unless p lies within the voxel-centre lattice.
inline double sample_trilinear(const Volume& v, const Point3& p) {
  constexpr double eps = 1e-9;
  const Vec3 c = v.world_to_continuous_index(p);
  const auto& d = v.grid().dims();
  for (int a = 0; a < 3; ++a) {
    if (!(c[a] >= -eps && c[a] <= static_cast<double>(d[a] - 1) + eps)) {
      throw Error(ErrorCode::OutOfBounds, "sample point lies outside the voxel lattice");
    }
  }
  return detail::trilinear_at_index(v, c);
}

/// Halves the resolution: each output voxel is the trilinear value at its own
/// world centre, which sits between a 2x2x2 block of input voxels.
inline Volume downsample_half(const Volume& v) {
  const Grid& g = v.grid();
  for (auto d : g.dims()) {
    if (d < 4) throw Error(ErrorCode::TooSmall, "downsampling needs at least 4 voxels per axis");
  }
  const std::array<std::int64_t, 3> dims{g.nx() / 2, g.ny() / 2, g.nz() / 2};
  const Grid out_grid(dims, g.spacing() * 2.0, g.continuous_to_world(Vec3(0.5, 0.5, 0.5)), g.direction());
  std::vector<HU> out(out_grid.voxel_count());
  std::size_t n = 0;
  for (std::int64_t k = 0; k < dims[2]; ++k)
    for (std::int64_t j = 0; j < dims[1]; ++j)
      for (std::int64_t i = 0; i < dims[0]; ++i) {
        const Vec3 c(2.0 * i + 0.5, 2.0 * j + 0.5, 2.0 * k + 0.5);
        const double value = std::round(detail::trilinear_at_index(v, c));
        out[n++] = static_cast<HU>(std::clamp(value, -32768.0, 32767.0));
      }
  return {out_grid, std::move(out)};
}

// ---------------------------------------------------------------------------
// NRRD subset: NRRD0004, type short, dimension 3, sizes, space directions,
// space origin, optional "endian: little" and "space" lines, encoding raw.

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline Vec3 parse_nrrd_vector(const std::string& text) {
  const std::string t = trim(text);
  if (t.size() < 2 || t.front() != '(' || t.back() != ')') {
    throw Error(ErrorCode::MalformedHeader, "expected (x,y,z) vector, got '" + t + "'");
  }
  try {
    return parse_point(t.substr(1, t.size() - 2));
  } catch (const Error&) {
    throw Error(ErrorCode::MalformedHeader, "bad vector '" + t + "'");
  }
}

inline std::vector<std::string> split_vectors(const std::string& text) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (true) {
    const auto open = text.find('(', pos);
    if (open == std::string::npos) break;
    const auto close = text.find(')', open);
    if (close == std::string::npos) throw Error(ErrorCode::MalformedHeader, "unterminated vector");
    parts.push_back(text.substr(open, close - open + 1));
    pos = close + 1;
  }
  if (!trim(text.substr(pos)).empty()) throw Error(ErrorCode::MalformedHeader, "trailing text after vectors");
  return parts;
}

inline bool host_is_little_endian() {
  const std::uint16_t probe = 1;
  unsigned char b = 0;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}

inline std::string format_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace detail

inline Volume parse_nrrd(std::istream& in) {
  using detail::trim;
  std::string line;
  if (!std::getline(in, line) || trim(line) != "NRRD0004") {
    throw Error(ErrorCode::MalformedHeader, "missing NRRD0004 magic");
  }
  bool have_type = false, have_dim = false, have_sizes = false, have_dirs = false, have_origin = false,
       have_encoding = false;
  std::array<std::int64_t, 3> dims{};
  Vec3 spacing;
  Mat3 direction;
  Point3 origin;
  while (true) {
    if (!std::getline(in, line)) throw Error(ErrorCode::MalformedHeader, "header not terminated by blank line");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) break;
    if (line[0] == '#') continue;
    const auto colon = line.find(": ");
    if (colon == std::string::npos) {
      if (line.find(":=") != std::string::npos) continue;  // key/value comments carry no geometry
      throw Error(ErrorCode::MalformedHeader, "bad header line '" + line + "'");
    }
    const std::string key = trim(line.substr(0, colon));
    const std::string value = trim(line.substr(colon + 2));
    if (key == "type") {
      if (value != "short" && value != "short int" && value != "signed short" && value != "signed short int" &&
          value != "int16" && value != "int16_t") {
        throw Error(ErrorCode::UnsupportedEncoding, "only type short is supported, got '" + value + "'");
      }
      have_type = true;
    } else if (key == "dimension") {
      if (value != "3") throw Error(ErrorCode::UnsupportedEncoding, "only 3D volumes are supported");
      have_dim = true;
    } else if (key == "sizes") {
      std::istringstream ss(value);
      for (auto& d : dims) {
        if (!(ss >> d) || d < 1) throw Error(ErrorCode::MalformedHeader, "bad sizes '" + value + "'");
      }
      std::string rest;
      if (ss >> rest) throw Error(ErrorCode::MalformedHeader, "sizes must list exactly 3 values");
      have_sizes = true;
    } else if (key == "space directions") {
      const auto parts = detail::split_vectors(value);
      if (parts.size() != 3) throw Error(ErrorCode::MalformedHeader, "space directions must list 3 vectors");
      for (int a = 0; a < 3; ++a) {
        const Vec3 v = detail::parse_nrrd_vector(parts[a]);
        spacing[a] = v.norm();
        if (!(spacing[a] > 0.0)) throw Error(ErrorCode::MalformedHeader, "zero-length space direction");
        direction.col(a) = v / spacing[a];
      }
      have_dirs = true;
    } else if (key == "space origin") {
      origin = detail::parse_nrrd_vector(value);
      have_origin = true;
    } else if (key == "encoding") {
      if (value != "raw") throw Error(ErrorCode::UnsupportedEncoding, "only raw encoding is supported");
      have_encoding = true;
    } else if (key == "endian") {
      if (value != "little") throw Error(ErrorCode::UnsupportedEncoding, "only little-endian data is supported");
    } else if (key == "space") {
      if (value != "right-anterior-superior" && value != "RAS" && value != "3D-right-handed") {
        throw Error(ErrorCode::UnsupportedEncoding, "unsupported space '" + value + "'");
      }
    } else {
      throw Error(ErrorCode::MalformedHeader, "unsupported field '" + key + "'");
    }
  }
  if (!(have_type && have_dim && have_sizes && have_dirs && have_origin && have_encoding)) {
    throw Error(ErrorCode::MalformedHeader, "header lacks a required field");
  }
  if (orthonormality_error(direction) > 1e-6) {
    throw Error(ErrorCode::MalformedHeader, "space directions are not orthogonal");
  }
  for (auto d : dims) {
    if (d < 2) throw Error(ErrorCode::DimensionMismatch, "volume needs at least 2 voxels per axis");
  }
  const Grid grid(dims, spacing, origin, direction);
  const std::size_t count = grid.voxel_count();
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != count * sizeof(HU)) {
    throw Error(ErrorCode::DimensionMismatch, "header declares " + std::to_string(count) + " voxels but data holds " +
                                                  std::to_string(bytes.size() / sizeof(HU)) +
                                                  (bytes.size() % sizeof(HU) ? " and a partial value" : ""));
  }
  std::vector<HU> voxels(count);
  std::memcpy(voxels.data(), bytes.data(), bytes.size());
  if (!detail::host_is_little_endian()) {
    for (auto& v : voxels) {
      const auto u = static_cast<std::uint16_t>(v);
      v = static_cast<HU>(static_cast<std::uint16_t>((u >> 8) | (u << 8)));
    }
  }
  return {grid, std::move(voxels)};
}

inline void write_nrrd(std::ostream& out, const Volume& v) {
  const Grid& g = v.grid();
  using detail::format_double;
  out << "NRRD0004\n";
  out << "type: short\n";
  out << "dimension: 3\n";
  out << "space: right-anterior-superior\n";
  out << "sizes: " << g.nx() << ' ' << g.ny() << ' ' << g.nz() << '\n';
  out << "space directions:";
  for (int a = 0; a < 3; ++a) {
    const Vec3 axis = g.direction().col(a) * g.spacing()[a];
    out << " (" << format_double(axis.x()) << ',' << format_double(axis.y()) << ',' << format_double(axis.z()) << ')';
  }
  out << '\n';
  out << "space origin: (" << format_double(g.origin().x()) << ',' << format_double(g.origin().y()) << ','
      << format_double(g.origin().z()) << ")\n";
  out << "endian: little\n";
  out << "encoding: raw\n\n";
  std::vector<HU> data(v.voxels().begin(), v.voxels().end());
  if (!detail::host_is_little_endian()) {
    for (auto& x : data) {
      const auto u = static_cast<std::uint16_t>(x);
      x = static_cast<HU>(static_cast<std::uint16_t>((u >> 8) | (u << 8)));
    }
  }
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(HU)));
}

inline Volume load_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return parse_nrrd(in);
}

inline void save_volume(const std::string& path, const Volume& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  write_nrrd(out, v);
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path);
}

}  // namespace needleplan
