#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "needleplan/geometry.hpp"

namespace needleplan {

using Triangle = std::array<std::uint32_t, 3>;

/// Triangulated surface in world millimetres with outward per-vertex normals.
struct SurfaceMesh {
  std::vector<Point3> vertices;
  std::vector<Triangle> triangles;
  std::vector<Vec3> normals;

  [[nodiscard]] std::size_t vertex_count() const noexcept { return vertices.size(); }
  [[nodiscard]] std::size_t triangle_count() const noexcept { return triangles.size(); }

  /// Area-weighted average of incident face normals.
  void compute_normals() {
    normals.assign(vertices.size(), Vec3::Zero());
    for (const auto& t : triangles) {
      const Vec3 n = (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]);
      for (auto v : t) normals[v] += n;
    }
    for (auto& n : normals) {
      const double len = n.norm();
      n = len > 0.0 ? Vec3(n / len) : Vec3(0.0, 0.0, 1.0);
    }
  }

  [[nodiscard]] double area() const {
    double a = 0.0;
    for (const auto& t : triangles)
      a += 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
    return a;
  }

  /// Signed enclosed volume (divergence theorem); positive for outward orientation.
  [[nodiscard]] double enclosed_volume() const {
    double v = 0.0;
    for (const auto& t : triangles) v += vertices[t[0]].dot(vertices[t[1]].cross(vertices[t[2]])) / 6.0;
    return v;
  }

  [[nodiscard]] std::size_t edge_count() const {
    std::unordered_map<std::uint64_t, int> edges;
    edges.reserve(triangles.size() * 2);
    for (const auto& t : triangles)
      for (int e = 0; e < 3; ++e) {
        const std::uint64_t a = std::min(t[e], t[(e + 1) % 3]), b = std::max(t[e], t[(e + 1) % 3]);
        ++edges[(a << 32) | b];
      }
    return edges.size();
  }

  [[nodiscard]] long euler_characteristic() const {
    return static_cast<long>(vertices.size()) - static_cast<long>(edge_count()) + static_cast<long>(triangles.size());
  }

  /// Every undirected edge is used by exactly two triangles with opposite directions.
  [[nodiscard]] bool is_closed_oriented() const {
    std::unordered_map<std::uint64_t, int> directed;
    directed.reserve(triangles.size() * 3);
    for (const auto& t : triangles) {
      if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) return false;
      for (int e = 0; e < 3; ++e) {
        const std::uint64_t a = t[e], b = t[(e + 1) % 3];
        if (a >= vertices.size() || b >= vertices.size()) return false;
        if (++directed[(a << 32) | b] > 1) return false;
      }
    }
    for (const auto& [key, n] : directed) {
      const std::uint64_t a = key >> 32, b = key & 0xffffffffULL;
      if (!directed.contains((b << 32) | a)) return false;
    }
    return true;
  }
};

// ---------------------------------------------------------------------------
// ASCII PLY: per-vertex x y z nx ny nz [quality], faces as index lists.

namespace detail {

inline void append_double(std::string& out, double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), x);
  out.append(buf, r.ptr);
}

}  // namespace detail

inline std::string ply_to_string(const SurfaceMesh& mesh, const std::vector<double>* quality = nullptr) {
  std::string out;
  out.reserve(mesh.vertices.size() * 90 + mesh.triangles.size() * 24 + 256);
  out += "ply\nformat ascii 1.0\ncomment needleplan surface\n";
  out += "element vertex " + std::to_string(mesh.vertices.size()) + "\n";
  out += "property double x\nproperty double y\nproperty double z\n";
  out += "property double nx\nproperty double ny\nproperty double nz\n";
  if (quality) out += "property double quality\n";
  out += "element face " + std::to_string(mesh.triangles.size()) + "\n";
  out += "property list uchar int vertex_indices\nend_header\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Point3& p = mesh.vertices[i];
    const Vec3 n = i < mesh.normals.size() ? mesh.normals[i] : Vec3::Zero();
    for (double x : {p.x(), p.y(), p.z(), n.x(), n.y(), n.z()}) {
      detail::append_double(out, x);
      out += ' ';
    }
    if (quality) {
      detail::append_double(out, (*quality)[i]);
      out += ' ';
    }
    out.back() = '\n';
  }
  for (const auto& t : mesh.triangles) {
    out += "3 " + std::to_string(t[0]) + ' ' + std::to_string(t[1]) + ' ' + std::to_string(t[2]) + '\n';
  }
  return out;
}

inline void write_ply(const std::string& path, const SurfaceMesh& mesh, const std::vector<double>* quality = nullptr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << ply_to_string(mesh, quality);
}

struct PlyData {
  SurfaceMesh mesh;
  std::optional<std::vector<double>> quality;
};

inline PlyData parse_ply(std::istream& in) {
  std::string line;
  auto fail = [](const std::string& why) { return Error(ErrorCode::MalformedHeader, "PLY: " + why); };
  if (!std::getline(in, line) || line != "ply") throw fail("missing magic");
  std::size_t n_vertices = 0, n_faces = 0;
  std::vector<std::string> vertex_props;
  std::string current;
  bool ascii = false;
  while (std::getline(in, line)) {
    if (line == "end_header") break;
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "format") {
      std::string fmt;
      ss >> fmt;
      ascii = fmt == "ascii";
    } else if (word == "element") {
      ss >> current;
      std::size_t n = 0;
      ss >> n;
      if (current == "vertex") n_vertices = n;
      else if (current == "face") n_faces = n;
      else throw fail("unsupported element " + current);
    } else if (word == "property") {
      std::string type, name;
      ss >> type;
      if (type == "list") {
        std::string a, b;
        ss >> a >> b >> name;
        if (current != "face") throw fail("list property outside face element");
      } else {
        ss >> name;
        if (current == "vertex") vertex_props.push_back(name);
      }
    } else if (word != "comment" && word != "obj_info") {
      throw fail("unexpected header line '" + line + "'");
    }
  }
  if (!ascii) throw Error(ErrorCode::UnsupportedEncoding, "PLY: only ascii format is supported");
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < vertex_props.size(); ++i) col[vertex_props[i]] = i;
  for (const char* req : {"x", "y", "z"})
    if (!col.contains(req)) throw fail(std::string("missing vertex property ") + req);
  const bool has_normals = col.contains("nx") && col.contains("ny") && col.contains("nz");
  const bool has_quality = col.contains("quality");

  PlyData data;
  data.mesh.vertices.resize(n_vertices);
  if (has_normals) data.mesh.normals.resize(n_vertices);
  if (has_quality) data.quality.emplace(n_vertices);
  std::vector<double> row(vertex_props.size());
  for (std::size_t i = 0; i < n_vertices; ++i) {
    for (auto& x : row)
      if (!(in >> x)) throw fail("truncated vertex data");
    data.mesh.vertices[i] = {row[col["x"]], row[col["y"]], row[col["z"]]};
    if (has_normals) data.mesh.normals[i] = {row[col["nx"]], row[col["ny"]], row[col["nz"]]};
    if (has_quality) (*data.quality)[i] = row[col["quality"]];
  }
  data.mesh.triangles.resize(n_faces);
  for (std::size_t f = 0; f < n_faces; ++f) {
    int count = 0;
    if (!(in >> count) || count != 3) throw fail("only triangles are supported");
    for (auto& v : data.mesh.triangles[f]) {
      long long idx = -1;
      if (!(in >> idx) || idx < 0 || static_cast<std::size_t>(idx) >= n_vertices) throw fail("bad face index");
      v = static_cast<std::uint32_t>(idx);
    }
  }
  if (!has_normals) data.mesh.compute_normals();
  return data;
}

inline PlyData read_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return parse_ply(in);
}

/// Icosphere around `center`, used for analytic test surfaces and coarse meshes.
inline SurfaceMesh make_icosphere(const Point3& center, double radius, int subdivisions) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                         {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  std::vector<Triangle> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                             {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (auto& p : v) p.normalize();
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> mid;
    auto midpoint = [&](std::uint32_t a, std::uint32_t b) {
      const auto key = std::minmax(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      v.push_back((v[a] + v[b]).normalized());
      const auto id = static_cast<std::uint32_t>(v.size() - 1);
      mid.emplace(key, id);
      return id;
    };
    std::vector<Triangle> next;
    next.reserve(f.size() * 4);
    for (const auto& tri : f) {
      const auto a = midpoint(tri[0], tri[1]), b = midpoint(tri[1], tri[2]), c = midpoint(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  SurfaceMesh mesh;
  mesh.triangles = std::move(f);
  mesh.vertices.reserve(v.size());
  mesh.normals.reserve(v.size());
  for (const auto& p : v) {
    mesh.vertices.push_back(center + radius * p);
    mesh.normals.push_back(p);
  }
  return mesh;
}

}  // namespace needleplan
