#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "needleplan/volume.hpp"

namespace needleplan {

/// Binary segmentation sharing a volume's lattice.
class Mask {
 public:
  Mask() = default;
  explicit Mask(Grid grid) : grid_(std::move(grid)), bits_(grid_.voxel_count(), 0) {}
  Mask(Grid grid, std::vector<std::uint8_t> bits) : grid_(std::move(grid)), bits_(std::move(bits)) {
    if (bits_.size() != grid_.voxel_count()) throw Error(ErrorCode::DimensionMismatch, "mask size mismatch");
    for (auto& b : bits_) b = b ? 1 : 0;
  }

  [[nodiscard]] const Grid& grid() const noexcept { return grid_; }
  [[nodiscard]] std::size_t size() const noexcept { return bits_.size(); }
  [[nodiscard]] bool operator[](std::size_t n) const noexcept { return bits_[n] != 0; }
  [[nodiscard]] bool at(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept {
    return bits_[grid_.linear(i, j, k)] != 0;
  }
  [[nodiscard]] bool at(const VoxelIndex& v) const noexcept { return bits_[grid_.linear(v)] != 0; }
  /// Membership with everything outside the lattice treated as unset.
  [[nodiscard]] bool at_or_false(const VoxelIndex& v) const noexcept { return grid_.contains(v) && at(v); }
  void set(std::size_t n, bool value) noexcept { bits_[n] = value ? 1 : 0; }
  void set(const VoxelIndex& v, bool value) noexcept { bits_[grid_.linear(v)] = value ? 1 : 0; }

  [[nodiscard]] std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }
  [[nodiscard]] bool empty() const noexcept { return count() == 0; }
  [[nodiscard]] const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  friend bool operator==(const Mask& a, const Mask& b) { return a.grid_.same_geometry(b.grid_) && a.bits_ == b.bits_; }

 private:
  Grid grid_;
  std::vector<std::uint8_t> bits_;
};

inline Mask threshold(const Volume& v, HU t_hu) {
  std::vector<std::uint8_t> bits(v.grid().voxel_count());
  const auto vox = v.voxels();
  for (std::size_t n = 0; n < bits.size(); ++n) bits[n] = vox[n] >= t_hu ? 1 : 0;
  return {v.grid(), std::move(bits)};
}

inline Mask invert(const Mask& m) {
  std::vector<std::uint8_t> bits(m.bits());
  for (auto& b : bits) b = b ? 0 : 1;
  return {m.grid(), std::move(bits)};
}

/// Voxels in `mask` as a Volume of 0/1, for NRRD export.
inline Volume mask_to_volume(const Mask& m) {
  std::vector<HU> vox(m.size());
  for (std::size_t n = 0; n < vox.size(); ++n) vox[n] = m[n] ? 1 : 0;
  return {m.grid(), std::move(vox)};
}

enum class Connectivity { Six = 6, TwentySix = 26 };

/// Component labels in scan order: label 1 owns the smallest linear index, and so on.
struct Components {
  std::vector<std::int32_t> labels;   // 0 = background
  std::vector<std::size_t> sizes;     // sizes[l - 1]
  std::vector<std::size_t> first;     // smallest linear index of component l
  [[nodiscard]] std::size_t count() const noexcept { return sizes.size(); }
};

inline Components label_components(const Mask& m, Connectivity conn) {
  const Grid& g = m.grid();
  const std::int64_t nx = g.nx(), ny = g.ny(), nz = g.nz();
  Components out;
  out.labels.assign(m.size(), 0);

  std::vector<std::array<int, 3>> offsets;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (conn == Connectivity::Six && manhattan != 1) continue;
        offsets.push_back({dx, dy, dz});
      }

  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < m.size(); ++seed) {
    if (!m[seed] || out.labels[seed] != 0) continue;
    const auto label = static_cast<std::int32_t>(out.sizes.size() + 1);
    std::size_t size = 0;
    out.labels[seed] = label;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t n = stack.back();
      stack.pop_back();
      ++size;
      const auto idx = g.unlinear(n);
      for (const auto& o : offsets) {
        const std::int64_t i = idx.i + o[0], j = idx.j + o[1], k = idx.k + o[2];
        if (i < 0 || j < 0 || k < 0 || i >= nx || j >= ny || k >= nz) continue;
        const std::size_t q = g.linear(i, j, k);
        if (m[q] && out.labels[q] == 0) {
          out.labels[q] = label;
          stack.push_back(q);
        }
      }
    }
    out.sizes.push_back(size);
    out.first.push_back(seed);
  }
  return out;
}

/// Largest component; ties go to the component with the smallest linear voxel index.
inline Mask largest_component(const Mask& m, Connectivity conn = Connectivity::Six) {
  const Components c = label_components(m, conn);
  if (c.count() == 0) throw Error(ErrorCode::EmptyMask, "mask has no set voxels");
  std::size_t best = 0;
  for (std::size_t l = 1; l < c.count(); ++l)
    if (c.sizes[l] > c.sizes[best]) best = l;
  const auto keep = static_cast<std::int32_t>(best + 1);
  std::vector<std::uint8_t> bits(m.size());
  for (std::size_t n = 0; n < bits.size(); ++n) bits[n] = c.labels[n] == keep ? 1 : 0;
  return {m.grid(), std::move(bits)};
}

namespace detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// In-place 1D squared distance transform (lower envelope of parabolas) over
/// samples at positions i*step. Infinite entries never seed a parabola.
inline void distance_transform_1d(std::vector<double>& f, std::size_t n, double step, std::vector<double>& out,
                                  std::vector<std::size_t>& v, std::vector<double>& z) {
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double xq = static_cast<double>(q) * step;
    if (!any) {
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      k = 0;
      any = true;
      continue;
    }
    while (true) {
      const double xv = static_cast<double>(v[k]) * step;
      const double s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      if (s <= z[k]) {  // k == 0: new parabola dominates everything so far
        v[0] = q;
        z[0] = -kInf;
        z[1] = kInf;
        break;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kInf;
      break;
    }
  }
  if (!any) {
    for (std::size_t q = 0; q < n; ++q) out[q] = kInf;
    return;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double x = static_cast<double>(q) * step;
    while (z[k + 1] < x) ++k;
    const double d = (static_cast<double>(q) - static_cast<double>(v[k])) * step;
    out[q] = d * d + f[v[k]];
  }
}

/// Squared world distance (mm^2) from every voxel centre to the nearest voxel with seed[n] != 0.
inline std::vector<double> squared_distance_to(const Grid& g, const std::vector<std::uint8_t>& seed) {
  const std::int64_t nx = g.nx(), ny = g.ny(), nz = g.nz();
  std::vector<double> d(seed.size());
  for (std::size_t n = 0; n < seed.size(); ++n) d[n] = seed[n] ? 0.0 : kInf;
  const std::size_t longest = static_cast<std::size_t>(std::max({nx, ny, nz}));
  std::vector<double> line(longest), out(longest), z(longest + 1);
  std::vector<std::size_t> v(longest);
  const std::array<std::int64_t, 3> n_axis{nx, ny, nz};
  const std::array<std::int64_t, 3> stride{1, nx, nx * ny};
  for (int axis = 0; axis < 3; ++axis) {
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    const auto len = static_cast<std::size_t>(n_axis[axis]);
    for (std::int64_t u = 0; u < n_axis[a1]; ++u)
      for (std::int64_t w = 0; w < n_axis[a2]; ++w) {
        const std::int64_t base = u * stride[a1] + w * stride[a2];
        for (std::size_t q = 0; q < len; ++q) line[q] = d[static_cast<std::size_t>(base + q * stride[axis])];
        distance_transform_1d(line, len, g.spacing()[axis], out, v, z);
        for (std::size_t q = 0; q < len; ++q) d[static_cast<std::size_t>(base + q * stride[axis])] = out[q];
      }
  }
  return d;
}

/// Membership test for the world-metric ball used as structuring element.
inline bool within_ball(double squared_distance, double radius_mm) {
  const double r2 = radius_mm * radius_mm;
  return squared_distance <= r2 + 1e-9 * std::max(1.0, r2);
}

inline std::array<std::int64_t, 3> ball_extent(const Grid& g, double radius_mm) {
  std::array<std::int64_t, 3> e{};
  for (int a = 0; a < 3; ++a) e[a] = static_cast<std::int64_t>(std::floor(radius_mm / g.spacing()[a] + 1e-9));
  return e;
}

/// Copies `m` into a lattice enlarged by `pad` voxels per side.
inline Mask pad_mask(const Mask& m, const std::array<std::int64_t, 3>& pad) {
  const Grid& g = m.grid();
  const std::array<std::int64_t, 3> dims{g.nx() + 2 * pad[0], g.ny() + 2 * pad[1], g.nz() + 2 * pad[2]};
  const Grid pg(dims, g.spacing(),
                g.continuous_to_world(Vec3(-static_cast<double>(pad[0]), -static_cast<double>(pad[1]),
                                           -static_cast<double>(pad[2]))),
                g.direction());
  Mask out(pg);
  for (std::int64_t k = 0; k < g.nz(); ++k)
    for (std::int64_t j = 0; j < g.ny(); ++j)
      for (std::int64_t i = 0; i < g.nx(); ++i)
        if (m.at(i, j, k)) out.set(pg.linear(i + pad[0], j + pad[1], k + pad[2]), true);
  return out;
}

inline Mask crop_mask(const Mask& padded, const Grid& target, const std::array<std::int64_t, 3>& pad) {
  Mask out(target);
  const Grid& pg = padded.grid();
  for (std::int64_t k = 0; k < target.nz(); ++k)
    for (std::int64_t j = 0; j < target.ny(); ++j)
      for (std::int64_t i = 0; i < target.nx(); ++i)
        if (padded[pg.linear(i + pad[0], j + pad[1], k + pad[2])]) out.set(target.linear(i, j, k), true);
  return out;
}

inline Mask dilate_in_place_grid(const Mask& m, double radius_mm) {
  const auto d = squared_distance_to(m.grid(), m.bits());
  std::vector<std::uint8_t> bits(m.size());
  for (std::size_t n = 0; n < bits.size(); ++n) bits[n] = within_ball(d[n], radius_mm) ? 1 : 0;
  return {m.grid(), std::move(bits)};
}

inline Mask erode_in_place_grid(const Mask& m, double radius_mm) {
  std::vector<std::uint8_t> background(m.size());
  for (std::size_t n = 0; n < background.size(); ++n) background[n] = m[n] ? 0 : 1;
  const auto d = squared_distance_to(m.grid(), background);
  std::vector<std::uint8_t> bits(m.size());
  for (std::size_t n = 0; n < bits.size(); ++n) bits[n] = (m[n] && !within_ball(d[n], radius_mm)) ? 1 : 0;
  return {m.grid(), std::move(bits)};
}

}  // namespace detail

/// Dilation by the ball of `radius_mm` (world metric, anisotropic spacing respected).
/// Computed through an exact Euclidean distance transform.
inline Mask dilate(const Mask& m, double radius_mm) {
  if (radius_mm < 0.0) throw Error(ErrorCode::InvalidArgument, "radius must be non-negative");
  if (radius_mm == 0.0) return m;
  return detail::dilate_in_place_grid(m, radius_mm);
}

/// Erosion by the same ball; voxels outside the lattice count as unset.
inline Mask erode(const Mask& m, double radius_mm) {
  if (radius_mm < 0.0) throw Error(ErrorCode::InvalidArgument, "radius must be non-negative");
  if (radius_mm == 0.0) return m;
  auto pad = detail::ball_extent(m.grid(), radius_mm);
  for (auto& p : pad) p += 1;
  const Mask eroded = detail::erode_in_place_grid(detail::pad_mask(m, pad), radius_mm);
  return detail::crop_mask(eroded, m.grid(), pad);
}

/// Closing (dilation then erosion). Runs on a lattice padded by the ball
/// extent so structures touching the border are not eroded away.
inline Mask morph_close(const Mask& m, double radius_mm) {
  if (radius_mm < 0.0) throw Error(ErrorCode::InvalidArgument, "radius must be non-negative");
  if (radius_mm == 0.0) return m;
  auto pad = detail::ball_extent(m.grid(), radius_mm);
  for (auto& p : pad) p += 1;
  const Mask padded = detail::pad_mask(m, pad);
  const Mask closed = detail::erode_in_place_grid(detail::dilate_in_place_grid(padded, radius_mm), radius_mm);
  return detail::crop_mask(closed, m.grid(), pad);
}

}  // namespace needleplan
