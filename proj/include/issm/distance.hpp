#pragma once

// Distance machinery on voxel grids: exact signed Euclidean distance
// transforms (voxel-center metric, anisotropic spacing) and eikonal
// reinitialization by first-order fast marching.

#include <cmath>
#include <limits>
#include <queue>
#include <vector>

#include "issm/volume.hpp"

namespace issm {

namespace detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Felzenszwalb-Huttenlocher lower envelope pass along one axis.
// f holds squared distances at sample positions i*h; returns the exact
// min_j ((i-j)*h)^2 + f[j].
inline void edt_1d(std::vector<double>& f, double h, std::vector<double>& d,
                   std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  d.assign(n, kInf);
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  const double h2 = h * h;
  for (int q = 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (f[v[0]] == kInf) {
      v[0] = q;
      continue;
    }
    double s;
    while (true) {
      int p = v[k];
      s = ((f[q] + h2 * q * q) - (f[p] + h2 * p * p)) / (2.0 * h2 * (q - p));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (f[v[0]] == kInf) {
    for (int q = 0; q < n; ++q) d[q] = kInf;
    return;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    double dq = (q - v[k]) * h;
    d[q] = dq * dq + f[v[k]];
  }
  f = d;
}

// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
// site voxel center. `site` flags which voxels are sites.
inline std::vector<double> edt_squared(const Volume& grid, const std::vector<char>& site) {
  const int nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];
  std::vector<double> dist(grid.voxel_count());
  for (size_t i = 0; i < dist.size(); ++i) dist[i] = site[i] ? 0.0 : kInf;

  // x pass
  parallel_for(0, static_cast<int64_t>(ny) * nz, [&](int64_t yz) {
    int y = static_cast<int>(yz % ny), z = static_cast<int>(yz / ny);
    std::vector<double> f(nx), d;
    std::vector<int> v;
    std::vector<double> zz;
    for (int x = 0; x < nx; ++x) f[x] = dist[grid.index(x, y, z)];
    edt_1d(f, grid.spacing[0], d, v, zz);
    for (int x = 0; x < nx; ++x) dist[grid.index(x, y, z)] = f[x];
  });
  // y pass
  parallel_for(0, static_cast<int64_t>(nx) * nz, [&](int64_t xz) {
    int x = static_cast<int>(xz % nx), z = static_cast<int>(xz / nx);
    std::vector<double> f(ny), d;
    std::vector<int> v;
    std::vector<double> zz;
    for (int y = 0; y < ny; ++y) f[y] = dist[grid.index(x, y, z)];
    edt_1d(f, grid.spacing[1], d, v, zz);
    for (int y = 0; y < ny; ++y) dist[grid.index(x, y, z)] = f[y];
  });
  // z pass
  parallel_for(0, static_cast<int64_t>(nx) * ny, [&](int64_t xy) {
    int x = static_cast<int>(xy % nx), y = static_cast<int>(xy / nx);
    std::vector<double> f(nz), d;
    std::vector<int> v;
    std::vector<double> zz;
    for (int z = 0; z < nz; ++z) f[z] = dist[grid.index(x, y, z)];
    edt_1d(f, grid.spacing[2], d, v, zz);
    for (int z = 0; z < nz; ++z) dist[grid.index(x, y, z)] = f[z];
  });
  return dist;
}

}  // namespace detail

// Signed Euclidean distance between voxel centers, in mm: negative at
// foreground voxels (distance to nearest background center), positive at
// background voxels (distance to nearest foreground center).
inline VoxelSdf mask_to_sdf(const Volume& mask, double band_mm = 13.0) {
  mask.validate();
  if (mask.kind != VolumeKind::mask) throw ValidationError("mask_to_sdf expects a mask volume");
  if (mask_empty(mask)) throw ValidationError("mask_to_sdf: empty mask");
  if (mask_full(mask)) throw ValidationError("mask_to_sdf: all-foreground mask");

  std::vector<char> fg(mask.voxel_count()), bg(mask.voxel_count());
  for (size_t i = 0; i < mask.data.size(); ++i) {
    fg[i] = mask.data[i] != 0.0f;
    bg[i] = !fg[i];
  }
  auto d_to_bg = detail::edt_squared(mask, bg);
  auto d_to_fg = detail::edt_squared(mask, fg);

  VoxelSdf out;
  out.vol = mask;
  out.vol.kind = VolumeKind::sdf;
  out.band_mm = band_mm;
  for (size_t i = 0; i < mask.data.size(); ++i) {
    out.vol.data[i] = fg[i] ? static_cast<float>(-std::sqrt(d_to_bg[i]))
                            : static_cast<float>(std::sqrt(d_to_fg[i]));
  }
  return out;
}

// Threshold an SDF back to a mask (negative -> foreground).
inline Volume sdf_to_mask(const Volume& sdf) {
  Volume m = sdf;
  m.kind = VolumeKind::mask;
  for (float& v : m.data) v = v < 0.0f ? 1.0f : 0.0f;
  return m;
}

namespace detail {

// Solve sum_k max(0, (u - a_k)/h_k)^2 = 1 for the upwind update u.
inline double eikonal_update(const double* a, const double* h, int n) {
  // candidates sorted ascending by value
  int order[3] = {0, 1, 2};
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (a[order[j]] < a[order[i]]) std::swap(order[i], order[j]);
  double u = a[order[0]] + h[order[0]];
  for (int m = 2; m <= n; ++m) {
    if (u <= a[order[m - 1]]) break;
    // quadratic in u over the first m terms
    double A = 0.0, B = 0.0, C = -1.0;
    for (int i = 0; i < m; ++i) {
      double w = 1.0 / (h[order[i]] * h[order[i]]);
      A += w;
      B += -2.0 * a[order[i]] * w;
      C += a[order[i]] * a[order[i]] * w;
    }
    double disc = B * B - 4.0 * A * C;
    if (disc < 0.0) break;
    double cand = (-B + std::sqrt(disc)) / (2.0 * A);
    if (cand >= a[order[m - 1]]) u = cand;
  }
  return u;
}

}  // namespace detail

// First-order fast marching reinitialization. The zero crossing of the input
// is located by linear interpolation along grid edges and preserved; the
// output satisfies the unit-gradient (eikonal) property away from it. Signs
// follow the input voxel signs.
inline VoxelSdf reinitialize_sdf(const VoxelSdf& in) {
  const Volume& s = in.vol;
  if (s.kind != VolumeKind::sdf) throw ValidationError("reinitialize_sdf expects an sdf volume");
  const int nx = s.dims[0], ny = s.dims[1], nz = s.dims[2];
  const size_t n = s.voxel_count();

  enum : char { FAR = 0, NARROW = 1, DONE = 2 };
  std::vector<char> state(n, FAR);
  std::vector<double> dist(n, detail::kInf);

  const int step[3] = {1, s.dims[0], s.dims[0] * s.dims[1]};
  bool any_crossing = false;

  // Seed voxels adjacent to a sign change with the interpolated edge
  // distances, combined across axes as an inverse-square sum.
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        size_t i = s.index(x, y, z);
        double si = s.data[i];
        if (si == 0.0) {
          dist[i] = 0.0;
          state[i] = DONE;
          any_crossing = true;
          continue;
        }
        double inv2 = 0.0;
        const int c[3] = {x, y, z};
        const int nd[3] = {nx, ny, nz};
        for (int a = 0; a < 3; ++a) {
          double axis_d = detail::kInf;
          for (int dir = -1; dir <= 1; dir += 2) {
            int q = c[a] + dir;
            if (q < 0 || q >= nd[a]) continue;
            double sj = s.data[i + dir * step[a]];
            if (si * sj < 0.0) {
              double d = s.spacing[a] * std::abs(si) / (std::abs(si) + std::abs(sj));
              axis_d = std::min(axis_d, d);
            }
          }
          if (axis_d < detail::kInf) inv2 += 1.0 / (axis_d * axis_d);
        }
        if (inv2 > 0.0) {
          dist[i] = 1.0 / std::sqrt(inv2);
          state[i] = DONE;
          any_crossing = true;
        }
      }
  if (!any_crossing) throw ValidationError("reinitialize_sdf: input has no zero crossing");

  using HeapItem = std::pair<double, size_t>;
  std::priority_queue<HeapItem, std::vector<HeapItem>, std::greater<HeapItem>> heap;

  auto relax = [&](int x, int y, int z) {
    size_t i = s.index(x, y, z);
    if (state[i] == DONE) return;
    double a[3], h[3];
    int m = 0;
    const int c[3] = {x, y, z};
    const int nd[3] = {nx, ny, nz};
    for (int axis = 0; axis < 3; ++axis) {
      double best = detail::kInf;
      for (int dir = -1; dir <= 1; dir += 2) {
        int q = c[axis] + dir;
        if (q < 0 || q >= nd[axis]) continue;
        size_t j = i + dir * step[axis];
        if (state[j] == DONE) best = std::min(best, dist[j]);
      }
      if (best < detail::kInf) {
        a[m] = best;
        h[m] = s.spacing[axis];
        ++m;
      }
    }
    if (m == 0) return;
    double u = detail::eikonal_update(a, h, m);
    if (u < dist[i]) {
      dist[i] = u;
      state[i] = NARROW;
      heap.emplace(u, i);
    }
  };

  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x)
        if (state[s.index(x, y, z)] == DONE) {
          if (x > 0) relax(x - 1, y, z);
          if (x + 1 < nx) relax(x + 1, y, z);
          if (y > 0) relax(x, y - 1, z);
          if (y + 1 < ny) relax(x, y + 1, z);
          if (z > 0) relax(x, y, z - 1);
          if (z + 1 < nz) relax(x, y, z + 1);
        }

  while (!heap.empty()) {
    auto [d, i] = heap.top();
    heap.pop();
    if (state[i] == DONE) continue;
    state[i] = DONE;
    int x = static_cast<int>(i % nx);
    int y = static_cast<int>((i / nx) % ny);
    int z = static_cast<int>(i / (static_cast<size_t>(nx) * ny));
    if (x > 0) relax(x - 1, y, z);
    if (x + 1 < nx) relax(x + 1, y, z);
    if (y > 0) relax(x, y - 1, z);
    if (y + 1 < ny) relax(x, y + 1, z);
    if (z > 0) relax(x, y, z - 1);
    if (z + 1 < nz) relax(x, y, z + 1);
  }

  VoxelSdf out;
  out.vol = s;
  out.band_mm = in.band_mm;
  for (size_t i = 0; i < n; ++i) {
    double sign = s.data[i] < 0.0f ? -1.0 : (s.data[i] > 0.0f ? 1.0 : 0.0);
    out.vol.data[i] = static_cast<float>(sign * dist[i]);
  }
  return out;
}

// Mean | ||grad s|| - 1 | over voxels with |s| <= band (central differences,
// interior voxels only). Diagnostic for the eikonal property.
inline double mean_gradient_norm_error(const VoxelSdf& sdf, double band_mm) {
  const Volume& s = sdf.vol;
  double acc = 0.0;
  int64_t count = 0;
  for (int z = 1; z + 1 < s.dims[2]; ++z)
    for (int y = 1; y + 1 < s.dims[1]; ++y)
      for (int x = 1; x + 1 < s.dims[0]; ++x) {
        double v = s.at(x, y, z);
        if (std::abs(v) > band_mm) continue;
        double gx = (s.at(x + 1, y, z) - s.at(x - 1, y, z)) / (2.0 * s.spacing[0]);
        double gy = (s.at(x, y + 1, z) - s.at(x, y - 1, z)) / (2.0 * s.spacing[1]);
        double gz = (s.at(x, y, z + 1) - s.at(x, y, z - 1)) / (2.0 * s.spacing[2]);
        acc += std::abs(std::sqrt(gx * gx + gy * gy + gz * gz) - 1.0);
        ++count;
      }
  if (count == 0) return 0.0;
  return acc / static_cast<double>(count);
}

}  // namespace issm
