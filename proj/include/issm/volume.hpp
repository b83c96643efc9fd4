#pragma once

// Regular 3D scalar grids (images, masks, SDFs) with physical spacing and
// origin, plus the paired json+bin file format and basic resampling.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "issm/core.hpp"

namespace issm {

enum class VolumeKind { image, mask, sdf };

inline std::string to_string(VolumeKind k) {
  switch (k) {
    case VolumeKind::image: return "image";
    case VolumeKind::mask: return "mask";
    case VolumeKind::sdf: return "sdf";
  }
  return "image";
}

inline VolumeKind volume_kind_from_string(const std::string& s) {
  if (s == "image") return VolumeKind::image;
  if (s == "mask") return VolumeKind::mask;
  if (s == "sdf") return VolumeKind::sdf;
  throw ValidationError("unknown volume kind: " + s);
}

// Data is stored x-fastest: index = x + dims[0]*(y + dims[1]*z).
struct Volume {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm
  std::array<double, 3> origin{0.0, 0.0, 0.0};   // mm, center of voxel (0,0,0)
  VolumeKind kind = VolumeKind::image;
  std::vector<float> data;

  size_t voxel_count() const {
    return static_cast<size_t>(dims[0]) * static_cast<size_t>(dims[1]) *
           static_cast<size_t>(dims[2]);
  }
  size_t index(int x, int y, int z) const {
    return static_cast<size_t>(x) +
           static_cast<size_t>(dims[0]) * (static_cast<size_t>(y) + static_cast<size_t>(dims[1]) * static_cast<size_t>(z));
  }
  float& at(int x, int y, int z) { return data[index(x, y, z)]; }
  float at(int x, int y, int z) const { return data[index(x, y, z)]; }

  std::array<double, 3> voxel_center(int x, int y, int z) const {
    return {origin[0] + x * spacing[0], origin[1] + y * spacing[1], origin[2] + z * spacing[2]};
  }
  std::array<double, 3> physical_center() const {
    return {origin[0] + 0.5 * (dims[0] - 1) * spacing[0],
            origin[1] + 0.5 * (dims[1] - 1) * spacing[1],
            origin[2] + 0.5 * (dims[2] - 1) * spacing[2]};
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] <= 0) throw ValidationError("volume dims must be positive");
      if (!(spacing[a] > 0.0)) throw ValidationError("volume spacing must be positive");
    }
    if (data.size() != voxel_count())
      throw ValidationError("volume data length does not match dims");
    if (kind == VolumeKind::mask) {
      for (float v : data)
        if (v != 0.0f && v != 1.0f)
          throw ValidationError("mask voxels must be 0 or 1");
    }
  }
};

inline Volume make_volume(std::array<int, 3> dims, std::array<double, 3> spacing,
                          std::array<double, 3> origin, VolumeKind kind, float fill = 0.0f) {
  Volume v;
  v.dims = dims;
  v.spacing = spacing;
  v.origin = origin;
  v.kind = kind;
  v.data.assign(static_cast<size_t>(dims[0]) * dims[1] * dims[2], fill);
  return v;
}

// An SDF grid plus the half-width (mm) of the band where values are trusted.
// Sign convention: negative inside, positive outside.
struct VoxelSdf {
  Volume vol;
  double band_mm = 0.0;
};

// ---------------------------------------------------------------------------
// File pair I/O: <stem>.json header + <stem>.bin little-endian f32 blob.
// Round-trips bit-exactly; writes are temp+rename atomic.
// ---------------------------------------------------------------------------

inline void save_volume(const Volume& v, const std::string& stem) {
  v.validate();
  nlohmann::json h;
  h["dims"] = {v.dims[0], v.dims[1], v.dims[2]};
  h["spacing_mm"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
  h["origin_mm"] = {v.origin[0], v.origin[1], v.origin[2]};
  h["kind"] = to_string(v.kind);
  h["dtype"] = "f32le";
  h["order"] = "x-fastest";
  // Blob first so a readable header implies a complete blob.
  static_assert(sizeof(float) == 4);
  write_file_atomic(stem + ".bin", v.data.data(), v.data.size() * sizeof(float));
  write_file_atomic(stem + ".json", h.dump(2) + "\n");
}

inline Volume load_volume(const std::string& stem) {
  nlohmann::json h;
  {
    std::ifstream f(stem + ".json");
    if (!f) throw std::runtime_error("missing volume header: " + stem + ".json");
    f >> h;
  }
  Volume v;
  try {
    auto d = h.at("dims");
    auto s = h.at("spacing_mm");
    auto o = h.at("origin_mm");
    for (int a = 0; a < 3; ++a) {
      v.dims[a] = d.at(a).get<int>();
      v.spacing[a] = s.at(a).get<double>();
      v.origin[a] = o.at(a).get<double>();
    }
    v.kind = volume_kind_from_string(h.at("kind").get<std::string>());
    if (h.at("dtype").get<std::string>() != "f32le")
      throw ValidationError("unknown dtype: " + h.at("dtype").get<std::string>());
    if (h.at("order").get<std::string>() != "x-fastest")
      throw ValidationError("unknown order: " + h.at("order").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed volume header: ") + e.what());
  }
  auto blob = read_file_bytes(stem + ".bin");
  if (blob.size() != v.voxel_count() * sizeof(float))
    throw ValidationError("volume blob size mismatch for " + stem + ": header expects " +
                          std::to_string(v.voxel_count() * sizeof(float)) + " bytes, got " +
                          std::to_string(blob.size()));
  v.data.resize(v.voxel_count());
  std::memcpy(v.data.data(), blob.data(), blob.size());
  v.validate();
  return v;
}

// ---------------------------------------------------------------------------
// Pointwise and resampling operations.
// ---------------------------------------------------------------------------

inline Volume clip_intensities(const Volume& v, double lo, double hi) {
  if (v.kind != VolumeKind::image) throw ValidationError("clip_intensities expects an image");
  if (!(lo < hi)) throw ValidationError("clip range requires lo < hi");
  Volume out = v;
  for (float& x : out.data)
    x = static_cast<float>(std::min(hi, std::max(lo, static_cast<double>(x))));
  return out;
}

// Trilinear sample at physical position (mm); out-of-grid returns `fill`.
inline double sample_trilinear(const Volume& v, double px, double py, double pz, double fill) {
  double fx = (px - v.origin[0]) / v.spacing[0];
  double fy = (py - v.origin[1]) / v.spacing[1];
  double fz = (pz - v.origin[2]) / v.spacing[2];
  if (fx < 0 || fy < 0 || fz < 0 || fx > v.dims[0] - 1 || fy > v.dims[1] - 1 || fz > v.dims[2] - 1)
    return fill;
  int x0 = std::min(static_cast<int>(fx), v.dims[0] - 2);
  int y0 = std::min(static_cast<int>(fy), v.dims[1] - 2);
  int z0 = std::min(static_cast<int>(fz), v.dims[2] - 2);
  if (v.dims[0] == 1) x0 = 0;
  if (v.dims[1] == 1) y0 = 0;
  if (v.dims[2] == 1) z0 = 0;
  double tx = v.dims[0] == 1 ? 0.0 : fx - x0;
  double ty = v.dims[1] == 1 ? 0.0 : fy - y0;
  double tz = v.dims[2] == 1 ? 0.0 : fz - z0;
  int x1 = std::min(x0 + 1, v.dims[0] - 1);
  int y1 = std::min(y0 + 1, v.dims[1] - 1);
  int z1 = std::min(z0 + 1, v.dims[2] - 1);
  auto val = [&](int x, int y, int z) { return static_cast<double>(v.at(x, y, z)); };
  double c00 = val(x0, y0, z0) * (1 - tx) + val(x1, y0, z0) * tx;
  double c10 = val(x0, y1, z0) * (1 - tx) + val(x1, y1, z0) * tx;
  double c01 = val(x0, y0, z1) * (1 - tx) + val(x1, y0, z1) * tx;
  double c11 = val(x0, y1, z1) * (1 - tx) + val(x1, y1, z1) * tx;
  double c0 = c00 * (1 - ty) + c10 * ty;
  double c1 = c01 * (1 - ty) + c11 * ty;
  return c0 * (1 - tz) + c1 * tz;
}

// Resample onto a new grid (trilinear). Used for the coarse pose stage and
// for per-shape crops.
inline Volume resample(const Volume& v, std::array<int, 3> dims, std::array<double, 3> spacing,
                       std::array<double, 3> origin, double fill) {
  Volume out = make_volume(dims, spacing, origin, v.kind);
  parallel_for(0, dims[2], [&](int64_t z) {
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        auto p = out.voxel_center(static_cast<int>(x), y, static_cast<int>(z));
        out.at(x, y, static_cast<int>(z)) =
            static_cast<float>(sample_trilinear(v, p[0], p[1], p[2], fill));
      }
  });
  return out;
}

// Separable Gaussian smoothing; sigma in voxels per axis, zero padding.
inline Volume gaussian_smooth(const Volume& v, double sigma_voxels) {
  if (sigma_voxels <= 0.0) return v;
  int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_voxels)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma_voxels * sigma_voxels));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  Volume cur = v;
  cur.kind = VolumeKind::image;
  Volume next = cur;
  const auto [nx, ny, nz] = v.dims;
  for (int axis = 0; axis < 3; ++axis) {
    const int n[3] = {nx, ny, nz};
    parallel_for(0, nz, [&](int64_t z) {
      for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
          int idx[3] = {x, y, static_cast<int>(z)};
          double acc = 0.0;
          for (int k = -radius; k <= radius; ++k) {
            int j[3] = {idx[0], idx[1], idx[2]};
            j[axis] += k;
            if (j[axis] < 0 || j[axis] >= n[axis]) continue;  // zero outside
            acc += kernel[k + radius] * cur.at(j[0], j[1], j[2]);
          }
          next.at(x, y, static_cast<int>(z)) = static_cast<float>(acc);
        }
    });
    std::swap(cur, next);
  }
  return cur;
}

inline bool mask_empty(const Volume& m) {
  for (float v : m.data)
    if (v != 0.0f) return false;
  return true;
}

inline bool mask_full(const Volume& m) {
  for (float v : m.data)
    if (v == 0.0f) return false;
  return true;
}

}  // namespace issm
