#pragma once

// Coordinate/SDF training pairs: canonical-space sampling from meshes
// (nearest-triangle distance, winding-number sign) and pixel-space sampling
// from voxel SDFs, plus the sidecar+binary sample file format.

#include <algorithm>
#include <random>

#include "issm/distance.hpp"
#include "issm/mesh.hpp"

namespace issm {

// ---------------------------------------------------------------------------
// Signed distance to a triangle mesh.
// ---------------------------------------------------------------------------

namespace detail {

inline double point_triangle_dist2(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Ericson-style region test
  Vec3 ab = b - a, ac = c - a, ap = p - a;
  double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return ap.squaredNorm();
  Vec3 bp = p - b;
  double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return bp.squaredNorm();
  double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    double v = d1 / (d1 - d3);
    return (ap - v * ab).squaredNorm();
  }
  Vec3 cp = p - c;
  double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return cp.squaredNorm();
  double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    double w = d2 / (d2 - d6);
    return (ap - w * ac).squaredNorm();
  }
  double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return (bp - w * (c - b)).squaredNorm();
  }
  double denom = 1.0 / (va + vb + vc);
  double v = vb * denom, w = vc * denom;
  return (p - (a + v * ab + w * ac)).squaredNorm();
}

struct BvhNode {
  Vec3 lo, hi;
  int left = -1, right = -1;   // child nodes, or
  int first = 0, count = 0;    // leaf triangle range
};

}  // namespace detail

class MeshDistanceField {
 public:
  explicit MeshDistanceField(const Mesh& mesh) : mesh_(mesh) {
    mesh_.validate();
    if (mesh_.faces.empty()) throw ValidationError("MeshDistanceField: empty mesh");
    order_.resize(mesh_.faces.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    build(0, static_cast<int>(order_.size()));
  }

  double distance(const Vec3& p) const { return std::sqrt(nearest2(p)); }

  // generalized winding number (solid-angle sum / 4pi)
  double winding_number(const Vec3& p) const {
    double acc = 0.0;
    for (const auto& f : mesh_.faces) {
      Vec3 a = mesh_.vertices[f[0]] - p;
      Vec3 b = mesh_.vertices[f[1]] - p;
      Vec3 c = mesh_.vertices[f[2]] - p;
      double la = a.norm(), lb = b.norm(), lc = c.norm();
      double det = a.dot(b.cross(c));
      double denom = la * lb * lc + a.dot(b) * lc + b.dot(c) * la + c.dot(a) * lb;
      acc += 2.0 * std::atan2(det, denom);
    }
    return acc / (4.0 * M_PI);
  }

  bool inside(const Vec3& p) const { return winding_number(p) > 0.5; }

  // negative inside, positive outside
  double signed_distance(const Vec3& p) const {
    return inside(p) ? -distance(p) : distance(p);
  }

  const Mesh& mesh() const { return mesh_; }

 private:
  int build(int first, int count) {
    detail::BvhNode node;
    node.lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    node.hi = -node.lo;
    for (int i = first; i < first + count; ++i) {
      for (int k = 0; k < 3; ++k) {
        const Vec3& v = mesh_.vertices[mesh_.faces[order_[i]][k]];
        node.lo = node.lo.cwiseMin(v);
        node.hi = node.hi.cwiseMax(v);
      }
    }
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    if (count <= 4) {
      nodes_[id].first = first;
      nodes_[id].count = count;
      return id;
    }
    Vec3 ext = node.hi - node.lo;
    int axis = 0;
    if (ext[1] > ext[0]) axis = 1;
    if (ext[2] > ext[axis]) axis = 2;
    auto tri_center = [&](int t) {
      const auto& f = mesh_.faces[t];
      return (mesh_.vertices[f[0]][axis] + mesh_.vertices[f[1]][axis] +
              mesh_.vertices[f[2]][axis]) / 3.0;
    };
    std::nth_element(order_.begin() + first, order_.begin() + first + count / 2,
                     order_.begin() + first + count,
                     [&](int a, int b) { return tri_center(a) < tri_center(b); });
    int mid = count / 2;
    int l = build(first, mid);
    int r = build(first + mid, count - mid);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  static double box_dist2(const detail::BvhNode& n, const Vec3& p) {
    double d2 = 0.0;
    for (int k = 0; k < 3; ++k) {
      double d = std::max({n.lo[k] - p[k], 0.0, p[k] - n.hi[k]});
      d2 += d * d;
    }
    return d2;
  }

  double nearest2(const Vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    int stack[64];
    int top = 0;
    stack[top++] = 0;
    while (top > 0) {
      const auto& node = nodes_[stack[--top]];
      if (box_dist2(node, p) >= best) continue;
      if (node.left < 0) {
        for (int i = node.first; i < node.first + node.count; ++i) {
          const auto& f = mesh_.faces[order_[i]];
          best = std::min(best, detail::point_triangle_dist2(p, mesh_.vertices[f[0]],
                                                             mesh_.vertices[f[1]],
                                                             mesh_.vertices[f[2]]));
        }
      } else {
        double dl = box_dist2(nodes_[node.left], p);
        double dr = box_dist2(nodes_[node.right], p);
        // near child last so it pops first
        if (dl < dr) {
          if (dr < best) stack[top++] = node.right;
          if (dl < best) stack[top++] = node.left;
        } else {
          if (dl < best) stack[top++] = node.left;
          if (dr < best) stack[top++] = node.right;
        }
      }
    }
    return best;
  }

  Mesh mesh_;
  std::vector<int> order_;
  std::vector<detail::BvhNode> nodes_;
};

// Winding-number voxelization (test/evaluation helper).
inline Volume voxelize_mesh(const Mesh& mesh, std::array<int, 3> dims,
                            std::array<double, 3> spacing, std::array<double, 3> origin) {
  MeshDistanceField field(mesh);
  Volume out = make_volume(dims, spacing, origin, VolumeKind::mask);
  parallel_for(0, dims[2], [&](int64_t z) {
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        auto p = out.voxel_center(x, y, static_cast<int>(z));
        out.at(x, y, static_cast<int>(z)) = field.inside(Vec3(p[0], p[1], p[2])) ? 1.0f : 0.0f;
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Sample sets
// ---------------------------------------------------------------------------

enum class SampleFrame { canonical, pixel_mm };

struct SdfSample {
  Vec3 x;
  double value;
};

struct SdfSampleSet {
  SampleFrame frame = SampleFrame::canonical;
  std::string shape_id;
  uint64_t seed = 0;
  std::vector<SdfSample> pairs;
};

// Canonical SDF values are stored scaled into [-1,1]: true distances in the
// unit sphere are bounded by the diameter 2, so stored = distance / 2.
constexpr double kCanonicalValueScale = 0.5;
// Surface jitter: Gaussian std, 0.1 or 0.01 with equal probability.
constexpr double kJitterSigmas[2] = {0.1, 0.01};

// 20% uniform in the unit sphere, 80% surface points with Gaussian jitter.
inline SdfSampleSet sample_canonical_pairs(const Mesh& mesh, const std::string& shape_id, int n,
                                           uint64_t rng_seed) {
  if (mesh.frame != MeshFrame::canonical)
    throw ValidationError("sample_canonical_pairs: mesh must be canonical");
  if (!is_watertight(mesh))
    throw ValidationError("sample_canonical_pairs: open mesh, sign undefined");
  if (n <= 0) throw ValidationError("sample_canonical_pairs: n must be positive");

  MeshDistanceField field(mesh);
  auto rng = seeded_rng(rng_seed, shape_id);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const int n_uniform = static_cast<int>(std::round(0.2 * n));
  const int n_surface = n - n_uniform;

  // area-weighted triangle CDF
  std::vector<double> cdf(mesh.faces.size());
  double acc = 0.0;
  for (size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& fc = mesh.faces[f];
    acc += 0.5 * (mesh.vertices[fc[1]] - mesh.vertices[fc[0]])
                     .cross(mesh.vertices[fc[2]] - mesh.vertices[fc[0]])
                     .norm();
    cdf[f] = acc;
  }
  if (acc <= 0.0) throw ValidationError("sample_canonical_pairs: degenerate mesh");

  SdfSampleSet out;
  out.frame = SampleFrame::canonical;
  out.shape_id = shape_id;
  out.seed = rng_seed;
  out.pairs.reserve(n);

  for (int i = 0; i < n_uniform; ++i) {
    Vec3 dir(gauss(rng), gauss(rng), gauss(rng));
    double nrm = dir.norm();
    if (nrm < 1e-12) {
      --i;
      continue;
    }
    double r = std::cbrt(u01(rng));
    Vec3 p = dir / nrm * r;
    out.pairs.push_back({p, field.signed_distance(p) * kCanonicalValueScale});
  }
  for (int i = 0; i < n_surface; ++i) {
    double pick = u01(rng) * acc;
    size_t f = std::lower_bound(cdf.begin(), cdf.end(), pick) - cdf.begin();
    if (f >= mesh.faces.size()) f = mesh.faces.size() - 1;
    const auto& fc = mesh.faces[f];
    double r1 = std::sqrt(u01(rng)), r2 = u01(rng);
    Vec3 p = (1.0 - r1) * mesh.vertices[fc[0]] + r1 * (1.0 - r2) * mesh.vertices[fc[1]] +
             r1 * r2 * mesh.vertices[fc[2]];
    const double sigma = kJitterSigmas[u01(rng) < 0.5 ? 0 : 1];
    Vec3 q;
    do {
      q = p + sigma * Vec3(gauss(rng), gauss(rng), gauss(rng));
    } while (q.norm() > 1.5);
    out.pairs.push_back({q, field.signed_distance(q) * kCanonicalValueScale});
  }
  return out;
}

// Pixel-space pairs at voxel centers: the core drawn uniformly from the
// |value| <= band shell (half positive, half negative), plus ~10% extra of
// each sign drawn over the whole positive/negative regions.
inline SdfSampleSet sample_image_pairs(const VoxelSdf& sdf, const std::string& shape_id, int n,
                                       uint64_t rng_seed) {
  if (n <= 0) throw ValidationError("sample_image_pairs: n must be positive");
  const Volume& v = sdf.vol;
  if (v.kind != VolumeKind::sdf) throw ValidationError("sample_image_pairs: expects an sdf");
  const double band = sdf.band_mm;

  std::vector<int64_t> band_pos, band_neg, all_pos, all_neg;
  for (int64_t i = 0; i < static_cast<int64_t>(v.data.size()); ++i) {
    float val = v.data[i];
    if (val > 0.0f) {
      all_pos.push_back(i);
      if (val <= band) band_pos.push_back(i);
    } else if (val < 0.0f) {
      all_neg.push_back(i);
      if (-val <= band) band_neg.push_back(i);
    } else {
      band_neg.push_back(i);  // zero counted as surface/inside
      all_neg.push_back(i);
    }
  }
  if (band_pos.empty() || band_neg.empty() || all_pos.empty() || all_neg.empty())
    throw ValidationError("sample_image_pairs: band contains no voxels of one sign");
  if (band_pos.size() == all_pos.size() && band_neg.size() == all_neg.size())
    throw ValidationError("sample_image_pairs: band covers the whole SDF, no far-field voxels");

  const int extra_each = static_cast<int>(std::round(n / 12.0));
  const int core = n - 2 * extra_each;
  const int core_pos = core / 2;
  const int core_neg = core - core_pos;

  auto rng = seeded_rng(rng_seed, shape_id);
  SdfSampleSet out;
  out.frame = SampleFrame::pixel_mm;
  out.shape_id = shape_id;
  out.seed = rng_seed;
  out.pairs.reserve(n);

  auto draw_from = [&](const std::vector<int64_t>& list, int count) {
    std::uniform_int_distribution<size_t> pick(0, list.size() - 1);
    for (int i = 0; i < count; ++i) {
      int64_t idx = list[pick(rng)];
      int x = static_cast<int>(idx % v.dims[0]);
      int y = static_cast<int>((idx / v.dims[0]) % v.dims[1]);
      int z = static_cast<int>(idx / (static_cast<int64_t>(v.dims[0]) * v.dims[1]));
      auto c = v.voxel_center(x, y, z);
      out.pairs.push_back({Vec3(c[0], c[1], c[2]), v.data[idx]});
    }
  };
  draw_from(band_pos, core_pos);
  draw_from(band_neg, core_neg);
  draw_from(all_pos, extra_each);
  draw_from(all_neg, extra_each);
  return out;
}

// ---------------------------------------------------------------------------
// Sample file pair: <stem>.json sidecar + <stem>.bin (x,y,z,s) f32 quads.
// ---------------------------------------------------------------------------

inline void save_samples(const SdfSampleSet& set, const std::string& stem) {
  nlohmann::json j;
  j["frame"] = set.frame == SampleFrame::canonical ? "canonical" : "pixel-mm";
  j["shape_id"] = set.shape_id;
  j["count"] = set.pairs.size();
  j["seed"] = set.seed;
  if (set.frame == SampleFrame::canonical) {
    j["jitter_model"] = "gaussian-std";
    j["jitter_sigmas"] = {kJitterSigmas[0], kJitterSigmas[1]};
    j["value_scale"] = kCanonicalValueScale;
  }
  std::vector<float> quads;
  quads.reserve(set.pairs.size() * 4);
  for (const auto& p : set.pairs) {
    quads.push_back(static_cast<float>(p.x[0]));
    quads.push_back(static_cast<float>(p.x[1]));
    quads.push_back(static_cast<float>(p.x[2]));
    quads.push_back(static_cast<float>(p.value));
  }
  write_file_atomic(stem + ".bin", quads.data(), quads.size() * sizeof(float));
  write_file_atomic(stem + ".json", j.dump(2) + "\n");
}

inline SdfSampleSet load_samples(const std::string& stem) {
  nlohmann::json j;
  {
    std::ifstream f(stem + ".json");
    if (!f) throw std::runtime_error("missing sample sidecar: " + stem + ".json");
    f >> j;
  }
  SdfSampleSet set;
  const std::string frame = j.at("frame").get<std::string>();
  set.frame = frame == "canonical" ? SampleFrame::canonical : SampleFrame::pixel_mm;
  set.shape_id = j.at("shape_id").get<std::string>();
  set.seed = j.at("seed").get<uint64_t>();
  auto blob = read_file_bytes(stem + ".bin");
  const size_t count = j.at("count").get<size_t>();
  if (blob.size() != count * 4 * sizeof(float))
    throw ValidationError("sample blob size mismatch for " + stem);
  const float* q = reinterpret_cast<const float*>(blob.data());
  set.pairs.resize(count);
  for (size_t i = 0; i < count; ++i) {
    set.pairs[i].x = Vec3(q[4 * i], q[4 * i + 1], q[4 * i + 2]);
    set.pairs[i].value = q[4 * i + 3];
  }
  return set;
}

}  // namespace issm
