#pragma once

// Triangle meshes, marching-cubes extraction from voxel grids, canonical
// frames (the anchor-derived affine A), and ASCII OBJ import/export.

#include <Eigen/Dense>
#include <map>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "issm/pose.hpp"
#include "issm/volume.hpp"

namespace issm {

enum class MeshFrame { pixel_mm, canonical };

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  MeshFrame frame = MeshFrame::pixel_mm;

  void validate() const {
    for (const auto& f : faces)
      for (int i : f)
        if (i < 0 || i >= static_cast<int>(vertices.size()))
          throw ValidationError("mesh face index out of range");
  }

  Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& v : vertices) c += v;
    return vertices.empty() ? c : Vec3(c / static_cast<double>(vertices.size()));
  }

  double max_radius(const Vec3& about) const {
    double r = 0.0;
    for (const auto& v : vertices) r = std::max(r, (v - about).norm());
    return r;
  }

  double area() const {
    double a = 0.0;
    for (const auto& f : faces)
      a += 0.5 * (vertices[f[1]] - vertices[f[0]]).cross(vertices[f[2]] - vertices[f[0]]).norm();
    return a;
  }
};

// every edge incident to exactly two faces
inline bool is_watertight(const Mesh& m) {
  std::map<std::pair<int, int>, int> edge_count;
  for (const auto& f : m.faces)
    for (int i = 0; i < 3; ++i) {
      int a = f[i], b = f[(i + 1) % 3];
      edge_count[{std::min(a, b), std::max(a, b)}] += 1;
    }
  for (const auto& [e, c] : edge_count)
    if (c != 2) return false;
  return true;
}

inline int euler_characteristic(const Mesh& m) {
  std::set<std::pair<int, int>> edges;
  std::set<int> used;
  for (const auto& f : m.faces)
    for (int i = 0; i < 3; ++i) {
      int a = f[i], b = f[(i + 1) % 3];
      edges.insert({std::min(a, b), std::max(a, b)});
      used.insert(a);
    }
  return static_cast<int>(used.size()) - static_cast<int>(edges.size()) +
         static_cast<int>(m.faces.size());
}

inline int connected_components(const Mesh& m) {
  std::vector<int> parent(m.vertices.size());
  for (size_t i = 0; i < parent.size(); ++i) parent[i] = static_cast<int>(i);
  std::function<int(int)> find = [&](int a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (const auto& f : m.faces) {
    int a = find(f[0]);
    parent[find(f[1])] = a;
    parent[find(f[2])] = a;
  }
  std::set<int> roots;
  for (const auto& f : m.faces) roots.insert(find(f[0]));
  return static_cast<int>(roots.size());
}

// ---------------------------------------------------------------------------
// Marching cubes: standard 256-case lookup, built once at startup. For each
// corner-sign configuration the iso-crossing edges are linked into loops by
// walking the cube faces (ambiguous faces resolved by a fixed pairing rule
// that depends only on the face's corner signs, so neighboring cells always
// agree) and fan-triangulated.
// ---------------------------------------------------------------------------

namespace mc {

// corner i at ((i&1), (i>>1)&1, (i>>2)&1)
inline const int kEdgeCorners[12][2] = {
    {0, 1}, {2, 3}, {4, 5}, {6, 7},  // x edges
    {0, 2}, {1, 3}, {4, 6}, {5, 7},  // y edges
    {0, 4}, {1, 5}, {2, 6}, {3, 7},  // z edges
};

// faces as cyclic corner quads
inline const int kFaceCorners[6][4] = {
    {0, 2, 6, 4},  // x = 0
    {1, 5, 7, 3},  // x = 1
    {0, 4, 5, 1},  // y = 0
    {2, 3, 7, 6},  // y = 1
    {0, 1, 3, 2},  // z = 0
    {4, 6, 7, 5},  // z = 1
};

struct CaseTable {
  // per config: triangles as triples of edge ids, -1 terminated, max 5 tris
  int tri[256][34];
};

inline int edge_between(int a, int b) {
  for (int e = 0; e < 12; ++e) {
    if ((kEdgeCorners[e][0] == a && kEdgeCorners[e][1] == b) ||
        (kEdgeCorners[e][0] == b && kEdgeCorners[e][1] == a))
      return e;
  }
  return -1;
}

inline const CaseTable& case_table() {
  static const CaseTable table = [] {
    CaseTable t{};
    for (int cfg = 0; cfg < 256; ++cfg) {
      for (int i = 0; i < 34; ++i) t.tri[cfg][i] = -1;
      auto inside = [&](int c) { return (cfg >> c) & 1; };

      // per-face iso segments (pairs of cut edge ids)
      std::vector<std::array<int, 2>> segments;
      for (const auto& quad : kFaceCorners) {
        // crossings in cyclic order: entry = outside->inside
        std::vector<std::pair<int, bool>> crossings;  // (edge id, is_entry)
        for (int i = 0; i < 4; ++i) {
          int a = quad[i], b = quad[(i + 1) % 4];
          if (inside(a) != inside(b))
            crossings.push_back({edge_between(a, b), !inside(a)});
        }
        if (crossings.empty()) continue;
        // pair each entry with the next exit in cyclic order
        const int n = static_cast<int>(crossings.size());
        for (int i = 0; i < n; ++i) {
          if (!crossings[i].second) continue;  // want entries
          for (int k = 1; k <= n; ++k) {
            int j = (i + k) % n;
            if (!crossings[j].second) {
              segments.push_back({crossings[i].first, crossings[j].first});
              break;
            }
          }
        }
      }
      if (segments.empty()) continue;

      // trace closed loops through the segment graph
      std::vector<bool> used(segments.size(), false);
      std::vector<std::vector<int>> loops;
      for (size_t s0 = 0; s0 < segments.size(); ++s0) {
        if (used[s0]) continue;
        std::vector<int> loop;
        int cur_seg = static_cast<int>(s0);
        int enter_edge = segments[s0][0];
        while (true) {
          used[cur_seg] = true;
          int exit_edge =
              segments[cur_seg][0] == enter_edge ? segments[cur_seg][1] : segments[cur_seg][0];
          loop.push_back(enter_edge);
          if (exit_edge == segments[s0][0]) break;  // closed
          // find the unused segment touching exit_edge
          int next = -1;
          for (size_t k = 0; k < segments.size(); ++k) {
            if (used[k]) continue;
            if (segments[k][0] == exit_edge || segments[k][1] == exit_edge) {
              next = static_cast<int>(k);
              break;
            }
          }
          if (next < 0) break;  // should not happen: every cut edge has degree 2
          enter_edge = exit_edge;
          cur_seg = next;
        }
        if (loop.size() >= 3) loops.push_back(loop);
      }

      // orientation reference: outside-corner centroid minus inside centroid
      Vec3 ci = Vec3::Zero(), co = Vec3::Zero();
      int ni = 0, no = 0;
      for (int c = 0; c < 8; ++c) {
        Vec3 p(c & 1, (c >> 1) & 1, (c >> 2) & 1);
        if (inside(c)) {
          ci += p;
          ++ni;
        } else {
          co += p;
          ++no;
        }
      }
      Vec3 dir = co / std::max(1, no) - ci / std::max(1, ni);

      auto edge_mid = [&](int e) {
        int a = kEdgeCorners[e][0], b = kEdgeCorners[e][1];
        Vec3 pa(a & 1, (a >> 1) & 1, (a >> 2) & 1), pb(b & 1, (b >> 1) & 1, (b >> 2) & 1);
        return Vec3(0.5 * (pa + pb));
      };

      // two cut edges on a common (planar) cube face: a chord between them
      // would lie in that face and can collide with the neighbor cell's fan
      auto cofacial = [](int e1, int e2) {
        for (const auto& quad : kFaceCorners) {
          bool h1 = false, h2 = false;
          for (int i = 0; i < 4; ++i) {
            int eid = edge_between(quad[i], quad[(i + 1) % 4]);
            if (eid == e1) h1 = true;
            if (eid == e2) h2 = true;
          }
          if (h1 && h2) return true;
        }
        return false;
      };

      int w = 0;
      for (auto& loop : loops) {
        // polygon area vector decides the fan winding
        Vec3 area = Vec3::Zero();
        Vec3 p0 = edge_mid(loop[0]);
        for (size_t i = 1; i + 1 < loop.size(); ++i)
          area += (edge_mid(loop[i]) - p0).cross(edge_mid(loop[i + 1]) - p0);
        if (area.dot(dir) < 0.0) std::reverse(loop.begin(), loop.end());

        // rotate the loop so the fan apex has no co-facial chord
        const int len = static_cast<int>(loop.size());
        int apex = -1;
        for (int a = 0; a < len && apex < 0; ++a) {
          bool ok = true;
          for (int j = 2; j + 1 < len && ok; ++j)
            if (cofacial(loop[a], loop[(a + j) % len])) ok = false;
          if (ok) apex = a;
        }
        if (apex < 0)
          throw std::runtime_error("marching cubes: no chord-free fan apex for config");
        std::rotate(loop.begin(), loop.begin() + apex, loop.end());

        for (size_t i = 1; i + 1 < loop.size() && w + 3 <= 33; ++i) {
          t.tri[cfg][w++] = loop[0];
          t.tri[cfg][w++] = loop[static_cast<int>(i)];
          t.tri[cfg][w++] = loop[static_cast<int>(i) + 1];
        }
      }
    }
    return t;
  }();
  return table;
}

}  // namespace mc

// Extract the iso-surface `field == iso` with vertices in physical mm.
// Inside is field < iso (SDF convention); pass invert=true for fields where
// inside is the high side (smoothed masks).
inline Mesh marching_cubes(const Volume& field, double iso, bool invert = false) {
  const int nx = field.dims[0], ny = field.dims[1], nz = field.dims[2];
  const auto& table = mc::case_table();
  Mesh mesh;
  std::map<std::array<int, 4>, int> edge_vertex;  // (x,y,z,axis) -> vertex id

  auto value = [&](int x, int y, int z) {
    double v = field.at(x, y, z);
    return invert ? iso - (v - iso) : v;
  };

  bool any_inside = false, any_outside = false;
  auto vertex_on_edge = [&](int x, int y, int z, int axis) {
    std::array<int, 4> key{x, y, z, axis};
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    int x2 = x + (axis == 0), y2 = y + (axis == 1), z2 = z + (axis == 2);
    double va = value(x, y, z), vb = value(x2, y2, z2);
    double tt = (iso - va) / (vb - va);
    tt = std::min(1.0 - 1e-6, std::max(1e-6, tt));
    Vec3 pa(field.origin[0] + x * field.spacing[0], field.origin[1] + y * field.spacing[1],
            field.origin[2] + z * field.spacing[2]);
    Vec3 pb(field.origin[0] + x2 * field.spacing[0], field.origin[1] + y2 * field.spacing[1],
            field.origin[2] + z2 * field.spacing[2]);
    int id = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(pa + tt * (pb - pa));
    edge_vertex[key] = id;
    return id;
  };

  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x)
        (value(x, y, z) < iso ? any_inside : any_outside) = true;
  if (!any_inside || !any_outside)
    throw ValidationError("marching_cubes: field has no iso crossing");

  for (int z = 0; z + 1 < nz; ++z)
    for (int y = 0; y + 1 < ny; ++y)
      for (int x = 0; x + 1 < nx; ++x) {
        int cfg = 0;
        for (int c = 0; c < 8; ++c) {
          int cx = x + (c & 1), cy = y + ((c >> 1) & 1), cz = z + ((c >> 2) & 1);
          if (value(cx, cy, cz) < iso) cfg |= 1 << c;
        }
        if (cfg == 0 || cfg == 255) continue;
        const int* tri = table.tri[cfg];
        for (int i = 0; tri[i] >= 0; i += 3) {
          int ids[3];
          for (int k = 0; k < 3; ++k) {
            int e = tri[i + k];
            int a = mc::kEdgeCorners[e][0];
            int axis = e < 4 ? 0 : (e < 8 ? 1 : 2);
            ids[k] = vertex_on_edge(x + (a & 1), y + ((a >> 1) & 1), z + ((a >> 2) & 1), axis);
          }
          if (ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2]) continue;
          mesh.faces.push_back({ids[0], ids[1], ids[2]});
        }
      }
  return mesh;
}

// Mask -> surface at the 0.5 level of the Gaussian-smoothed indicator,
// vertices in mm. sigma is in voxels.
inline Mesh mask_to_mesh(const Volume& mask, double smooth_sigma = 1.0) {
  mask.validate();
  if (mask.kind != VolumeKind::mask) throw ValidationError("mask_to_mesh expects a mask");
  if (mask_empty(mask)) throw ValidationError("mask_to_mesh: empty mask");
  Volume smooth = gaussian_smooth(mask, smooth_sigma);
  Mesh m = marching_cubes(smooth, 0.5, /*invert=*/true);
  m.frame = MeshFrame::pixel_mm;
  return m;
}

// ---------------------------------------------------------------------------
// Canonical frame: affine A mapping canonical -> pixel-mm, x = A x~. Built
// from the anchor mesh so the anchor (and, via the margin, every aligned
// training mesh) fits inside the unit sphere.
// ---------------------------------------------------------------------------

struct CanonicalFrame {
  Mat4 affine = Mat4::Identity();
  std::string anchor_id;

  Vec3 to_canonical(const Vec3& x) const {
    Mat4 inv = affine.inverse();
    return (inv * x.homogeneous()).head<3>();
  }
  Vec3 from_canonical(const Vec3& xt) const { return (affine * xt.homogeneous()).head<3>(); }
  // isotropic scale factor of A (mm per canonical unit)
  double scale() const { return std::cbrt(std::abs(affine.block<3, 3>(0, 0).determinant())); }
  Vec3 center() const { return affine.block<3, 1>(0, 3); }

  void validate() const {
    if (std::abs(affine.determinant()) < 1e-12)
      throw ValidationError("canonical frame affine is singular");
  }
};

inline CanonicalFrame make_canonical_frame(const Mesh& anchor, const std::string& anchor_id,
                                           double margin = 1.25) {
  if (anchor.vertices.empty()) throw ValidationError("canonical frame needs a non-empty anchor");
  Vec3 c = anchor.centroid();
  double r = anchor.max_radius(c) * margin;
  CanonicalFrame f;
  f.anchor_id = anchor_id;
  f.affine = Mat4::Identity();
  f.affine(0, 0) = f.affine(1, 1) = f.affine(2, 2) = r;
  f.affine.block<3, 1>(0, 3) = c;
  return f;
}

inline void save_canonical_frame(const CanonicalFrame& f, const std::string& path) {
  nlohmann::json j;
  std::vector<double> rows;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) rows.push_back(f.affine(r, c));
  j["affine_row_major"] = rows;
  j["anchor_id"] = f.anchor_id;
  write_file_atomic(path, j.dump(2) + "\n");
}

inline CanonicalFrame load_canonical_frame(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing canonical frame: " + path);
  nlohmann::json j;
  in >> j;
  CanonicalFrame f;
  auto rows = j.at("affine_row_major");
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) f.affine(r, c) = rows.at(r * 4 + c).get<double>();
  f.anchor_id = j.at("anchor_id").get<std::string>();
  f.validate();
  return f;
}

// Map a pixel-mm mesh into the canonical frame: resolve the placement pose
// (vertices through pose^-1), then through A^-1. Vertices must land inside
// the unit sphere (tolerance 1e-6).
inline Mesh normalize_to_canonical(const Mesh& mesh, const RigidPose& pose,
                                   const CanonicalFrame& frame) {
  frame.validate();
  Mesh out = mesh;
  out.frame = MeshFrame::canonical;
  Mat4 inv = frame.affine.inverse() * pose.inverse_matrix();
  double worst = 0.0;
  for (auto& v : out.vertices) {
    v = (inv * v.homogeneous()).head<3>();
    worst = std::max(worst, v.norm());
  }
  if (worst > 1.0 + 1e-6)
    throw ValidationError("normalize_to_canonical: vertex outside unit sphere (norm " +
                          std::to_string(worst) + ")");
  return out;
}

// ---------------------------------------------------------------------------
// ASCII OBJ (v/f records only)
// ---------------------------------------------------------------------------

inline void save_obj(const Mesh& m, const std::string& path) {
  std::string buf;
  buf.reserve(m.vertices.size() * 40 + m.faces.size() * 20);
  char line[128];
  for (const auto& v : m.vertices) {
    std::snprintf(line, sizeof(line), "v %.9g %.9g %.9g\n", v[0], v[1], v[2]);
    buf += line;
  }
  for (const auto& f : m.faces) {
    std::snprintf(line, sizeof(line), "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
    buf += line;
  }
  write_file_atomic(path, buf);
}

inline Mesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing obj: " + path);
  Mesh m;
  std::string tok;
  while (in >> tok) {
    if (tok == "v") {
      Vec3 v;
      in >> v[0] >> v[1] >> v[2];
      m.vertices.push_back(v);
    } else if (tok == "f") {
      std::array<int, 3> f;
      for (int i = 0; i < 3; ++i) {
        std::string fv;
        in >> fv;
        f[i] = std::stoi(fv.substr(0, fv.find('/'))) - 1;
      }
      m.faces.push_back(f);
    } else {
      std::getline(in, tok);
    }
  }
  m.validate();
  return m;
}

}  // namespace issm
