#pragma once

// Quadric-error edge-collapse mesh decimation. Collapses cheapest edges
// first; link-condition and normal-flip checks keep closed inputs closed.

#include <queue>
#include <set>

#include "issm/mesh.hpp"

namespace issm {

namespace detail {

using Quadric = Eigen::Matrix4d;

inline Quadric plane_quadric(const Vec3& a, const Vec3& b, const Vec3& c) {
  Vec3 n = (b - a).cross(c - a);
  double area2 = n.norm();
  if (area2 < 1e-18) return Quadric::Zero();
  n /= area2;
  double d = -n.dot(a);
  Eigen::Vector4d p(n[0], n[1], n[2], d);
  return area2 * (p * p.transpose());  // area-weighted
}

inline double quadric_cost(const Quadric& q, const Vec3& v) {
  Eigen::Vector4d h(v[0], v[1], v[2], 1.0);
  return h.dot(q * h);
}

}  // namespace detail

// Decimate to at most ratio * (input face count) faces.
inline Mesh simplify_mesh(const Mesh& input, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ValidationError("simplify_mesh: ratio must be in (0,1)");
  input.validate();
  const int target_faces = static_cast<int>(ratio * static_cast<double>(input.faces.size()));
  if (target_faces < 4)
    throw ValidationError("simplify_mesh: mesh too small to reach the requested ratio");

  std::vector<Vec3> verts = input.vertices;
  std::vector<std::array<int, 3>> faces = input.faces;
  std::vector<bool> face_alive(faces.size(), true);
  std::vector<bool> vert_alive(verts.size(), true);
  std::vector<std::set<int>> vfaces(verts.size());  // incident face ids
  for (size_t f = 0; f < faces.size(); ++f)
    for (int k = 0; k < 3; ++k) vfaces[faces[f][k]].insert(static_cast<int>(f));

  std::vector<detail::Quadric> quadric(verts.size(), detail::Quadric::Zero());
  for (size_t f = 0; f < faces.size(); ++f) {
    auto q = detail::plane_quadric(verts[faces[f][0]], verts[faces[f][1]], verts[faces[f][2]]);
    for (int k = 0; k < 3; ++k) quadric[faces[f][k]] += q;
  }

  std::vector<int> version(verts.size(), 0);

  struct Candidate {
    double cost;
    int a, b;         // collapse b into a at position pos
    int va, vb;       // versions at push time
    Vec3 pos;
    bool operator>(const Candidate& o) const { return cost > o.cost; }
  };
  std::priority_queue<Candidate, std::vector<Candidate>, std::greater<Candidate>> heap;

  auto neighbors = [&](int v) {
    std::set<int> nb;
    for (int f : vfaces[v])
      for (int k = 0; k < 3; ++k)
        if (faces[f][k] != v) nb.insert(faces[f][k]);
    return nb;
  };

  auto optimal_position = [&](int a, int b) {
    detail::Quadric q = quadric[a] + quadric[b];
    Eigen::Matrix3d A = q.block<3, 3>(0, 0);
    Vec3 rhs = -q.block<3, 1>(0, 3);
    Eigen::FullPivLU<Eigen::Matrix3d> lu(A);
    if (lu.isInvertible()) {
      Vec3 x = lu.solve(rhs);
      if ((x - verts[a]).norm() < 1e3) return x;  // guard wild solutions
    }
    Vec3 mid = 0.5 * (verts[a] + verts[b]);
    double cm = detail::quadric_cost(q, mid);
    double ca = detail::quadric_cost(q, verts[a]);
    double cb = detail::quadric_cost(q, verts[b]);
    if (ca <= cb && ca <= cm) return verts[a];
    if (cb <= cm) return verts[b];
    return mid;
  };

  auto push_edge = [&](int a, int b) {
    if (a > b) std::swap(a, b);
    Vec3 pos = optimal_position(a, b);
    double cost = detail::quadric_cost(quadric[a] + quadric[b], pos);
    heap.push({cost, a, b, version[a], version[b], pos});
  };

  {
    std::set<std::pair<int, int>> edges;
    for (size_t f = 0; f < faces.size(); ++f)
      for (int k = 0; k < 3; ++k) {
        int a = faces[f][k], b = faces[f][(k + 1) % 3];
        edges.insert({std::min(a, b), std::max(a, b)});
      }
    for (auto [a, b] : edges) push_edge(a, b);
  }

  int alive_faces = static_cast<int>(faces.size());

  auto collapse_ok = [&](int a, int b, const Vec3& pos) {
    // link condition: shared neighbors must be exactly the 2 opposite
    // vertices of the faces on edge (a,b)
    auto na = neighbors(a), nb = neighbors(b);
    std::vector<int> shared;
    std::set_intersection(na.begin(), na.end(), nb.begin(), nb.end(),
                          std::back_inserter(shared));
    int edge_faces = 0;
    for (int f : vfaces[a])
      if (vfaces[b].count(f)) ++edge_faces;
    if (edge_faces != 2) return false;  // open or non-manifold edge
    if (static_cast<int>(shared.size()) != 2) return false;
    // normal flip check on surviving faces
    for (int v : {a, b}) {
      for (int f : vfaces[v]) {
        const auto& fc = faces[f];
        bool has_a = fc[0] == a || fc[1] == a || fc[2] == a;
        bool has_b = fc[0] == b || fc[1] == b || fc[2] == b;
        if (has_a && has_b) continue;  // face disappears
        Vec3 p[3], pnew[3];
        for (int k = 0; k < 3; ++k) {
          p[k] = verts[fc[k]];
          pnew[k] = (fc[k] == v) ? pos : verts[fc[k]];
        }
        Vec3 n0 = (p[1] - p[0]).cross(p[2] - p[0]);
        Vec3 n1 = (pnew[1] - pnew[0]).cross(pnew[2] - pnew[0]);
        if (n0.dot(n1) <= 0.0) return false;
        if (n1.norm() < 1e-14) return false;
      }
    }
    return true;
  };

  while (alive_faces > target_faces && !heap.empty()) {
    Candidate c = heap.top();
    heap.pop();
    if (!vert_alive[c.a] || !vert_alive[c.b]) continue;
    if (version[c.a] != c.va || version[c.b] != c.vb) continue;  // stale
    if (!collapse_ok(c.a, c.b, c.pos)) continue;

    // collapse b into a
    verts[c.a] = c.pos;
    quadric[c.a] += quadric[c.b];
    vert_alive[c.b] = false;
    std::vector<int> dead;
    for (int f : vfaces[c.a])
      if (vfaces[c.b].count(f)) dead.push_back(f);
    for (int f : dead) {
      face_alive[f] = false;
      --alive_faces;
      for (int k = 0; k < 3; ++k) vfaces[faces[f][k]].erase(f);
    }
    for (int f : std::set<int>(vfaces[c.b])) {
      for (int k = 0; k < 3; ++k)
        if (faces[f][k] == c.b) faces[f][k] = c.a;
      vfaces[c.a].insert(f);
      vfaces[c.b].erase(f);
    }
    ++version[c.a];
    ++version[c.b];
    for (int nb : neighbors(c.a)) push_edge(c.a, nb);
  }

  if (alive_faces > target_faces)
    throw std::runtime_error("simplify_mesh: ran out of legal collapses before target");

  // compact
  Mesh out;
  out.frame = input.frame;
  std::vector<int> remap(verts.size(), -1);
  for (size_t f = 0; f < faces.size(); ++f) {
    if (!face_alive[f]) continue;
    std::array<int, 3> nf{};
    for (int k = 0; k < 3; ++k) {
      int v = faces[f][k];
      if (remap[v] < 0) {
        remap[v] = static_cast<int>(out.vertices.size());
        out.vertices.push_back(verts[v]);
      }
      nf[k] = remap[v];
    }
    out.faces.push_back(nf);
  }
  return out;
}

}  // namespace issm
