#pragma once

// Segmentation metrics: Dice, average symmetric surface distance, and the
// true maximum (HD100) Hausdorff distance between surface voxel centers.

#include <cmath>
#include <vector>

#include "issm/volume.hpp"

namespace issm {

struct MetricsReport {
  double dsc = 0.0;
  double assd_mm = 0.0;
  double hd_mm = 0.0;
  bool degenerate = false;  // empty prediction or ground truth
};

namespace detail {

// surface voxels: foreground with a background 6-neighbor (the outside of
// the grid counts as background)
inline std::vector<std::array<double, 3>> surface_voxels(const Volume& m) {
  std::vector<std::array<double, 3>> out;
  const auto [nx, ny, nz] = m.dims;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        if (m.at(x, y, z) == 0.0f) continue;
        bool surface = x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1;
        if (!surface)
          surface = m.at(x - 1, y, z) == 0.0f || m.at(x + 1, y, z) == 0.0f ||
                    m.at(x, y - 1, z) == 0.0f || m.at(x, y + 1, z) == 0.0f ||
                    m.at(x, y, z - 1) == 0.0f || m.at(x, y, z + 1) == 0.0f;
        if (surface) out.push_back(m.voxel_center(x, y, z));
      }
  return out;
}

// directed nearest distances, z-y-x term order fixed for reproducibility
inline std::vector<double> nearest_distances(const std::vector<std::array<double, 3>>& from,
                                             const std::vector<std::array<double, 3>>& to) {
  std::vector<double> out(from.size());
  parallel_for(0, static_cast<int64_t>(from.size()), [&](int64_t i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      double dz = (from[i][2] - q[2]) * (from[i][2] - q[2]);
      double dy = (from[i][1] - q[1]) * (from[i][1] - q[1]);
      double dx = (from[i][0] - q[0]) * (from[i][0] - q[0]);
      double d2 = (dz + dy) + dx;
      if (d2 < best) best = d2;
    }
    out[i] = std::sqrt(best);
  });
  return out;
}

}  // namespace detail

inline MetricsReport compute_metrics(const Volume& pred, const Volume& gt) {
  if (pred.dims != gt.dims || pred.spacing != gt.spacing)
    throw ValidationError("compute_metrics: grids differ");
  MetricsReport r;
  double inter = 0.0, np = 0.0, ng = 0.0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0.0f, g = gt.data[i] != 0.0f;
    np += p;
    ng += g;
    inter += p && g;
  }
  if (np == 0.0 || ng == 0.0) {
    r.degenerate = true;
    r.dsc = 0.0;
    double diag = 0.0;
    for (int a = 0; a < 3; ++a) {
      double e = (pred.dims[a] - 1) * pred.spacing[a];
      diag += e * e;
    }
    r.assd_mm = r.hd_mm = std::sqrt(diag);
    return r;
  }
  r.dsc = 2.0 * inter / (np + ng);

  auto sp = detail::surface_voxels(pred);
  auto sg = detail::surface_voxels(gt);
  auto dp = detail::nearest_distances(sp, sg);
  auto dg = detail::nearest_distances(sg, sp);
  double acc = 0.0, worst = 0.0;
  for (double d : dp) {
    acc += d;
    worst = std::max(worst, d);
  }
  for (double d : dg) {
    acc += d;
    worst = std::max(worst, d);
  }
  r.assd_mm = acc / static_cast<double>(dp.size() + dg.size());
  r.hd_mm = worst;
  return r;
}

struct SuiteSummary {
  std::vector<MetricsReport> cases;
  double dsc_mean = 0.0, dsc_std = 0.0, dsc_worst = 1.0;
  double assd_mean = 0.0, assd_std = 0.0, assd_worst = 0.0;
  double hd_mean = 0.0, hd_std = 0.0, hd_worst = 0.0;
};

inline SuiteSummary summarize(const std::vector<MetricsReport>& cases) {
  SuiteSummary s;
  s.cases = cases;
  if (cases.empty()) return s;
  auto stats = [&](auto get, double& mean, double& stdd) {
    double acc = 0.0;
    for (const auto& c : cases) acc += get(c);
    mean = acc / cases.size();
    double var = 0.0;
    for (const auto& c : cases) var += (get(c) - mean) * (get(c) - mean);
    stdd = cases.size() > 1 ? std::sqrt(var / (cases.size() - 1)) : 0.0;
  };
  stats([](const MetricsReport& c) { return c.dsc; }, s.dsc_mean, s.dsc_std);
  stats([](const MetricsReport& c) { return c.assd_mm; }, s.assd_mean, s.assd_std);
  stats([](const MetricsReport& c) { return c.hd_mm; }, s.hd_mean, s.hd_std);
  for (const auto& c : cases) {
    s.dsc_worst = std::min(s.dsc_worst, c.dsc);
    s.assd_worst = std::max(s.assd_worst, c.assd_mm);
    s.hd_worst = std::max(s.hd_worst, c.hd_mm);
  }
  return s;
}

inline nlohmann::json summary_to_json(const SuiteSummary& s) {
  nlohmann::json per_case = nlohmann::json::array();
  for (const auto& c : s.cases)
    per_case.push_back({{"dsc", c.dsc},
                        {"assd_mm", c.assd_mm},
                        {"hd_mm", c.hd_mm},
                        {"degenerate", c.degenerate}});
  return {{"per_case", per_case},
          {"dsc", {{"mean", s.dsc_mean}, {"std", s.dsc_std}, {"worst", s.dsc_worst}}},
          {"assd_mm", {{"mean", s.assd_mean}, {"std", s.assd_std}, {"worst", s.assd_worst}}},
          {"hd_mm", {{"mean", s.hd_mean}, {"std", s.hd_std}, {"worst", s.hd_worst}}}};
}

}  // namespace issm
