#pragma once

// Synthetic shape family with known ground truth: superellipsoids with a
// smooth directional lobe, posed into images with noise and a background
// gradient. Two interpretable generative factors (stretch, lobe amplitude)
// drive the family; everything else is mild nuisance variation.

#include <algorithm>
#include <random>

#include "issm/pose.hpp"
#include "issm/volume.hpp"

namespace issm {

struct ShapeParams {
  Vec3 semi_axes = Vec3(20, 20, 20);  // mm
  double e1 = 1.0, e2 = 1.0;          // squareness
  double lobe_amplitude = 0.0;
  Vec3 lobe_direction = Vec3::UnitX();
  // generative factors kept for analysis
  double factor_stretch = 1.0;
  double factor_lobe = 0.0;

  void validate() const {
    for (int i = 0; i < 3; ++i)
      if (!(semi_axes[i] > 0.0)) throw ValidationError("shape: semi-axes must be positive");
    if (e1 < 0.5 || e1 > 2.0 || e2 < 0.5 || e2 > 2.0)
      throw ValidationError("shape: squareness must lie in [0.5, 2]");
    if (lobe_amplitude < 0.0 || lobe_amplitude > 0.4)
      throw ValidationError("shape: lobe amplitude must lie in [0, 0.4]");
  }
};

// Fixed keel shared by the whole family: together with the always-elongated
// axes it removes every rotation/flip ambiguity, so cross-shape rigid
// alignment is well determined (organ families are similarly oriented).
inline const Vec3 kKeelDirection = Vec3::UnitX();
constexpr double kKeelAmplitude = 0.20;

// Inside-outside function, negative inside. Each lobe scales the local
// radius toward its direction by (1 + A ((1+u)/2)^4), u = cos(angle).
inline double shape_implicit(const ShapeParams& p, const Vec3& x) {
  double r = x.norm();
  if (r < 1e-9) return -1.0;
  const double u = x.dot(p.lobe_direction) / r;
  const double uk = x.dot(kKeelDirection) / r;
  const double bump = 1.0 + p.lobe_amplitude * std::pow(0.5 * (1.0 + u), 4.0) +
                      kKeelAmplitude * std::pow(0.5 * (1.0 + uk), 4.0);
  Vec3 q = x / bump;
  const double fx = std::pow(std::abs(q[0] / p.semi_axes[0]), 2.0 / p.e2);
  const double fy = std::pow(std::abs(q[1] / p.semi_axes[1]), 2.0 / p.e2);
  const double fz = std::pow(std::abs(q[2] / p.semi_axes[2]), 2.0 / p.e1);
  return std::pow(fx + fy, p.e2 / p.e1) + fz - 1.0;
}

enum class SuiteProfile { standard, low_contrast };

inline std::string to_string(SuiteProfile p) {
  return p == SuiteProfile::standard ? "standard" : "low-contrast";
}

inline SuiteProfile profile_from_string(const std::string& s) {
  if (s == "standard") return SuiteProfile::standard;
  if (s == "low-contrast" || s == "low_contrast") return SuiteProfile::low_contrast;
  throw ValidationError("unknown suite profile: " + s);
}

struct SceneSpec {
  std::string id;
  ShapeParams shape;
  RigidPose true_pose;  // placement relative to the image center (center=0)
  double noise_std = 0.1;
  double contrast = 1.0;
  double background_gradient = 0.25;
  Vec3 gradient_dir = Vec3(1, 0.5, 0.25).normalized();
  uint64_t noise_seed = 0;
};

// Deterministic scene draws. Poses stay within the translation stage's
// +-40mm envelope; scale in [0.8, 1.25]; rotation +-15 degrees per axis.
// The two generative factors are drawn as independently shuffled stratified
// sequences, so they cover their ranges evenly and stay decorrelated even
// for small suites.
inline std::vector<SceneSpec> generate_suite(int n, uint64_t rng_seed, SuiteProfile profile) {
  if (n < 1) throw ValidationError("generate_suite: n must be >= 1");
  auto rng = seeded_rng(rng_seed, "suite");
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  auto stratified = [&](double lo, double hi) {
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) v[i] = lo + (hi - lo) * (i + 0.5) / n;
    std::shuffle(v.begin(), v.end(), rng);
    return v;
  };
  const std::vector<double> square_seq = stratified(0.72, 1.38);
  const std::vector<double> lobe_seq = stratified(0.08, 0.38);

  std::vector<SceneSpec> scenes;
  scenes.reserve(n);
  for (int i = 0; i < n; ++i) {
    SceneSpec sc;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "case_%03d", i);
    sc.id = buf;

    // fixed, clearly distinct principal axes (x > y > z) keep the rigid
    // alignment well determined for every family member; the two generative
    // factors act on geometrically separate regions (equator vs pole)
    const double squareness = square_seq[i];
    const double lobe = lobe_seq[i];
    sc.shape.semi_axes = Vec3(27.5, 19.0, 14.0);
    sc.shape.e1 = 1.0;
    sc.shape.e2 = squareness;   // factor 1: equatorial squareness
    sc.shape.lobe_amplitude = lobe;  // factor 2: polar lobe
    sc.shape.lobe_direction = Vec3::UnitZ();
    sc.shape.factor_stretch = squareness;
    sc.shape.factor_lobe = lobe;
    sc.shape.validate();

    sc.true_pose = identity_pose();
    for (int a = 0; a < 3; ++a) {
      sc.true_pose.t[a] = uni(-32.0, 32.0);
      sc.true_pose.s[a] = uni(0.8, 1.25);
    }
    const double d2r = M_PI / 180.0;
    Mat3 rot = (Eigen::AngleAxisd(uni(-15, 15) * d2r, Vec3::UnitZ()) *
                Eigen::AngleAxisd(uni(-15, 15) * d2r, Vec3::UnitY()) *
                Eigen::AngleAxisd(uni(-15, 15) * d2r, Vec3::UnitX()))
                   .toRotationMatrix();
    sc.true_pose.b = matrix_to_rot6d(rot);

    if (profile == SuiteProfile::standard) {
      sc.contrast = 1.0;
      sc.noise_std = 0.10;
      sc.background_gradient = 0.25;
    } else {
      sc.contrast = 0.14;
      sc.noise_std = 0.12;
      sc.background_gradient = 0.10;
    }
    sc.gradient_dir = Vec3(uni(-1, 1), uni(-1, 1), uni(-1, 1));
    if (sc.gradient_dir.norm() < 1e-6) sc.gradient_dir = Vec3::UnitX();
    sc.gradient_dir.normalize();
    sc.noise_seed = mix_seed(rng_seed, 7777 + i);
    scenes.push_back(sc);
  }
  return scenes;
}

// Rasterize a scene: mask = 0-sublevel of the posed implicit function at
// voxel centers; image = contrast * inside + gradient + Gaussian noise.
inline std::pair<Volume, Volume> synthesize(const SceneSpec& scene, std::array<int, 3> dims,
                                            std::array<double, 3> spacing) {
  scene.shape.validate();
  Volume mask = make_volume(dims, spacing, {0, 0, 0}, VolumeKind::mask);
  Volume image = make_volume(dims, spacing, {0, 0, 0}, VolumeKind::image);
  auto cc = mask.physical_center();
  Vec3 center(cc[0], cc[1], cc[2]);
  RigidPose pose = scene.true_pose;
  pose.center = center;

  const auto [nx, ny, nz] = dims;
  parallel_for(0, nz, [&](int64_t z) {
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        auto pc = mask.voxel_center(x, y, static_cast<int>(z));
        Vec3 local = pose.apply_inverse(Vec3(pc[0], pc[1], pc[2])) - center;
        if (shape_implicit(scene.shape, local) < 0.0)
          mask.at(x, y, static_cast<int>(z)) = 1.0f;
      }
  });
  if (mask_empty(mask)) throw ValidationError("synthesize: shape produced an empty mask");
  // the shape must not touch the grid boundary
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        if (x != 0 && y != 0 && z != 0 && x != nx - 1 && y != ny - 1 && z != nz - 1) continue;
        if (mask.at(x, y, z) != 0.0f)
          throw ValidationError("synthesize: shape exits the grid for scene " + scene.id);
      }

  const double span = std::max({nx * spacing[0], ny * spacing[1], nz * spacing[2]});
  auto rng = seeded_rng(scene.noise_seed, scene.id);
  std::normal_distribution<double> gauss(0.0, scene.noise_std);
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        auto pc = image.voxel_center(x, y, z);
        double grad = scene.background_gradient *
                      (scene.gradient_dir.dot(Vec3(pc[0], pc[1], pc[2]) - center) / span);
        double v = scene.contrast * mask.at(x, y, z) + grad + gauss(rng);
        image.at(x, y, z) = static_cast<float>(v);
      }
  return {image, mask};
}

inline nlohmann::json scene_to_json(const SceneSpec& s) {
  return {{"id", s.id},
          {"semi_axes", {s.shape.semi_axes[0], s.shape.semi_axes[1], s.shape.semi_axes[2]}},
          {"e1", s.shape.e1},
          {"e2", s.shape.e2},
          {"lobe_amplitude", s.shape.lobe_amplitude},
          {"lobe_direction",
           {s.shape.lobe_direction[0], s.shape.lobe_direction[1], s.shape.lobe_direction[2]}},
          {"factor_stretch", s.shape.factor_stretch},
          {"factor_lobe", s.shape.factor_lobe},
          {"true_pose", pose_to_json(s.true_pose)},
          {"noise_std", s.noise_std},
          {"contrast", s.contrast},
          {"background_gradient", s.background_gradient},
          {"gradient_dir", {s.gradient_dir[0], s.gradient_dir[1], s.gradient_dir[2]}},
          {"noise_seed", s.noise_seed}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.id = j.at("id").get<std::string>();
  for (int i = 0; i < 3; ++i) {
    s.shape.semi_axes[i] = j.at("semi_axes").at(i).get<double>();
    s.shape.lobe_direction[i] = j.at("lobe_direction").at(i).get<double>();
    s.gradient_dir[i] = j.at("gradient_dir").at(i).get<double>();
  }
  s.shape.e1 = j.at("e1").get<double>();
  s.shape.e2 = j.at("e2").get<double>();
  s.shape.lobe_amplitude = j.at("lobe_amplitude").get<double>();
  s.shape.factor_stretch = j.at("factor_stretch").get<double>();
  s.shape.factor_lobe = j.at("factor_lobe").get<double>();
  s.true_pose = pose_from_json(j.at("true_pose"));
  s.noise_std = j.at("noise_std").get<double>();
  s.contrast = j.at("contrast").get<double>();
  s.background_gradient = j.at("background_gradient").get<double>();
  s.noise_seed = j.at("noise_seed").get<uint64_t>();
  return s;
}

// Plain per-voxel Gaussian intensity classifier (the robustness baseline):
// class-conditional mean/variance from training pairs, maximum likelihood
// per voxel at test time.
struct VoxelClassifier {
  double mean_fg = 0.0, var_fg = 1.0;
  double mean_bg = 0.0, var_bg = 1.0;

  static VoxelClassifier fit(const std::vector<std::pair<const Volume*, const Volume*>>& pairs) {
    VoxelClassifier c;
    double s_fg = 0, s2_fg = 0, n_fg = 0, s_bg = 0, s2_bg = 0, n_bg = 0;
    for (const auto& [image, mask] : pairs) {
      for (size_t i = 0; i < image->data.size(); ++i) {
        double v = image->data[i];
        if (mask->data[i] != 0.0f) {
          s_fg += v;
          s2_fg += v * v;
          n_fg += 1;
        } else {
          s_bg += v;
          s2_bg += v * v;
          n_bg += 1;
        }
      }
    }
    if (n_fg < 2 || n_bg < 2) throw ValidationError("voxel classifier: degenerate training set");
    c.mean_fg = s_fg / n_fg;
    c.var_fg = std::max(1e-8, s2_fg / n_fg - c.mean_fg * c.mean_fg);
    c.mean_bg = s_bg / n_bg;
    c.var_bg = std::max(1e-8, s2_bg / n_bg - c.mean_bg * c.mean_bg);
    return c;
  }

  Volume predict(const Volume& image) const {
    Volume out = image;
    out.kind = VolumeKind::mask;
    for (size_t i = 0; i < image.data.size(); ++i) {
      double v = image.data[i];
      double ll_fg = -0.5 * std::log(var_fg) - 0.5 * (v - mean_fg) * (v - mean_fg) / var_fg;
      double ll_bg = -0.5 * std::log(var_bg) - 0.5 * (v - mean_bg) * (v - mean_bg) / var_bg;
      out.data[i] = ll_fg > ll_bg ? 1.0f : 0.0f;
    }
    return out;
  }
};

}  // namespace issm
