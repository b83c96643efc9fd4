#include <gtest/gtest.h>

#include <random>

#include "issm/cpd.hpp"
#include "issm/sampling.hpp"
#include "issm/simplify.hpp"

using namespace issm;

namespace {

Volume ball_mask(int n, double spacing, double radius) {
  Volume m = make_volume({n, n, n}, {spacing, spacing, spacing}, {0, 0, 0}, VolumeKind::mask);
  Vec3 c = Vec3::Constant(0.5 * (n - 1) * spacing);
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        auto p = m.voxel_center(x, y, z);
        if ((Vec3(p[0], p[1], p[2]) - c).norm() <= radius) m.at(x, y, z) = 1.0f;
      }
  return m;
}

Mesh ball_mesh(double radius = 10.0, int n = 31) {
  return mask_to_mesh(ball_mask(n, 1.0, radius), 1.0);
}

Mesh unit_sphere_canonical() {
  // exact-SDF marching cubes: vertices on the true sphere up to O(h^2/R)
  int n = 27;
  Volume v = make_volume({n, n, n}, {1, 1, 1}, {0, 0, 0}, VolumeKind::sdf);
  Vec3 c = Vec3::Constant(0.5 * (n - 1));
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        auto p = v.voxel_center(x, y, z);
        v.at(x, y, z) = static_cast<float>((Vec3(p[0], p[1], p[2]) - c).norm() - 10.0);
      }
  Mesh m = marching_cubes(v, 0.0);
  CanonicalFrame f = make_canonical_frame(m, "sphere", 1.0);
  return normalize_to_canonical(m, identity_pose(), f);
}

Mesh transform_mesh(const Mesh& m, const Mat3& rot, const Vec3& trans, double scale = 1.0) {
  Mesh out = m;
  Vec3 c = m.centroid();
  for (auto& v : out.vertices) v = c + trans + scale * (rot * (v - c));
  return out;
}

double rotation_angle_deg(const Mat3& a, const Mat3& b) {
  double c = ((a.transpose() * b).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / M_PI;
}

}  // namespace

// ---- simplify -----------------------------------------------------------------

TEST(Simplify, SphereRatioTenth) {
  Mesh sphere = ball_mesh(10.0, 31);
  ASSERT_GT(sphere.faces.size(), 2000u);
  Mesh s = simplify_mesh(sphere, 0.1);
  EXPECT_LE(s.faces.size(), sphere.faces.size() / 10);
  EXPECT_TRUE(is_watertight(s));
  Vec3 c = s.centroid();
  double err = 0.0;
  for (const auto& v : s.vertices) err += std::abs((v - c).norm() - 10.0);
  err /= static_cast<double>(s.vertices.size());
  EXPECT_LT(err, 0.2);  // 2% of the radius
}

TEST(Simplify, ExtremeRatioKeepsOneComponent) {
  Mesh sphere = ball_mesh(10.0, 31);
  Mesh s = simplify_mesh(sphere, 0.01);
  EXPECT_LE(s.faces.size(), sphere.faces.size() / 100);
  EXPECT_GE(s.faces.size(), 4u);
  EXPECT_EQ(connected_components(s), 1);
  EXPECT_TRUE(is_watertight(s));
}

TEST(Simplify, BoundingBoxPreserved) {
  Mesh sphere = ball_mesh(10.0, 31);
  Mesh s = simplify_mesh(sphere, 0.1);
  Vec3 lo0 = Vec3::Constant(1e9), hi0 = -lo0, lo1 = lo0, hi1 = hi0;
  for (const auto& v : sphere.vertices) {
    lo0 = lo0.cwiseMin(v);
    hi0 = hi0.cwiseMax(v);
  }
  for (const auto& v : s.vertices) {
    lo1 = lo1.cwiseMin(v);
    hi1 = hi1.cwiseMax(v);
  }
  // within about one decimation cell
  double cell = std::sqrt(sphere.area() / static_cast<double>(s.faces.size()));
  EXPECT_LT((lo1 - lo0).cwiseAbs().maxCoeff(), cell);
  EXPECT_LT((hi1 - hi0).cwiseAbs().maxCoeff(), cell);
}

TEST(Simplify, RejectsBadRatios) {
  Mesh sphere = ball_mesh(5.0, 15);
  EXPECT_THROW(simplify_mesh(sphere, 1.5), ValidationError);
  EXPECT_THROW(simplify_mesh(sphere, 0.0), ValidationError);
  Mesh tiny;
  tiny.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
  tiny.faces = {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}};
  EXPECT_THROW(simplify_mesh(tiny, 0.5), ValidationError);
}

// ---- cpd ----------------------------------------------------------------------

TEST(Cpd, SelfAlignmentIsIdentity) {
  Mesh m = simplify_mesh(ball_mesh(10.0, 25), 0.05);
  CpdResult r = cpd_rigid_align(m, m);
  EXPECT_TRUE(r.converged);
  EXPECT_LT((r.pose.rotation() - Mat3::Identity()).norm(), 1e-6);
  EXPECT_LT(r.pose.t.norm(), 1e-6);
  EXPECT_NEAR(r.pose.s[0], 1.0, 1e-6);
}

TEST(Cpd, RecoversKnownRigidTransform) {
  // a non-symmetric cloud: merged ball pair
  Volume m = make_volume({40, 28, 28}, {1, 1, 1}, {0, 0, 0}, VolumeKind::mask);
  for (int z = 0; z < 28; ++z)
    for (int y = 0; y < 28; ++y)
      for (int x = 0; x < 40; ++x) {
        auto pc = m.voxel_center(x, y, z);
        Vec3 p(pc[0], pc[1], pc[2]);
        if ((p - Vec3(14, 14, 14)).norm() <= 9.0 || (p - Vec3(24, 16, 14)).norm() <= 6.0)
          m.at(x, y, z) = 1.0f;
      }
  Mesh anchor = simplify_mesh(mask_to_mesh(m, 1.0), 0.03);
  Mat3 rot = Eigen::AngleAxisd(20.0 * M_PI / 180.0, Vec3::UnitZ()).toRotationMatrix();
  Vec3 trans(5, -3, 2);
  Mesh src = transform_mesh(anchor, rot, trans);

  CpdResult r = cpd_rigid_align(src, anchor);
  EXPECT_TRUE(r.converged);
  EXPECT_LT(rotation_angle_deg(r.pose.rotation(), rot), 1.0);
  // compare the full placement on the anchor centroid rather than raw t
  Vec3 c = anchor.centroid();
  Vec3 want = c + trans + rot * (c - c);
  EXPECT_LT((r.pose.apply(c) - want).norm(), 0.1);
  EXPECT_NEAR(r.pose.s[0], 1.0, 0.01);
}

TEST(Cpd, RecoversUniformScale) {
  Volume m = make_volume({40, 28, 28}, {1, 1, 1}, {0, 0, 0}, VolumeKind::mask);
  for (int z = 0; z < 28; ++z)
    for (int y = 0; y < 28; ++y)
      for (int x = 0; x < 40; ++x) {
        auto pc = m.voxel_center(x, y, z);
        Vec3 p(pc[0], pc[1], pc[2]);
        if ((p - Vec3(14, 14, 14)).norm() <= 9.0 || (p - Vec3(24, 16, 14)).norm() <= 6.0)
          m.at(x, y, z) = 1.0f;
      }
  Mesh anchor = simplify_mesh(mask_to_mesh(m, 1.0), 0.03);
  Mesh src = transform_mesh(anchor, Mat3::Identity(), Vec3(2, 1, -1), 1.2);
  CpdResult r = cpd_rigid_align(src, anchor);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.pose.s[0], 1.2, 0.01);
}

TEST(Cpd, RotationEquivariance) {
  Volume m = make_volume({40, 28, 28}, {1, 1, 1}, {0, 0, 0}, VolumeKind::mask);
  for (int z = 0; z < 28; ++z)
    for (int y = 0; y < 28; ++y)
      for (int x = 0; x < 40; ++x) {
        auto pc = m.voxel_center(x, y, z);
        Vec3 p(pc[0], pc[1], pc[2]);
        if ((p - Vec3(14, 14, 14)).norm() <= 9.0 || (p - Vec3(24, 16, 14)).norm() <= 6.0)
          m.at(x, y, z) = 1.0f;
      }
  Mesh anchor = simplify_mesh(mask_to_mesh(m, 1.0), 0.03);
  Mat3 r0 = Eigen::AngleAxisd(10.0 * M_PI / 180.0, Vec3::UnitY()).toRotationMatrix();
  Mesh src = transform_mesh(anchor, r0, Vec3(1, 2, 0));
  Mat3 extra = Eigen::AngleAxisd(15.0 * M_PI / 180.0, Vec3::UnitX()).toRotationMatrix();
  Mesh src2 = transform_mesh(src, extra, Vec3::Zero());

  Mat3 rec1 = cpd_rigid_align(src, anchor).pose.rotation();
  Mat3 rec2 = cpd_rigid_align(src2, anchor).pose.rotation();
  EXPECT_LT(rotation_angle_deg(rec2, extra * rec1), 1.0);
}

TEST(Cpd, EmptyMeshRejected) {
  Mesh empty;
  Mesh m = ball_mesh(5.0, 15);
  EXPECT_THROW(cpd_rigid_align(empty, m), ValidationError);
}

// ---- canonical sampling ----------------------------------------------------------

TEST(Sampling, CanonicalCountsAndDeterminism) {
  Mesh sphere = unit_sphere_canonical();
  auto s1 = sample_canonical_pairs(sphere, "s", 10, 42);
  EXPECT_EQ(s1.pairs.size(), 10u);
  auto s2 = sample_canonical_pairs(sphere, "s", 10, 42);
  for (size_t i = 0; i < 10; ++i) {
    ASSERT_EQ(s1.pairs[i].x, s2.pairs[i].x);
    ASSERT_EQ(s1.pairs[i].value, s2.pairs[i].value);
  }
  auto s3 = sample_canonical_pairs(sphere, "s", 10, 43);
  bool same = true;
  for (size_t i = 0; i < 10; ++i) same = same && s1.pairs[i].x == s3.pairs[i].x;
  EXPECT_FALSE(same);
  // 20/80 split: the last 8 draws are surface-jittered, so they hug the surface
  for (size_t i = 2; i < 10; ++i)
    ASSERT_LT(std::abs(s1.pairs[i].value) / kCanonicalValueScale, 0.55);
}

TEST(Sampling, SphereValuesMatchAnalyticSdf) {
  Mesh sphere = unit_sphere_canonical();
  auto set = sample_canonical_pairs(sphere, "s", 2000, 7);
  for (const auto& p : set.pairs) {
    double analytic = p.x.norm() - 1.0;
    double got = p.value / kCanonicalValueScale;  // undo the [-1,1] scaling
    ASSERT_LT(std::abs(got - analytic), 0.02)
        << "at r=" << p.x.norm() << " got " << got << " want " << analytic;
  }
}

TEST(Sampling, SurfaceJitterScaleBound) {
  Mesh sphere = unit_sphere_canonical();
  auto set = sample_canonical_pairs(sphere, "s", 5000, 11);
  double acc = 0.0;
  int count = 0;
  for (size_t i = 1000; i < set.pairs.size(); ++i) {  // the surface-jittered 80%
    acc += std::abs(set.pairs[i].value) / kCanonicalValueScale;
    ++count;
  }
  EXPECT_LT(acc / count, 0.12);
}

TEST(Sampling, SeedChangesSampleNotStatistics) {
  Mesh sphere = unit_sphere_canonical();
  auto a = sample_canonical_pairs(sphere, "s", 1000, 1);
  auto b = sample_canonical_pairs(sphere, "s", 1000, 2);
  // two-sample KS on |value|
  std::vector<double> va, vb;
  for (const auto& p : a.pairs) va.push_back(std::abs(p.value));
  for (const auto& p : b.pairs) vb.push_back(std::abs(p.value));
  std::sort(va.begin(), va.end());
  std::sort(vb.begin(), vb.end());
  double d = 0.0;
  size_t i = 0, j = 0;
  while (i < va.size() && j < vb.size()) {
    if (va[i] <= vb[j]) ++i;
    else ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / va.size() -
                             static_cast<double>(j) / vb.size()));
  }
  // 1.95*sqrt(2/n) ~ 99.9% band at n=1000
  EXPECT_LT(d, 1.95 * std::sqrt(2.0 / 1000.0));
}

TEST(Sampling, DistanceHomogeneityUnderMeshRescale) {
  Mesh sphere = unit_sphere_canonical();
  Mesh half = sphere;
  for (auto& v : half.vertices) v *= 0.5;
  MeshDistanceField f1(sphere), f2(half);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 0.4);
  for (int i = 0; i < 200; ++i) {
    Vec3 p(g(rng), g(rng), g(rng));
    ASSERT_NEAR(f2.signed_distance(0.5 * p), 0.5 * f1.signed_distance(p), 1e-9);
  }
}

TEST(Sampling, OpenMeshRejected) {
  Mesh open_mesh;
  open_mesh.frame = MeshFrame::canonical;
  open_mesh.vertices = {Vec3(0, 0, 0), Vec3(0.5, 0, 0), Vec3(0, 0.5, 0)};
  open_mesh.faces = {{0, 1, 2}};
  EXPECT_THROW(sample_canonical_pairs(open_mesh, "s", 10, 1), ValidationError);
}

// ---- image-space sampling ----------------------------------------------------------

TEST(Sampling, ImagePairsBandSplit) {
  Volume mask = ball_mask(48, 1.0, 16.0);
  VoxelSdf sdf = mask_to_sdf(mask, 13.0);
  auto set = sample_image_pairs(sdf, "ball", 1000, 5);
  EXPECT_EQ(set.pairs.size(), 1000u);
  int band_pos = 0, band_neg = 0;
  for (const auto& p : set.pairs) {
    if (p.value > 0 && p.value <= 13.0) ++band_pos;
    if (p.value < 0 && -p.value <= 13.0) ++band_neg;
  }
  EXPECT_GE(band_pos, 400);
  EXPECT_GE(band_neg, 400);
  // core pairs respect the band
  int core = 1000 - 2 * static_cast<int>(std::round(1000 / 12.0));
  for (int i = 0; i < core; ++i) ASSERT_LE(std::abs(set.pairs[i].value), 13.0);
  // coordinates are voxel centers in mm
  for (const auto& p : set.pairs) {
    for (int k = 0; k < 3; ++k) {
      double f = p.x[k] / 1.0;
      ASSERT_NEAR(f, std::round(f), 1e-9);
    }
  }
}

TEST(Sampling, DegenerateBandRejected) {
  // 1-voxel mask inside a 10mm box: the 13mm band covers everything
  Volume mask = make_volume({10, 10, 10}, {1, 1, 1}, {0, 0, 0}, VolumeKind::mask);
  mask.at(5, 5, 5) = 1.0f;
  VoxelSdf sdf = mask_to_sdf(mask, 13.0);
  EXPECT_THROW(sample_image_pairs(sdf, "tiny", 100, 1), ValidationError);
}

TEST(Sampling, FileRoundTrip) {
  Mesh sphere = unit_sphere_canonical();
  auto set = sample_canonical_pairs(sphere, "shape7", 500, 99);
  auto dir = std::filesystem::temp_directory_path() / "issm_sampling_test";
  std::filesystem::create_directories(dir);
  std::string stem = (dir / "samples").string();
  save_samples(set, stem);
  auto back = load_samples(stem);
  EXPECT_EQ(back.shape_id, "shape7");
  EXPECT_EQ(back.seed, 99u);
  EXPECT_TRUE(back.frame == SampleFrame::canonical);
  ASSERT_EQ(back.pairs.size(), set.pairs.size());
  for (size_t i = 0; i < set.pairs.size(); ++i) {
    ASSERT_NEAR(back.pairs[i].value, set.pairs[i].value, 1e-6);
    ASSERT_LT((back.pairs[i].x - set.pairs[i].x).norm(), 1e-6);
  }
}

TEST(Sampling, VoxelizeRoundTripDice) {
  Volume mask = ball_mask(32, 1.0, 11.0);
  Mesh mesh = mask_to_mesh(mask, 1.0);
  Volume re = voxelize_mesh(mesh, mask.dims, mask.spacing, mask.origin);
  double inter = 0, a = 0, b = 0;
  for (size_t i = 0; i < mask.data.size(); ++i) {
    a += mask.data[i];
    b += re.data[i];
    inter += mask.data[i] * re.data[i];
  }
  double dice = 2.0 * inter / (a + b);
  EXPECT_GT(dice, 0.97);
}
