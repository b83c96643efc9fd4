#include "issm/mesh.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace issm;

namespace {

Volume ball_mask(int n, double spacing, double radius, Vec3 center_offset = Vec3::Zero()) {
  Volume m = make_volume({n, n, n}, {spacing, spacing, spacing}, {0, 0, 0}, VolumeKind::mask);
  Vec3 c = Vec3::Constant(0.5 * (n - 1) * spacing) + center_offset;
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        auto p = m.voxel_center(x, y, z);
        if ((Vec3(p[0], p[1], p[2]) - c).norm() <= radius) m.at(x, y, z) = 1.0f;
      }
  return m;
}

}  // namespace

TEST(MarchingCubes, SolidCubeIsClosedSphereTopology) {
  Volume m = make_volume({14, 14, 14}, {1, 1, 1}, {0, 0, 0}, VolumeKind::mask);
  for (int z = 3; z < 11; ++z)
    for (int y = 3; y < 11; ++y)
      for (int x = 3; x < 11; ++x) m.at(x, y, z) = 1.0f;
  Mesh mesh = mask_to_mesh(m, 1.0);
  EXPECT_GT(mesh.faces.size(), 0u);
  EXPECT_TRUE(is_watertight(mesh));
  EXPECT_EQ(euler_characteristic(mesh), 2);
  EXPECT_EQ(connected_components(mesh), 1);
}

TEST(MarchingCubes, WatertightOnRandomSmoothFields) {
  // random smooth fields with a positive shell so all level sets close
  std::mt19937_64 rng(4);
  std::normal_distribution<float> g(0.f, 1.f);
  for (int trial = 0; trial < 12; ++trial) {
    Volume v = make_volume({12, 12, 12}, {1, 1, 1}, {0, 0, 0}, VolumeKind::image);
    for (auto& x : v.data) x = g(rng);
    Volume s = gaussian_smooth(v, 1.2);
    for (int z = 0; z < 12; ++z)
      for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x)
          if (x == 0 || y == 0 || z == 0 || x == 11 || y == 11 || z == 11)
            s.at(x, y, z) = 10.0f;
    Mesh mesh = marching_cubes(s, 0.01);
    ASSERT_TRUE(is_watertight(mesh)) << "trial " << trial;
  }
}

TEST(MarchingCubes, BallRadiusOracle) {
  Volume m = ball_mask(27, 1.0, 10.0);
  Mesh mesh = mask_to_mesh(m, 1.0);
  Vec3 c = mesh.centroid();
  double mean_r = 0.0;
  for (const auto& v : mesh.vertices) mean_r += (v - c).norm();
  mean_r /= static_cast<double>(mesh.vertices.size());
  EXPECT_NEAR(mean_r, 10.0, 0.5);
  EXPECT_TRUE(is_watertight(mesh));
  EXPECT_EQ(euler_characteristic(mesh), 2);
}

TEST(MarchingCubes, TwoBallsTwoComponents) {
  Volume m = make_volume({40, 20, 20}, {1, 1, 1}, {0, 0, 0}, VolumeKind::mask);
  auto put_ball = [&](Vec3 c, double r) {
    for (int z = 0; z < 20; ++z)
      for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 40; ++x) {
          auto p = m.voxel_center(x, y, z);
          if ((Vec3(p[0], p[1], p[2]) - c).norm() <= r) m.at(x, y, z) = 1.0f;
        }
  };
  put_ball(Vec3(10, 10, 10), 5.0);
  put_ball(Vec3(30, 10, 10), 5.0);
  Mesh mesh = mask_to_mesh(m, 1.0);
  EXPECT_EQ(connected_components(mesh), 2);
}

TEST(MarchingCubes, NegatedSdfSameSurface) {
  // irrational radius/center so no voxel sits exactly on the level set
  Volume v = make_volume({15, 15, 15}, {1, 1, 1}, {0, 0, 0}, VolumeKind::sdf);
  for (int z = 0; z < 15; ++z)
    for (int y = 0; y < 15; ++y)
      for (int x = 0; x < 15; ++x) {
        auto p = v.voxel_center(x, y, z);
        v.at(x, y, z) =
            static_cast<float>((Vec3(p[0], p[1], p[2]) - Vec3(7.03, 7.01, 6.97)).norm() - 5.1);
      }
  Mesh a = marching_cubes(v, 0.0);
  Volume neg = v;
  for (auto& x : neg.data) x = -x;
  Mesh b = marching_cubes(neg, 0.0);
  ASSERT_EQ(a.vertices.size(), b.vertices.size());
  // identical vertex sets (triangle emission order may differ)
  auto key = [](const Vec3& v) { return std::array<double, 3>{v[0], v[1], v[2]}; };
  std::vector<std::array<double, 3>> va, vb;
  for (const auto& v : a.vertices) va.push_back(key(v));
  for (const auto& v : b.vertices) vb.push_back(key(v));
  std::sort(va.begin(), va.end());
  std::sort(vb.begin(), vb.end());
  for (size_t i = 0; i < va.size(); ++i)
    for (int k = 0; k < 3; ++k) ASSERT_NEAR(va[i][k], vb[i][k], 1e-9);
}

TEST(MarchingCubes, NoCrossingThrows) {
  Volume v = make_volume({4, 4, 4}, {1, 1, 1}, {0, 0, 0}, VolumeKind::sdf, 1.0f);
  EXPECT_THROW(marching_cubes(v, 0.0), ValidationError);
  Volume empty_mask = make_volume({4, 4, 4}, {1, 1, 1}, {0, 0, 0}, VolumeKind::mask);
  EXPECT_THROW(mask_to_mesh(empty_mask, 1.0), ValidationError);
}

TEST(CanonicalFrame, AnchorFitsUnitSphere) {
  Volume m = ball_mask(21, 1.0, 7.0);
  Mesh anchor = mask_to_mesh(m, 1.0);
  CanonicalFrame f = make_canonical_frame(anchor, "anchor0", 1.0);
  Mesh canon = normalize_to_canonical(anchor, identity_pose(), f);
  double worst = 0.0;
  for (const auto& v : canon.vertices) worst = std::max(worst, v.norm());
  EXPECT_NEAR(worst, 1.0, 1e-9);  // touches the sphere with margin 1
  EXPECT_EQ(canon.frame, MeshFrame::canonical);
}

TEST(CanonicalFrame, RoundTripJson) {
  Mesh tri;
  tri.vertices = {Vec3(0, 0, 0), Vec3(10, 0, 0), Vec3(0, 10, 0)};
  tri.faces = {{0, 1, 2}};
  CanonicalFrame f = make_canonical_frame(tri, "a7", 1.25);
  auto dir = std::filesystem::temp_directory_path() / "issm_mesh_test";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "frame.json").string();
  save_canonical_frame(f, path);
  CanonicalFrame g = load_canonical_frame(path);
  EXPECT_EQ(g.anchor_id, "a7");
  EXPECT_LT((g.affine - f.affine).norm(), 1e-12);
}

TEST(CanonicalFrame, FarOutsideVertexRejected) {
  Mesh tri;
  tri.vertices = {Vec3(0, 0, 0), Vec3(10, 0, 0), Vec3(0, 10, 0)};
  tri.faces = {{0, 1, 2}};
  CanonicalFrame f = make_canonical_frame(tri, "a", 1.0);
  Mesh far = tri;
  far.vertices[1] = Vec3(100, 0, 0);
  EXPECT_THROW(normalize_to_canonical(far, identity_pose(), f), ValidationError);
}

TEST(Mesh, ObjRoundTrip) {
  Volume m = ball_mask(15, 1.0, 5.0);
  Mesh mesh = mask_to_mesh(m, 1.0);
  auto dir = std::filesystem::temp_directory_path() / "issm_mesh_test";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "ball.obj").string();
  save_obj(mesh, path);
  Mesh back = load_obj(path);
  ASSERT_EQ(back.vertices.size(), mesh.vertices.size());
  ASSERT_EQ(back.faces.size(), mesh.faces.size());
  for (size_t i = 0; i < mesh.vertices.size(); ++i)
    ASSERT_LT((back.vertices[i] - mesh.vertices[i]).norm(), 1e-6);
  EXPECT_EQ(back.faces, mesh.faces);
}

TEST(Pose, Rot6dBasics) {
  Vec6 id6 = rot6d_identity();
  EXPECT_LT((rot6d_to_matrix(id6) - Mat3::Identity()).norm(), 1e-12);

  // b = (0,1,0,-1,0,0): columns (0,1,0), (-1,0,0), cross = (0,0,1)
  Vec6 b;
  b << 0, 1, 0, -1, 0, 0;
  Mat3 r = rot6d_to_matrix(b);
  Mat3 want;
  want << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  EXPECT_LT((r - want).norm(), 1e-12);

  // scaling b leaves the rotation unchanged
  EXPECT_LT((rot6d_to_matrix(2.0 * b) - r).norm(), 1e-12);

  Vec6 degenerate = Vec6::Zero();
  EXPECT_THROW(rot6d_to_matrix(degenerate), ValidationError);
  Vec6 parallel;
  parallel << 1, 0, 0, 2, 0, 0;
  EXPECT_THROW(rot6d_to_matrix(parallel), ValidationError);
}

TEST(Pose, Rot6dAlwaysOrthonormal) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    Vec6 b;
    for (int k = 0; k < 6; ++k) b[k] = g(rng);
    if (b.head<3>().norm() < 1e-3) continue;
    Mat3 r = rot6d_to_matrix(b);
    ASSERT_LT((r.transpose() * r - Mat3::Identity()).norm(), 1e-6);
    ASSERT_NEAR(r.determinant(), 1.0, 1e-6);
  }
}

TEST(Pose, ComposeBasics) {
  RigidPose omega;
  omega.t = Vec3(1, 2, 3);
  RigidPose idp = identity_pose();
  RigidPose same = compose(idp, omega);
  EXPECT_LT((same.t - omega.t).norm(), 1e-15);
  EXPECT_LT((same.matrix() - omega.matrix()).norm(), 1e-12);

  RigidPose inv;
  inv.t = Vec3(-1, -2, -3);
  RigidPose together = compose(inv, omega);
  EXPECT_LT(together.matrix().isApprox(Mat4::Identity(), 1e-12) ? 0.0 : 1.0, 0.5);

  // rotation 30deg z then 60deg z = 90deg z (matrix-product oracle)
  auto zrot = [](double deg) {
    RigidPose p;
    p.b = matrix_to_rot6d(
        Eigen::AngleAxisd(deg * M_PI / 180.0, Vec3::UnitZ()).toRotationMatrix());
    return p;
  };
  RigidPose r90 = compose(zrot(30), zrot(60));
  Mat4 want = zrot(90).matrix();
  Mat4 got = r90.matrix();
  EXPECT_LT((got - want).norm(), 1e-12);
  Mat4 product = zrot(30).matrix() * zrot(60).matrix();
  EXPECT_LT((got - product).norm(), 1e-12);
}

TEST(Pose, ComposeAssociative) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    auto rand_pose = [&]() {
      RigidPose p;
      p.t = Vec3(g(rng), g(rng), g(rng));
      p.s = Vec3(std::exp(0.1 * g(rng)), std::exp(0.1 * g(rng)), std::exp(0.1 * g(rng)));
      Vec6 b;
      for (int k = 0; k < 6; ++k) b[k] = g(rng);
      p.b = matrix_to_rot6d(rot6d_to_matrix(b));
      return p;
    };
    RigidPose a = rand_pose(), b = rand_pose(), c = rand_pose();
    Mat4 m1 = compose(compose(a, b), c).matrix();
    Mat4 m2 = compose(a, compose(b, c)).matrix();
    ASSERT_LT((m1 - m2).norm(), 1e-9);
  }
}

TEST(Pose, ApplyAndInverseAgree) {
  RigidPose p;
  p.t = Vec3(5, -3, 2);
  p.s = Vec3(1.2, 0.8, 1.0);
  p.b = matrix_to_rot6d(Eigen::AngleAxisd(0.4, Vec3(1, 1, 0).normalized()).toRotationMatrix());
  p.center = Vec3(10, 10, 10);
  Vec3 y(3, 4, 5);
  Vec3 x = p.apply(y);
  EXPECT_LT((p.apply_inverse(x) - y).norm(), 1e-12);
  Vec3 hx = (p.matrix() * y.homogeneous()).head<3>();
  EXPECT_LT((hx - x).norm(), 1e-12);
  Vec3 hy = (p.inverse_matrix() * x.homogeneous()).head<3>();
  EXPECT_LT((hy - y).norm(), 1e-12);
}

TEST(Pose, PerturbSchedules) {
  auto rng = seeded_rng(7, "perturb");
  // translation stage: only t changes, within +-40mm
  auto sched_t = default_schedule(Stage::translation);
  RigidPose base = identity_pose();
  for (int i = 0; i < 200; ++i) {
    RigidPose eta;
    RigidPose out = perturb_pose(base, sched_t, rng, &eta);
    for (int k = 0; k < 3; ++k) {
      ASSERT_LE(std::abs(eta.t[k]), 40.0);
      ASSERT_DOUBLE_EQ(eta.s[k], 1.0);
    }
    ASSERT_LT((eta.rotation() - Mat3::Identity()).norm(), 1e-12);
    ASSERT_LE(std::abs(out.t[0]), 40.0);
  }
  // scale stage: translation within +-16, scale within [0.7,1.3]
  auto sched_s = default_schedule(Stage::scale);
  bool saw_fine = false, saw_standard = false;
  for (int i = 0; i < 500; ++i) {
    RigidPose eta;
    perturb_pose(base, sched_s, rng, &eta);
    for (int k = 0; k < 3; ++k) {
      ASSERT_LE(std::abs(eta.t[k]), 16.0);
      ASSERT_GE(eta.s[k], 0.7 - 1e-12);
      ASSERT_LE(eta.s[k], 1.3 + 1e-12);
    }
    if (std::abs(eta.t[0]) > 8.0 || eta.s[0] < 0.9 || eta.s[0] > 1.1) saw_standard = true;
    else saw_fine = true;
  }
  EXPECT_TRUE(saw_fine);
  EXPECT_TRUE(saw_standard);
  // all-zero ranges: identity perturbation
  PerturbationSchedule none;
  none.standard = {0.0, {1.0, 1.0}, 0.0};
  none.fine = none.standard;
  RigidPose eta;
  RigidPose out = perturb_pose(base, none, rng, &eta);
  EXPECT_LT((out.matrix() - base.matrix()).norm(), 1e-12);
}

TEST(Pose, ScaleClipPenalty) {
  EXPECT_DOUBLE_EQ(scale_clip_penalty(Vec3(1, 1, 1)), 0.0);
  EXPECT_DOUBLE_EQ(scale_clip_penalty(Vec3(2.5, 1, 1)), 0.5);
  EXPECT_DOUBLE_EQ(scale_clip_penalty(Vec3(0.4, 1, 1)), 0.1);
}

TEST(Pose, JsonRoundTrip) {
  RigidPose p;
  p.t = Vec3(1, 2, 3);
  p.s = Vec3(1.1, 0.9, 1.05);
  p.b = matrix_to_rot6d(Eigen::AngleAxisd(0.3, Vec3::UnitY()).toRotationMatrix());
  p.center = Vec3(4, 5, 6);
  RigidPose q = pose_from_json(pose_to_json(p));
  EXPECT_LT((q.matrix() - p.matrix()).norm(), 1e-12);
}

TEST(Pose, FineRangeMustNestInStandard) {
  PerturbationSchedule bad = default_schedule(Stage::scale);
  bad.fine.trans_mm = 100.0;
  EXPECT_THROW(bad.validate(), ValidationError);
}
