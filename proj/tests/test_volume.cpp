#include "issm/volume.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>

using namespace issm;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / "issm_volume_test";
  fs::create_directories(p);
  return p;
}

Volume noise_volume(std::array<int, 3> dims, uint64_t seed) {
  Volume v = make_volume(dims, {1.0, 1.0, 1.0}, {0, 0, 0}, VolumeKind::image);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-10.f, 10.f);
  for (auto& x : v.data) x = u(rng);
  return v;
}

}  // namespace

TEST(Volume, RoundTripIsBitIdentical) {
  auto dir = temp_dir();
  Volume v = noise_volume({4, 4, 4}, 7);
  v.spacing = {0.7, 1.3, 2.1};
  v.origin = {-3.0, 5.0, 0.25};
  std::string stem = (dir / "rt").string();
  save_volume(v, stem);
  Volume w = load_volume(stem);
  EXPECT_EQ(w.dims, v.dims);
  EXPECT_EQ(w.spacing, v.spacing);
  EXPECT_EQ(w.origin, v.origin);
  EXPECT_EQ(w.kind, v.kind);
  ASSERT_EQ(w.data.size(), v.data.size());
  EXPECT_EQ(0, std::memcmp(w.data.data(), v.data.data(), v.data.size() * sizeof(float)));

  // save again: blob bytes identical
  std::string stem2 = (dir / "rt2").string();
  save_volume(w, stem2);
  auto b1 = read_file_bytes(stem + ".bin");
  auto b2 = read_file_bytes(stem2 + ".bin");
  EXPECT_EQ(b1, b2);
}

TEST(Volume, BlobSizeMismatchRejected) {
  auto dir = temp_dir();
  Volume v = noise_volume({2, 2, 2}, 3);
  std::string stem = (dir / "short").string();
  save_volume(v, stem);
  // truncate blob to 7 floats
  std::vector<float> seven(7, 1.0f);
  write_file_atomic(stem + ".bin", seven.data(), seven.size() * sizeof(float));
  EXPECT_THROW(load_volume(stem), ValidationError);
}

TEST(Volume, MaskDomainValidated) {
  auto dir = temp_dir();
  Volume v = make_volume({2, 2, 2}, {1, 1, 1}, {0, 0, 0}, VolumeKind::mask);
  v.data[3] = 1.0f;
  std::string stem = (dir / "mask").string();
  save_volume(v, stem);
  // corrupt one voxel to 2.0
  auto blob = read_file_bytes(stem + ".bin");
  float two = 2.0f;
  std::memcpy(blob.data(), &two, sizeof(float));
  write_file_atomic(stem + ".bin", blob.data(), blob.size());
  EXPECT_THROW(load_volume(stem), ValidationError);
}

TEST(Volume, MissingFile) {
  EXPECT_THROW(load_volume("/nonexistent/path/vol"), std::runtime_error);
}

TEST(Volume, SingleVoxelEncoding) {
  auto dir = temp_dir();
  Volume v = make_volume({1, 1, 1}, {1, 1, 1}, {0, 0, 0}, VolumeKind::image, 0.5f);
  std::string stem = (dir / "single").string();
  save_volume(v, stem);
  auto blob = read_file_bytes(stem + ".bin");
  ASSERT_EQ(blob.size(), 4u);
  // IEEE-754 0.5f little endian = 00 00 00 3F
  EXPECT_EQ(static_cast<unsigned char>(blob[0]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(blob[1]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(blob[2]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(blob[3]), 0x3F);
}

TEST(Volume, OverwriteReplacesAtomically) {
  auto dir = temp_dir();
  std::string stem = (dir / "over").string();
  save_volume(noise_volume({8, 8, 8}, 1), stem);
  Volume small = noise_volume({2, 2, 2}, 2);
  save_volume(small, stem);
  Volume got = load_volume(stem);
  EXPECT_EQ(got.dims, small.dims);
  EXPECT_EQ(0, std::memcmp(got.data.data(), small.data.data(), small.data.size() * sizeof(float)));
}

TEST(Volume, UnwritableDirectoryFails) {
  Volume v = noise_volume({2, 2, 2}, 5);
  EXPECT_THROW(save_volume(v, "/nonexistent_dir_xyz/vol"), std::runtime_error);
}

TEST(Volume, ClipIntensities) {
  Volume v = make_volume({3, 1, 1}, {1, 1, 1}, {0, 0, 0}, VolumeKind::image);
  v.data = {-500.f, 100.f, 999.f};
  Volume c = clip_intensities(v, -160.0, 240.0);
  EXPECT_FLOAT_EQ(c.data[0], -160.f);
  EXPECT_FLOAT_EQ(c.data[1], 100.f);
  EXPECT_FLOAT_EQ(c.data[2], 240.f);
  EXPECT_THROW(clip_intensities(v, 1.0, 1.0), ValidationError);
  EXPECT_THROW(clip_intensities(v, 2.0, 1.0), ValidationError);
}

TEST(Volume, TrilinearSampleInterpolates) {
  Volume v = make_volume({2, 2, 2}, {2, 2, 2}, {0, 0, 0}, VolumeKind::image);
  // linear field f(x,y,z) = x + 10y + 100z (in mm units)
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        auto p = v.voxel_center(x, y, z);
        v.at(x, y, z) = static_cast<float>(p[0] + 10 * p[1] + 100 * p[2]);
      }
  EXPECT_NEAR(sample_trilinear(v, 1.0, 0.5, 1.5, -1), 1.0 + 5.0 + 150.0, 1e-9);
  EXPECT_DOUBLE_EQ(sample_trilinear(v, -0.1, 0, 0, -1), -1.0);  // out of grid
}

TEST(Volume, ResampleIdentityGrid) {
  Volume v = noise_volume({5, 4, 3}, 11);
  Volume r = resample(v, v.dims, v.spacing, v.origin, 0.0);
  for (size_t i = 0; i < v.data.size(); ++i) ASSERT_NEAR(r.data[i], v.data[i], 1e-5);
}

TEST(Volume, GaussianSmoothPreservesMass) {
  Volume v = make_volume({9, 9, 9}, {1, 1, 1}, {0, 0, 0}, VolumeKind::image);
  v.at(4, 4, 4) = 1.0f;
  Volume s = gaussian_smooth(v, 1.0);
  double mass = 0.0;
  for (float x : s.data) mass += x;
  EXPECT_NEAR(mass, 1.0, 1e-4);
  EXPECT_GT(s.at(4, 4, 4), s.at(3, 4, 4));
  // symmetric around the impulse
  EXPECT_FLOAT_EQ(s.at(3, 4, 4), s.at(5, 4, 4));
  EXPECT_FLOAT_EQ(s.at(4, 2, 4), s.at(4, 6, 4));
}
