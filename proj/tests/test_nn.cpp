#include "issm/nn.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "gradcheck.hpp"

using namespace issm;
using namespace issm::ad;
using namespace issm::nn;
using issm::testing::gradcheck;

namespace {

Tensor<double> randn(std::vector<int> shape, uint64_t seed, double scale = 1.0,
                     bool req = true, const std::string& name = "t") {
  auto t = make_tensor<double>(std::move(shape), req);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t->val) v = n(rng);
  t->name = name;
  return t;
}

}  // namespace

TEST(Nn, LinearIdentity) {
  auto x = make_tensor<double>({1, 3});
  x->val = {1, 2, 3};
  auto w = make_tensor<double>({3, 3});
  w->val = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  auto b = make_tensor<double>({3});
  auto y = linear(x, w, b);
  EXPECT_EQ(y->val, (std::vector<double>{1, 2, 3}));
}

TEST(Nn, TwoLayerMatchesHandProduct) {
  // y = (x W1^T) W2^T with 2x2 weights, no bias, no relu
  auto x = make_tensor<double>({1, 2});
  x->val = {1.0, -2.0};
  auto w1 = make_tensor<double>({2, 2});
  w1->val = {3, 1, -1, 2};  // rows are output neurons
  auto w2 = make_tensor<double>({2, 2});
  w2->val = {0.5, -1, 2, 1};
  auto b = make_tensor<double>({2});
  auto h = linear(x, w1, b);
  // h = (3*1 + 1*-2, -1*1 + 2*-2) = (1, -5)
  EXPECT_DOUBLE_EQ(h->val[0], 1.0);
  EXPECT_DOUBLE_EQ(h->val[1], -5.0);
  auto y = linear(h, w2, b);
  // y = (0.5*1 + -1*-5, 2*1 + 1*-5) = (5.5, -3)
  EXPECT_DOUBLE_EQ(y->val[0], 5.5);
  EXPECT_DOUBLE_EQ(y->val[1], -3.0);
}

TEST(Nn, LinearGradcheck) {
  auto x = randn({5, 4}, 1, 1.0, true, "x");
  auto w = randn({3, 4}, 2, 0.5, true, "w");
  auto b = randn({3}, 3, 0.5, true, "b");
  auto build = [&]() { return mean(square(linear(x, w, b))); };
  auto res = gradcheck(build, {x, w, b}, 20, 7);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Nn, WeightNormEffectiveWeight) {
  // the effective weight of a weight-normalized layer is g * v / ||v||
  auto v = randn({4, 3}, 5, 1.0, true, "v");
  auto g = randn({4}, 6, 1.0, true, "g");
  auto b = make_tensor<double>({4}, true);
  // probe with unit vectors to reconstruct each column of W
  for (int col = 0; col < 3; ++col) {
    auto x = make_tensor<double>({1, 3});
    x->val[col] = 1.0;
    auto y = weightnorm_linear(x, v, g, b);
    for (int o = 0; o < 4; ++o) {
      double nrm = 0;
      for (int p = 0; p < 3; ++p) nrm += v->val[o * 3 + p] * v->val[o * 3 + p];
      nrm = std::sqrt(nrm);
      EXPECT_NEAR(y->val[o], g->val[o] * v->val[o * 3 + col] / nrm, 1e-12);
    }
  }
}

TEST(Nn, WeightNormGradcheck) {
  for (uint64_t seed = 0; seed < 3; ++seed) {
    auto x = randn({4, 3}, seed, 1.0, true, "x");
    auto v = randn({5, 3}, seed + 10, 1.0, true, "v");
    auto g = randn({5}, seed + 20, 1.0, true, "g");
    auto b = randn({5}, seed + 30, 0.2, true, "b");
    auto build = [&]() { return mean(square(weightnorm_linear(x, v, g, b))); };
    auto res = gradcheck(build, {x, v, g, b}, 16, seed);
    EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
  }
}

TEST(Nn, Conv3dGradcheck) {
  for (uint64_t seed = 0; seed < 3; ++seed) {
    auto x = randn({2, 5, 4, 4}, seed, 1.0, true, "x");
    auto w = randn({3, 2, 3, 3, 3}, seed + 1, 0.3, true, "w");
    auto b = randn({3}, seed + 2, 0.2, true, "b");
    int stride = seed % 2 == 0 ? 1 : 2;
    auto build = [&]() { return mean(square(conv3d(x, w, b, stride, 1))); };
    auto res = gradcheck(build, {x, w, b}, 20, seed);
    EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
  }
}

TEST(Nn, PoolingAndUpsampleGradcheck) {
  auto x = randn({2, 4, 4, 4}, 3, 1.0, true, "x");
  auto build1 = [&]() { return mean(square(max_pool3d(x))); };
  auto r1 = gradcheck(build1, {x}, 16, 4);
  EXPECT_LT(r1.max_rel_err, 1e-4) << r1.worst;

  auto build2 = [&]() { return mean(square(global_avg_pool(x))); };
  auto r2 = gradcheck(build2, {x}, 16, 5);
  EXPECT_LT(r2.max_rel_err, 1e-4) << r2.worst;

  auto build3 = [&]() { return mean(square(upsample_nearest2(x))); };
  auto r3 = gradcheck(build3, {x}, 16, 6);
  EXPECT_LT(r3.max_rel_err, 1e-4) << r3.worst;

  auto y = randn({3, 4, 4, 4}, 7, 1.0, true, "y");
  auto build4 = [&]() { return mean(square(concat_channels(x, y))); };
  auto r4 = gradcheck(build4, {x, y}, 16, 8);
  EXPECT_LT(r4.max_rel_err, 1e-4) << r4.worst;
}

TEST(Nn, NetForwardDeterministic) {
  NetSpec spec;
  spec.latent_dim = 4;
  spec.layers = {DenseSpec{3, 16, true, 0.2, true}, DenseSpec{16, 16, true, 0.2, true},
                 ConcatLatentSpec{}, DenseSpec{20, 16, true, 0.2, true},
                 DenseSpec{16, 1, true, 0.0, false}};
  auto net = build_net<double>(spec, 99);
  auto x = randn({6, 3}, 1, 0.5, false, "x");
  auto z = randn({4}, 2, 0.1, false, "z");
  auto y1 = forward(net, x, z, true, 77);
  auto y2 = forward(net, x, z, true, 77);
  EXPECT_EQ(y1->val, y2->val);
  auto y3 = forward(net, x, z, true, 78);
  EXPECT_NE(y3->val, y1->val);
  // eval ignores dropout seed entirely
  auto e1 = forward(net, x, z, false, 1);
  auto e2 = forward(net, x, z, false, 999);
  EXPECT_EQ(e1->val, e2->val);
}

TEST(Nn, NetSpecValidation) {
  NetSpec bad;
  bad.layers = {DenseSpec{3, 16, false, 0.0, true}, DenseSpec{8, 4, false, 0.0, false}};
  EXPECT_THROW(validate_netspec(bad), ValidationError);
  NetSpec bad_drop;
  bad_drop.layers = {DenseSpec{3, 16, false, 1.0, true}};
  EXPECT_THROW(validate_netspec(bad_drop), ValidationError);
}

TEST(Nn, NetSpecJsonRoundTrip) {
  NetSpec spec;
  spec.latent_dim = 8;
  spec.layers = {Conv3dSpec{2, 8, 3, 2, 1, true}, ResBlock3dSpec{8, 16}, MaxPool3dSpec{},
                 GlobalAvgPoolSpec{}, DenseSpec{16, 3, false, 0.0, false}};
  auto j = netspec_to_json(spec);
  auto back = netspec_from_json(j);
  EXPECT_EQ(netspec_to_json(back), j);
}

TEST(Nn, ResBlockAndTrunkGradcheck) {
  NetSpec spec;
  spec.layers = {Conv3dSpec{2, 4, 3, 2, 1, true}, ResBlock3dSpec{4, 6}, MaxPool3dSpec{},
                 GlobalAvgPoolSpec{}};
  auto net = build_net<double>(spec, 5);
  auto x = randn({2, 6, 6, 6}, 8, 1.0, false, "x");
  auto build = [&]() { return mean(square(forward(net, x, false, 0))); };
  std::vector<Tensor<double>> params(net.params.begin(), net.params.end());
  auto res = gradcheck(build, params, 10, 31);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Nn, AdamFirstStepMatchesHandFormula) {
  auto w = make_tensor<double>({1}, true);
  w->val[0] = 1.0;
  w->grad[0] = 0.5;
  w->name = "w";
  std::vector<Tensor<double>> params{w};
  AdamState<double> state;
  adam_step(params, state, 0.001, 0.0);
  // bias-corrected first step: delta = -lr * g/|g| = -0.001
  EXPECT_NEAR(w->val[0], 1.0 - 0.001, 1e-9);
}

TEST(Nn, AdamZeroGradientNoChange) {
  auto w = make_tensor<double>({2}, true);
  w->val = {1.5, -2.0};
  std::vector<Tensor<double>> params{w};
  AdamState<double> state;
  adam_step(params, state, 0.01, 0.0);
  EXPECT_DOUBLE_EQ(w->val[0], 1.5);
  EXPECT_DOUBLE_EQ(w->val[1], -2.0);
}

TEST(Nn, AdamDecoupledDecay) {
  auto w = make_tensor<double>({1}, true);
  w->val[0] = 1.0;
  std::vector<Tensor<double>> params{w};
  AdamState<double> state;
  const double lr = 0.01, wd = 0.0001;
  adam_step(params, state, lr, wd);
  EXPECT_NEAR(w->val[0], 1.0 - lr * wd, 1e-15);
}

TEST(Nn, AdamRejectsBadInputs) {
  auto w = make_tensor<double>({1}, true);
  std::vector<Tensor<double>> params{w};
  AdamState<double> state;
  EXPECT_THROW(adam_step(params, state, 0.0, 0.0), ValidationError);
  w->grad[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(adam_step(params, state, 0.01, 0.0), std::runtime_error);
}

TEST(Nn, CheckpointRoundTrip) {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "issm_nn_test";
  fs::create_directories(dir);
  NetSpec spec;
  spec.latent_dim = 2;
  spec.layers = {DenseSpec{3, 8, true, 0.1, true}, ConcatLatentSpec{},
                 DenseSpec{10, 1, false, 0.0, false}};
  auto net = build_net<float>(spec, 11);
  nlohmann::json manifest;
  manifest["stage"] = "test";
  manifest["step_count"] = 42;
  manifest["rng_seed"] = 7;
  manifest["optimizer_state"] = false;
  manifest["arch"] = netspec_to_json(spec);
  std::string stem = (dir / "ckpt").string();
  save_checkpoint(stem, manifest, net_tensors(net));

  auto [m2, tensors] = load_checkpoint(stem);
  EXPECT_EQ(m2["stage"], "test");
  EXPECT_EQ(m2["step_count"], 42);
  auto net2 = build_net<float>(netspec_from_json(m2["arch"]), 999);
  load_net_tensors(net2, tensors);
  for (size_t i = 0; i < net.params.size(); ++i) {
    ASSERT_EQ(net2.params[i]->val.size(), net.params[i]->val.size());
    for (size_t j = 0; j < net.params[i]->val.size(); ++j)
      ASSERT_EQ(net2.params[i]->val[j], net.params[i]->val[j]);
  }
}
