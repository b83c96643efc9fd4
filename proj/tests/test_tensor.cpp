#include "issm/tensor.hpp"

#include <gtest/gtest.h>

#include "gradcheck.hpp"

using namespace issm;
using namespace issm::ad;
using issm::testing::gradcheck;

namespace {

Tensor<double> randn_param(std::vector<int> shape, uint64_t seed, double scale = 1.0,
                           const std::string& name = "p") {
  auto t = make_tensor<double>(std::move(shape), true);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t->val) v = n(rng);
  t->name = name;
  return t;
}

}  // namespace

TEST(Tensor, SquareScalarDerivative) {
  auto x = randn_param({1}, 0);
  x->val[0] = 3.0;
  auto y = sum(square(x));
  backward(y);
  EXPECT_DOUBLE_EQ(x->grad[0], 6.0);
}

TEST(Tensor, BackwardTwiceThrows) {
  auto x = randn_param({1}, 0);
  auto y = sum(square(x));
  backward(y);
  EXPECT_THROW(backward(y), std::runtime_error);
}

TEST(Tensor, ElementwiseOpsGradcheck) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    auto a = randn_param({4, 3}, seed, 1.0, "a");
    auto b = randn_param({4, 3}, seed + 100, 1.0, "b");
    // keep |values| away from the abs/sqrt kinks
    for (auto& v : a->val) v += (v >= 0 ? 0.5 : -0.5);
    for (auto& v : b->val) v += (v >= 0 ? 0.5 : -0.5);
    auto build = [&]() {
      auto t1 = mul(add(a, b), sub(a, scale(b, 0.3)));
      auto t2 = abs(t1);
      auto t3 = add(sqrt(add_scalar(square(a), 0.1)), exp(scale(b, 0.2)));
      auto t4 = reciprocal(add_scalar(square(b), 1.0));
      return mean(add(add(t2, t3), t4));
    };
    auto res = gradcheck(build, {a, b}, 12, seed);
    EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
  }
}

TEST(Tensor, ReluAbsSubgradientAtZero) {
  auto a = make_tensor<double>({3}, true);
  a->val = {-1.0, 0.0, 2.0};
  auto y = sum(add(relu(a), abs(a)));
  backward(y);
  EXPECT_DOUBLE_EQ(a->grad[0], -1.0);  // only abs contributes
  EXPECT_DOUBLE_EQ(a->grad[1], 0.0);   // subgradient 0 at the kink
  EXPECT_DOUBLE_EQ(a->grad[2], 2.0);
}

TEST(Tensor, MatmulGradcheck) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    auto a = randn_param({3, 4}, seed, 1.0, "a");
    auto b = randn_param({4, 2}, seed + 7, 1.0, "b");
    auto build = [&]() { return mean(square(matmul(a, b))); };
    auto res = gradcheck(build, {a, b}, 16, seed);
    EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
  }
}

TEST(Tensor, MatmulMatchesHandComputation) {
  auto a = make_tensor<double>({2, 2});
  a->val = {1, 2, 3, 4};
  auto b = make_tensor<double>({2, 2});
  b->val = {5, 6, 7, 8};
  auto c = matmul(a, b);
  EXPECT_DOUBLE_EQ(c->val[0], 19.0);
  EXPECT_DOUBLE_EQ(c->val[1], 22.0);
  EXPECT_DOUBLE_EQ(c->val[2], 43.0);
  EXPECT_DOUBLE_EQ(c->val[3], 50.0);
}

TEST(Tensor, ShapeOpsGradcheck) {
  auto a = randn_param({3, 4}, 2, 1.0, "a");
  auto v = randn_param({4}, 3, 1.0, "v");
  for (auto& x : v->val) x += (x >= 0 ? 0.5 : -0.5);
  auto build = [&]() {
    auto t = concat_cols(sub_rowvec(a, v), tile_rows(v, 3));
    auto u = mul_colwise(a, v);
    auto s = slice_flat(reshape(t, {24}), 3, 10);
    return add(mean(square(s)), mean(square(u)));
  };
  auto res = gradcheck(build, {a, v}, 16, 11);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Tensor, Cross3AndStackGradcheck) {
  auto a = randn_param({3}, 4, 1.0, "a");
  auto b = randn_param({3}, 5, 1.0, "b");
  auto build = [&]() {
    auto c = cross3(a, b);
    auto m = stack_cols3(a, b, c);
    return mean(square(matmul(m, m)));
  };
  auto res = gradcheck(build, {a, b}, 12, 21);
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Tensor, DropoutSemantics) {
  auto a = randn_param({50, 4}, 9, 1.0, "a");
  // eval mode: exact identity
  auto y_eval = dropout(a, 0.2, /*train=*/false, 123);
  EXPECT_EQ(y_eval.get(), a.get());
  // train mode: deterministic per seed
  auto y1 = dropout(a, 0.2, true, 123);
  auto y2 = dropout(a, 0.2, true, 123);
  EXPECT_EQ(y1->val, y2->val);
  auto y3 = dropout(a, 0.2, true, 124);
  EXPECT_NE(y3->val, y1->val);
  // kept entries scaled by 1/(1-p)
  int zeros = 0;
  for (size_t i = 0; i < y1->val.size(); ++i) {
    if (y1->val[i] == 0.0) {
      ++zeros;
    } else {
      EXPECT_NEAR(y1->val[i], a->val[i] / 0.8, 1e-12);
    }
  }
  EXPECT_GT(zeros, 10);
  EXPECT_LT(zeros, 90);
  EXPECT_THROW(dropout(a, 1.0, true, 1), ValidationError);
}

TEST(Tensor, SumMeanValues) {
  auto a = make_tensor<double>({2, 2});
  a->val = {1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(sum(a)->val[0], 10.0);
  EXPECT_DOUBLE_EQ(mean(a)->val[0], 2.5);
}

TEST(Tensor, DeterministicAcrossThreadCounts) {
  // matmul partitions outputs; each element is reduced serially, so the
  // result must be identical bitwise however many threads run.
  auto a = randn_param({17, 33}, 42, 1.0, "a");
  auto b = randn_param({33, 9}, 43, 1.0, "b");
  auto c1 = matmul(a, b);
  auto c2 = matmul(a, b);
  EXPECT_EQ(c1->val, c2->val);
}

TEST(Tensor, ShapeMismatchThrows) {
  auto a = make_tensor<double>({2, 3});
  auto b = make_tensor<double>({3, 2});
  EXPECT_THROW(add(a, b), ValidationError);
  EXPECT_THROW(matmul(a, a), ValidationError);
}
