#include "issm/shape_space.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace issm;

namespace {

// brute-force oracle: full eigendecomposition, independent reimplementation
std::pair<Eigen::VectorXd, Eigen::MatrixXd> oracle_pca(const std::vector<Eigen::VectorXd>& zs) {
  const int d = static_cast<int>(zs[0].size());
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
  for (const auto& z : zs) mu += z;
  mu /= static_cast<double>(zs.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& z : zs) cov += (z - mu) * (z - mu).transpose();
  cov /= static_cast<double>(zs.size() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  return {eig.eigenvalues(), eig.eigenvectors()};
}

std::vector<Eigen::VectorXd> two_factor_latents(int n, int d, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::VectorXd dir1(d), dir2(d), base(d);
  for (int i = 0; i < d; ++i) {
    dir1[i] = g(rng);
    dir2[i] = g(rng);
    base[i] = 0.1 * g(rng);
  }
  dir1.normalize();
  dir2 -= dir1.dot(dir2) * dir1;
  dir2.normalize();
  std::vector<Eigen::VectorXd> zs;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd z = base + 3.0 * g(rng) * dir1 + 1.5 * g(rng) * dir2;
    for (int k = 0; k < d; ++k) z[k] += 0.01 * g(rng);  // tiny nuisance
    zs.push_back(z);
  }
  return zs;
}

}  // namespace

TEST(ShapeSpace, CollinearLatentsOneComponent) {
  Eigen::VectorXd dir(4);
  dir << 1, 2, -1, 0.5;
  std::vector<Eigen::VectorXd> zs{0.0 * dir, 1.0 * dir, 2.0 * dir};
  ShapeSpace s = fit_pca(zs, 0.9);
  EXPECT_EQ(s.n_components(), 1);
  EXPECT_NEAR(s.explained_variance, 1.0, 1e-9);
}

TEST(ShapeSpace, TwoFactorModelCaptured) {
  auto zs = two_factor_latents(50, 16, 3);
  ShapeSpace s = fit_pca(zs, 0.95);
  EXPECT_LE(s.n_components(), 3);
  ShapeSpace s2 = fit_pca(zs, 0.90);
  EXPECT_EQ(s2.n_components(), 2);
  // first two components capture > 95%
  auto [ev, evec] = oracle_pca(zs);
  int d = static_cast<int>(ev.size());
  double top2 = ev[d - 1] + ev[d - 2];
  EXPECT_GT(top2 / ev.sum(), 0.95);
}

TEST(ShapeSpace, MatchesOracleComponentCount) {
  auto zs = two_factor_latents(40, 12, 9);
  double target = 0.72;
  ShapeSpace s = fit_pca(zs, target);
  auto [ev, evec] = oracle_pca(zs);
  int d = static_cast<int>(ev.size());
  double total = ev.sum();
  int want = 1;
  double acc = 0.0;
  for (int i = 0; i < std::min(d, 39); ++i) {
    acc += ev[d - 1 - i];
    want = i + 1;
    if (acc / total >= target) break;
  }
  EXPECT_EQ(s.n_components(), want);
  // eigenvector agreement up to sign for the kept components
  for (int i = 0; i < s.n_components(); ++i) {
    Eigen::VectorXd a = s.basis.col(i), b = evec.col(d - 1 - i);
    double align = std::abs(a.dot(b));
    EXPECT_NEAR(align, 1.0, 1e-9);
  }
}

TEST(ShapeSpace, LoadingsRoundTrip) {
  auto zs = two_factor_latents(30, 8, 5);
  ShapeSpace s = fit_pca(zs, 1.0);
  // lambda = 0 -> mean
  Eigen::VectorXd z0 = latent_from_loadings(s, Eigen::VectorXd::Zero(s.n_components()));
  EXPECT_LT((z0 - s.mean).norm(), 1e-12);
  // +1 std along first axis
  Eigen::VectorXd lam = Eigen::VectorXd::Zero(s.n_components());
  lam[0] = std::sqrt(s.variances[0]);
  Eigen::VectorXd z1 = latent_from_loadings(s, lam);
  EXPECT_NEAR((z1 - s.mean).norm(), std::sqrt(s.variances[0]), 1e-9);
  // project-back identity for z in span
  Eigen::VectorXd rec = loadings_from_latent(s, z1);
  EXPECT_LT((rec - lam).norm(), 1e-9);
  // length mismatch
  EXPECT_THROW(latent_from_loadings(s, Eigen::VectorXd::Zero(s.n_components() + 1)),
               ValidationError);
}

TEST(ShapeSpace, PcaReconstructionIdentity) {
  auto zs = two_factor_latents(25, 10, 7);
  ShapeSpace s = fit_pca(zs, 0.80);
  auto [ev, evec] = oracle_pca(zs);
  double discarded = 0.0;
  for (int i = 0; i < static_cast<int>(ev.size()) - s.n_components(); ++i)
    discarded += std::max(ev[i], 0.0);
  // mean squared residual (per-sample, n-1 normalized) equals discarded variance
  double resid = 0.0;
  for (const auto& z : zs) {
    Eigen::VectorXd back = latent_from_loadings(s, loadings_from_latent(s, z));
    resid += (z - back).squaredNorm();
  }
  resid /= static_cast<double>(zs.size() - 1);
  EXPECT_NEAR(resid, discarded, 1e-6 * std::max(1.0, discarded));
}

TEST(ShapeSpace, Interpolate) {
  Eigen::VectorXd a(3), b(3);
  a << 1, 2, 3;
  b << -1, 0, 5;
  EXPECT_LT((interpolate(a, b, 0.0) - a).norm(), 1e-15);
  EXPECT_LT((interpolate(a, b, 1.0) - b).norm(), 1e-15);
  EXPECT_LT(interpolate(a, -a, 0.5).norm(), 1e-15);
  Eigen::VectorXd q = interpolate(a, b, 0.25);
  // hand arithmetic: 0.75*a + 0.25*b
  EXPECT_NEAR(q[0], 0.5, 1e-15);
  EXPECT_NEAR(q[1], 1.5, 1e-15);
  EXPECT_NEAR(q[2], 3.5, 1e-15);
  Eigen::VectorXd c(2);
  EXPECT_THROW(interpolate(a, c, 0.5), ValidationError);
}

TEST(ShapeSpace, PerturbLatent) {
  Eigen::VectorXd z = Eigen::VectorXd::Constant(6, 2.0);
  EXPECT_LT((perturb_latent(z, 0.0, 1) - z).norm(), 1e-15);
  // deterministic per seed
  EXPECT_LT((perturb_latent(z, 0.01, 5) - perturb_latent(z, 0.01, 5)).norm(), 1e-15);
  // empirical std over many draws ~ 0.01 within 10%
  double acc = 0.0;
  int count = 0;
  for (int i = 0; i < 2000; ++i) {
    Eigen::VectorXd p = perturb_latent(z, 0.01, 1000 + i) - z;
    acc += p.squaredNorm();
    count += static_cast<int>(z.size());
  }
  double emp = std::sqrt(acc / count);
  EXPECT_NEAR(emp, 0.01, 0.001);
  EXPECT_THROW(perturb_latent(z, -1.0, 0), ValidationError);
}

TEST(ShapeSpace, RejectsDegenerateInput) {
  std::vector<Eigen::VectorXd> one{Eigen::VectorXd::Zero(3)};
  EXPECT_THROW(fit_pca(one, 0.9), ValidationError);
  auto zs = two_factor_latents(5, 4, 1);
  EXPECT_THROW(fit_pca(zs, 0.0), ValidationError);
  EXPECT_THROW(fit_pca(zs, 1.5), ValidationError);
}
