#pragma once

// Statistics over trained latent codes: mean shape, truncated PCA basis,
// loading <-> latent conversion, interpolation, and latent perturbation.

#include <Eigen/Dense>
#include <random>
#include <vector>

#include "issm/core.hpp"

namespace issm {

struct ShapeSpace {
  Eigen::VectorXd mean;
  Eigen::MatrixXd basis;       // latent_dim x n_components, orthonormal columns
  Eigen::VectorXd variances;   // per kept component, non-increasing
  double explained_variance = 0.0;

  int latent_dim() const { return static_cast<int>(mean.size()); }
  int n_components() const { return static_cast<int>(basis.cols()); }

  void validate() const {
    if (basis.rows() != mean.size()) throw ValidationError("shape space: basis/mean mismatch");
    Eigen::MatrixXd gram = basis.transpose() * basis;
    if ((gram - Eigen::MatrixXd::Identity(basis.cols(), basis.cols())).norm() > 1e-6)
      throw ValidationError("shape space: basis not orthonormal");
    for (int i = 1; i < variances.size(); ++i)
      if (variances[i] > variances[i - 1] + 1e-12)
        throw ValidationError("shape space: variances not sorted");
  }
};

// Centered PCA via eigendecomposition of the latent covariance; keeps the
// smallest component count reaching the target explained variance (capped at
// count-1). Basis sign convention: largest-magnitude entry positive.
inline ShapeSpace fit_pca(const std::vector<Eigen::VectorXd>& latents, double target_explained) {
  if (latents.size() < 2) throw ValidationError("fit_pca: need at least 2 latents");
  if (!(target_explained > 0.0 && target_explained <= 1.0))
    throw ValidationError("fit_pca: target explained variance must be in (0,1]");
  const int d = static_cast<int>(latents[0].size());
  const int k = static_cast<int>(latents.size());
  for (const auto& z : latents)
    if (z.size() != d) throw ValidationError("fit_pca: latent length mismatch");

  ShapeSpace space;
  space.mean = Eigen::VectorXd::Zero(d);
  for (const auto& z : latents) space.mean += z;
  space.mean /= static_cast<double>(k);

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& z : latents) {
    Eigen::VectorXd c = z - space.mean;
    cov += c * c.transpose();
  }
  cov /= static_cast<double>(k - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // ascending eigenvalues -> take from the back
  const double total = std::max(eig.eigenvalues().cwiseMax(0.0).sum(), 1e-300);
  const int max_keep = std::min(d, k - 1);
  int keep = 1;
  double acc = 0.0;
  for (int i = 0; i < max_keep; ++i) {
    acc += std::max(eig.eigenvalues()[d - 1 - i], 0.0);
    keep = i + 1;
    if (acc / total >= target_explained) break;
  }
  space.basis.resize(d, keep);
  space.variances.resize(keep);
  double kept_var = 0.0;
  for (int i = 0; i < keep; ++i) {
    Eigen::VectorXd col = eig.eigenvectors().col(d - 1 - i);
    int arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col[arg] < 0.0) col = -col;
    space.basis.col(i) = col;
    space.variances[i] = std::max(eig.eigenvalues()[d - 1 - i], 0.0);
    kept_var += space.variances[i];
  }
  space.explained_variance = kept_var / total;
  space.validate();
  return space;
}

// z = mean + W * loadings
inline Eigen::VectorXd latent_from_loadings(const ShapeSpace& space,
                                            const Eigen::VectorXd& loadings) {
  if (loadings.size() != space.n_components())
    throw ValidationError("latent_from_loadings: loading length mismatch");
  return space.mean + space.basis * loadings;
}

// loadings = W^T (z - mean); exact inverse for z in the affine span
inline Eigen::VectorXd loadings_from_latent(const ShapeSpace& space, const Eigen::VectorXd& z) {
  if (z.size() != space.latent_dim())
    throw ValidationError("loadings_from_latent: latent length mismatch");
  return space.basis.transpose() * (z - space.mean);
}

inline Eigen::VectorXd interpolate(const Eigen::VectorXd& z0, const Eigen::VectorXd& z1,
                                   double alpha) {
  if (z0.size() != z1.size()) throw ValidationError("interpolate: latent length mismatch");
  return (1.0 - alpha) * z0 + alpha * z1;
}

inline Eigen::VectorXd perturb_latent(const Eigen::VectorXd& z, double std_dev,
                                      uint64_t rng_seed) {
  if (std_dev < 0.0) throw ValidationError("perturb_latent: std must be non-negative");
  if (std_dev == 0.0) return z;
  auto rng = seeded_rng(rng_seed, "latent-perturb");
  std::normal_distribution<double> gauss(0.0, std_dev);
  Eigen::VectorXd out = z;
  for (int i = 0; i < out.size(); ++i) out[i] += gauss(rng);
  return out;
}

}  // namespace issm
