#pragma once

// Coherent point drift, rigid + uniform scale (similarity) variant. The
// anchor cloud is the moving GMM; the recovered transform is the placement
// pose of the source shape relative to the anchor.

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "issm/mesh.hpp"

namespace issm {

struct CpdResult {
  RigidPose pose;       // placement: anchor -> source (uniform scale)
  bool converged = false;
  int iterations = 0;
  double sigma2 = 0.0;
};

// Express the same transform about a different pivot.
inline RigidPose rebase_center(const RigidPose& p, const Vec3& new_center) {
  RigidPose out = p;
  out.center = new_center;
  Mat3 rs = p.rotation() * p.s.asDiagonal();
  // match translations: c' + t' - RS c' = c + t - RS c
  out.t = p.center + p.t - rs * p.center - (new_center - rs * new_center);
  return out;
}

inline CpdResult cpd_rigid_align(const Mesh& src, const Mesh& anchor, double tol = 1e-6,
                                 int max_iterations = 150, double outlier_w = 0.0) {
  if (src.vertices.empty() || anchor.vertices.empty())
    throw ValidationError("cpd_rigid_align: empty mesh");

  const int N = static_cast<int>(src.vertices.size());     // target (fixed)
  const int M = static_cast<int>(anchor.vertices.size());  // moving GMM centroids
  const int D = 3;

  Eigen::MatrixXd X(N, D), Y(M, D);
  for (int n = 0; n < N; ++n) X.row(n) = src.vertices[n].transpose();
  for (int m = 0; m < M; ++m) Y.row(m) = anchor.vertices[m].transpose();

  // centroid-aligned start keeps the GMM from collapsing when the clouds
  // begin far apart
  Vec3 mu_x0 = X.colwise().mean(), mu_y0 = Y.colwise().mean();
  Mat3 R = Mat3::Identity();
  double s = 1.0;
  Vec3 t = mu_x0 - mu_y0;

  double sigma2 = 0.0;
  for (int n = 0; n < N; ++n)
    for (int m = 0; m < M; ++m)
      sigma2 += ((X.row(n) - mu_x0.transpose()) - (Y.row(m) - mu_y0.transpose())).squaredNorm();
  sigma2 /= static_cast<double>(D) * M * N;

  double prev_obj = std::numeric_limits<double>::infinity();
  CpdResult best;
  best.pose.s = Vec3::Ones();

  Eigen::MatrixXd T(M, D), P(M, N);
  for (int it = 0; it < max_iterations; ++it) {
    // E-step
    for (int m = 0; m < M; ++m)
      T.row(m) = (s * (R * Y.row(m).transpose()) + t).transpose();
    const double c_out =
        outlier_w > 0.0
            ? std::pow(2.0 * M_PI * sigma2, 1.5) * outlier_w / (1.0 - outlier_w) *
                  static_cast<double>(M) / N
            : 0.0;
    double nll = 0.0;
    Eigen::VectorXd Pt1(N), P1 = Eigen::VectorXd::Zero(M);
    for (int n = 0; n < N; ++n) {
      double denom = c_out;
      for (int m = 0; m < M; ++m) {
        double e = std::exp(-(X.row(n) - T.row(m)).squaredNorm() / (2.0 * sigma2));
        P(m, n) = e;
        denom += e;
      }
      if (denom < 1e-290) denom = 1e-290;
      for (int m = 0; m < M; ++m) P(m, n) /= denom;
      Pt1[n] = 1.0 - c_out / denom;
      nll -= std::log(denom);
    }
    nll += N * D * 0.5 * std::log(sigma2);
    for (int m = 0; m < M; ++m) P1[m] = P.row(m).sum();
    const double Np = P1.sum();
    if (Np < 1e-12) break;

    // M-step (closed-form similarity update)
    Vec3 mu_x = X.transpose() * Pt1 / Np;
    Vec3 mu_y = Y.transpose() * P1 / Np;
    Eigen::MatrixXd Xc = X.rowwise() - mu_x.transpose();
    Eigen::MatrixXd Yc = Y.rowwise() - mu_y.transpose();
    Mat3 A = Xc.transpose() * P.transpose() * Yc;
    Eigen::JacobiSVD<Mat3> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 C = Mat3::Identity();
    C(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant();
    R = svd.matrixU() * C * svd.matrixV().transpose();
    const double trAR = (svd.singularValues().asDiagonal() * C).trace();
    double denom_s = 0.0;
    for (int m = 0; m < M; ++m) denom_s += P1[m] * Yc.row(m).squaredNorm();
    s = trAR / std::max(denom_s, 1e-30);
    t = mu_x - s * (R * mu_y);
    double num_sig = 0.0;
    for (int n = 0; n < N; ++n) num_sig += Pt1[n] * Xc.row(n).squaredNorm();
    sigma2 = std::max((num_sig - s * trAR) / (Np * D), 1e-12);

    best.pose.t = t;
    best.pose.s = Vec3::Constant(s);
    best.pose.b = matrix_to_rot6d(R);
    best.pose.center = Vec3::Zero();
    best.iterations = it + 1;
    best.sigma2 = sigma2;

    const double rel = std::abs(nll - prev_obj) / std::max(1.0, std::abs(nll));
    prev_obj = nll;
    if (it > 0 && rel < tol) {
      best.converged = true;
      break;
    }
  }
  return best;
}

}  // namespace issm
