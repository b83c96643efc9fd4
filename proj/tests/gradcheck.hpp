#pragma once

// Central finite-difference gradient checking used by the unit tests and the
// acceptance suite. Runs in double; the oracle is independent of the tape:
// it only re-evaluates forward values at perturbed parameters.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "issm/tensor.hpp"

namespace issm::testing {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
  std::string worst;
};

// `build_loss` must construct a fresh graph from the current parameter
// values each time it is called and return a scalar tensor.
inline GradCheckResult gradcheck(
    const std::function<ad::Tensor<double>()>& build_loss,
    const std::vector<ad::Tensor<double>>& params, int samples_per_tensor, uint64_t seed,
    double h = 1e-4) {
  GradCheckResult res;
  for (const auto& p : params) p->zero_grad();
  auto loss = build_loss();
  ad::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.push_back(p->grad);

  std::mt19937_64 rng(seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const int64_t n = p->numel();
    for (int s = 0; s < samples_per_tensor; ++s) {
      const int64_t j = static_cast<int64_t>(rng() % static_cast<uint64_t>(n));
      const double orig = p->val[j];
      p->val[j] = orig + h;
      const double fp = build_loss()->val[0];
      p->val[j] = orig - h;
      const double fm = build_loss()->val[0];
      p->val[j] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double adv = analytic[pi][j];
      const double denom = std::max({std::abs(fd), std::abs(adv), 1e-3});
      const double rel = std::abs(fd - adv) / denom;
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = p->name + "[" + std::to_string(j) + "] ad=" + std::to_string(adv) +
                    " fd=" + std::to_string(fd);
      }
    }
  }
  return res;
}

}  // namespace issm::testing
