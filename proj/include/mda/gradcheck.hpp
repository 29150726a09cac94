#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mda/ops.hpp"
#include "mda/tensor.hpp"

// Central-finite-difference verification of analytic gradients. Always run
// in 64-bit: with eps around 1e-6 the difference quotient only carries
// ~1e-10 of accuracy, which 32-bit arithmetic would swamp.
namespace mda {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::string worst;       // "input 2, element 17" style locator
  int kink_skips = 0;      // elements excluded as non-smooth (see below)

  // Relative error with an absolute floor: elements where both gradients are
  // below the floor compare absolutely, so noise on near-zero gradients does
  // not fail the check while genuinely wrong small gradients still do.
  static double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    return std::abs(analytic - numeric) / denom;
  }
};

// f maps the given leaves to a scalar loss; it must be pure (fix any seeds
// inside the closure). Checks d loss/d leaf for every requires_grad leaf.
inline GradCheckReport grad_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> leaves, double eps = 1e-6, double tol = 1e-4) {
  for (auto& leaf : leaves) leaf.zero_grad();
  Tensor<double> loss = f(leaves);
  backward(loss);

  GradCheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double>& leaf = leaves[li];
    if (!leaf.requires_grad()) continue;
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) {
      auto g = leaf.grad();
      analytic.assign(g.begin(), g.end());
    }
    auto& vals = leaf.mutable_values();
    auto eval_at = [&](std::size_t i, double delta) {
      const double saved = vals[i];
      vals[i] = saved + delta;
      const double y = f(leaves).item();
      vals[i] = saved;
      return y;
    };
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double up = eval_at(i, eps);
      const double down = eval_at(i, -eps);
      const double numeric = (up - down) / (2.0 * eps);
      double err = GradCheckReport::rel_err(analytic[i], numeric);
      if (err > tol) {
        // The network is only piecewise smooth (ReLU, max pooling): when the
        // perturbation straddles a kink the central difference measures a
        // blend of two regimes, not the derivative. Two symptoms identify
        // that, and such elements are excluded rather than failed:
        //   - the estimate is eps-unstable (kink strictly inside the step), or
        //   - the one-sided differences disagree (kink at the point itself,
        //     e.g. a dead channel sitting exactly on relu(0)).
        // A wrong backward rule produces an eps-stable, locally linear
        // mismatch and still fails.
        const double refined =
            (eval_at(i, 0.5 * eps) - eval_at(i, -0.5 * eps)) / eps;
        if (GradCheckReport::rel_err(refined, numeric) > tol) {
          ++report.kink_skips;
          continue;
        }
        const double center = eval_at(i, 0.0);
        const double fwd = (up - center) / eps;
        const double bwd = (center - down) / eps;
        if (GradCheckReport::rel_err(fwd, bwd) > 10.0 * tol) {
          ++report.kink_skips;
          continue;
        }
        err = GradCheckReport::rel_err(analytic[i], refined);
      }
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst = "leaf " + std::to_string(li) + ", element " + std::to_string(i) +
                       " (analytic " + std::to_string(analytic[i]) + ", numeric " +
                       std::to_string(numeric) + ")";
      }
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

// Reduces an arbitrary tensor to a scalar via a fixed random weighting, so a
// network output can be gradient-checked end to end with O(1) magnitudes.
template <typename T>
Tensor<T> weighted_sum_loss(const Tensor<T>& out, std::uint64_t seed) {
  Tensor<T> weights = Tensor<T>::uniform(out.shape(), T(0.5), T(1.5), seed);
  return sum_all(mul(out, weights));
}

}  // namespace mda
