#pragma once

// Central finite-difference gradient checker. Deliberately ignorant of how
// backward rules are implemented: it only re-runs the forward closure with
// perturbed leaf values and compares difference quotients against the
// gradients backward() left behind.

#include <functional>
#include <string>
#include <vector>

#include "ean/rng.hpp"
#include "ean/tensor.hpp"

namespace ean {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;

  bool pass(double tol = 1e-4) const { return checked > 0 && max_rel_err < tol; }
};

// Relative error with an absolute floor: coordinates whose gradients sit
// below `floor` compare absolutely at tol*floor, since difference quotients
// of an O(1) loss carry ~1e-11 of cancellation noise that would swamp a true
// relative comparison there.
inline double relative_error(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// `forward` must be a deterministic function of the leaf values. Samples up to
// `max_probes` coordinates per leaf (all of them for small leaves).
inline GradCheckResult finite_difference_check(const std::function<Tensor()>& forward,
                                               std::vector<Tensor> leaves, RandomStream& rng,
                                               int64_t max_probes = 16, double step = 1e-5) {
  for (Tensor& l : leaves) l.zero_grad();
  Tensor loss = forward();
  loss.backward();

  std::vector<std::vector<double>> ad_grads;
  for (Tensor& l : leaves) {
    ad_grads.push_back(l.has_grad() ? l.grad() : std::vector<double>(l.numel(), 0.0));
  }

  GradCheckResult res;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    const int64_t n = leaf.numel();
    std::vector<int64_t> probes;
    if (n <= max_probes) {
      for (int64_t i = 0; i < n; ++i) probes.push_back(i);
    } else {
      for (int64_t i = 0; i < max_probes; ++i) {
        probes.push_back(static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(n))));
      }
    }
    for (int64_t idx : probes) {
      NoGradGuard no_grad;  // probe evaluations never need a tape
      auto& vals = leaf.mutable_values();
      const double orig = vals[static_cast<size_t>(idx)];
      auto eval_at = [&](double x) {
        vals[static_cast<size_t>(idx)] = x;
        return forward().item();
      };
      // fourth-order central stencil: kills truncation error on the long
      // compositions where plain (f(x+h)-f(x-h))/2h sits right at 1e-4
      const double d1 = eval_at(orig + step) - eval_at(orig - step);
      const double d2 = eval_at(orig + 2.0 * step) - eval_at(orig - 2.0 * step);
      vals[static_cast<size_t>(idx)] = orig;
      const double fd = (8.0 * d1 - d2) / (12.0 * step);
      const double ad = ad_grads[li][static_cast<size_t>(idx)];
      res.max_rel_err = std::max(res.max_rel_err, relative_error(ad, fd));
      ++res.checked;
    }
  }
  return res;
}

}  // namespace ean
