#pragma once

#include <functional>
#include <vector>

#include "rudd/rng.hpp"
#include "rudd/tape.hpp"

namespace rudd::testutil {

using Build = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline double eval_loss(const std::vector<Tensor<double>>& leaves, const Build& build) {
  Tape<double> t;
  std::vector<Var<double>> vs;
  for (const auto& l : leaves) vs.push_back(t.leaf(l));
  return t.val(build(t, vs))[0];
}

struct GradCheck {
  double max_rel_err = 0;
  size_t checked = 0;
  size_t skipped = 0;
  bool ok = true;
};

// Central finite differences against tape gradients. rel err per element is
// |fd - an| / max(1, |fd|), reported as the max over all leaf elements.
// Coordinates where the second difference reveals a kink (relu, abs, clamp
// boundary within +-h) are skipped; the caller can bound the skipped fraction.
inline GradCheck check_gradients(std::vector<Tensor<double>> leaves, const Build& build,
                                 double tol = 1e-6, double h = 1e-5) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> t;
    std::vector<Var<double>> vs;
    for (const auto& l : leaves) vs.push_back(t.leaf(l));
    analytic = t.gradients(build(t, vs), vs);
  }
  const double base = eval_loss(leaves, build);
  GradCheck res;
  for (size_t li = 0; li < leaves.size(); ++li)
    for (size_t i = 0; i < leaves[li].numel(); ++i) {
      const double orig = leaves[li][i];
      leaves[li][i] = orig + h;
      const double up = eval_loss(leaves, build);
      leaves[li][i] = orig - h;
      const double dn = eval_loss(leaves, build);
      leaves[li][i] = orig;
      const double fd = (up - dn) / (2 * h);
      const double rel = std::abs(fd - analytic[li][i]) / std::max(1.0, std::abs(fd));
      if (rel > tol) {
        // A kink inside (x-h, x+h) corrupts the central difference by up to the
        // slope jump; the second difference measures that jump. Only discard
        // the coordinate when the jump accounts for the mismatch.
        const double jump = std::abs(up - 2 * base + dn) / h;
        if (jump >= std::abs(fd - analytic[li][i])) {
          ++res.skipped;
          continue;
        }
        res.ok = false;
      }
      ++res.checked;
      res.max_rel_err = std::max(res.max_rel_err, rel);
    }
  if (res.checked < 4 * res.skipped) res.ok = false;  // too many kinks to trust the check
  return res;
}

inline Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0, scale);
  return t;
}

}  // namespace rudd::testutil
