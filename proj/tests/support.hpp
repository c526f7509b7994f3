#pragma once

// Shared fixtures for the unit and acceptance tests: random fields and a
// central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "calmargin/losses.hpp"
#include "calmargin/random.hpp"
#include "calmargin/tensor.hpp"

namespace calmargin::testing {

inline std::vector<double> normal_vector(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

inline LogitField random_logits(Rng& rng, std::size_t h, std::size_t w, std::size_t k,
                                double scale) {
  return LogitField(h, w, k, normal_vector(rng, h * w * k, scale));
}

inline LabelField random_labels(Rng& rng, std::size_t h, std::size_t w, std::size_t k,
                                std::size_t background = 0) {
  std::vector<std::int32_t> v(h * w);
  for (auto& x : v) x = static_cast<std::int32_t>(rng.below(k));
  return LabelField(h, w, k, std::move(v), background);
}

inline LogitField with_values(const LogitField& like, std::vector<double> values) {
  return LogitField(like.height(), like.width(), like.num_classes(), std::move(values));
}

// Relative error used by every gradient check. `floor` keeps near-zero derivatives from
// being divided by rounding noise; a central difference of f resolves about
// eps * |f| / step, so callers scale it with |f|.
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

struct GradCheck {
  double worst = 0.0;
  std::size_t worst_index = 0;
};

// Central differences of f around x, compared against `analytic`. With step 1e-5 the
// difference quotient carries ~2e-11 * |f| of rounding, so derivatives are compared
// relative to at least 1e-5 * max(1, |f|).
inline GradCheck check_gradient(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> x, const std::vector<double>& analytic,
                                double step) {
  GradCheck out;
  const double floor = 1e-5 * std::max(1.0, std::abs(f(x)));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double up = f(x);
    x[i] = keep - step;
    const double down = f(x);
    x[i] = keep;
    const double err = relative_error(analytic[i], (up - down) / (2.0 * step), floor);
    if (err > out.worst) {
      out.worst = err;
      out.worst_index = i;
    }
  }
  return out;
}

// True when some pixel sits within `tol` of an argmax tie or of an MbLS hinge at `margin`;
// finite differences are meaningless there.
inline bool near_kink(const LogitField& logits, double margin, double tol) {
  for (std::size_t p = 0; p < logits.num_pixels(); ++p) {
    const auto l = logits.pixel(p);
    std::vector<double> sorted(l.begin(), l.end());
    std::sort(sorted.rbegin(), sorted.rend());
    if (sorted[0] - sorted[1] < tol) return true;
    for (double v : l) {
      if (std::abs(sorted[0] - v - margin) < tol) return true;
    }
  }
  return false;
}

inline const std::vector<LossKind>& all_loss_kinds() {
  static const std::vector<LossKind> kinds{LossKind::kCE,   LossKind::kCEDice, LossKind::kLS,
                                           LossKind::kFL,   LossKind::kECP,    LossKind::kSVLS,
                                           LossKind::kMbLSL1, LossKind::kMbLSL2};
  return kinds;
}

// A config for `kind` with parameters drawn from the ranges the paper explores.
inline LossConfig random_config(Rng& rng, LossKind kind) {
  LossConfig c;
  c.kind = kind;
  c.alpha = rng.uniform(0.0, 0.3);
  c.gamma = rng.uniform(0.0, 3.0);
  c.lambda = rng.uniform(0.0, 0.5);
  c.margin = rng.uniform(0.0, 4.0);
  c.svls_kernel_size = rng.below(2) == 0 ? 3 : 5;
  c.svls_sigma = rng.uniform(0.5, 2.0);
  c.dice_weight = rng.uniform(0.2, 2.0);
  return c;
}

}  // namespace calmargin::testing
