#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "mdist/common.hpp"

namespace mdist::testing {

// Central finite differences of f at x, one coordinate at a time.
inline Vec numeric_grad(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-6) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double old = x[i];
    x[i] = old + h;
    const double up = f(x);
    x[i] = old - h;
    const double down = f(x);
    x[i] = old;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Largest relative error, with an absolute floor for entries that are
// numerically zero on both sides.
inline double max_rel_error(const Vec& analytic, const Vec& numeric, double abs_floor = 1e-8) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double diff = std::abs(a - n);
    if (diff < abs_floor) continue;
    worst = std::max(worst, diff / std::max(std::abs(a), std::abs(n)));
  }
  return worst;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -scale, scale);
  return m;
}

inline Vec random_vec(Eigen::Index n, Rng& rng, double scale = 1.0) { return random_mat(n, 1, rng, scale); }

}  // namespace mdist::testing
