#pragma once

#include <functional>

#include "tsg/common.hpp"

namespace tsgtest {

using tsg::Mat;

inline Mat random_mat(tsg::Rng& rng, int rows, int cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal() * scale;
  return m;
}

/// Central finite-difference check of an analytic gradient. `rebuild` must
/// recompute the scalar output from a fresh graph given the perturbed input.
/// Returns the worst relative error over all entries.
inline double fd_worst_rel_error(const Mat& x0, const Mat& analytic,
                                 const std::function<double(const Mat&)>& rebuild,
                                 double h = 1e-5) {
  Mat x = x0;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      double keep = x(i, j);
      double step = h * std::max(1.0, std::abs(keep));
      x(i, j) = keep + step;
      double up = rebuild(x);
      x(i, j) = keep - step;
      double dn = rebuild(x);
      x(i, j) = keep;
      double fd = (up - dn) / (2.0 * step);
      double a = analytic.size() ? analytic(i, j) : 0.0;
      double denom = std::max({1e-8, std::abs(fd), std::abs(a)});
      worst = std::max(worst, std::abs(fd - a) / denom);
    }
  }
  return worst;
}

}  // namespace tsgtest
