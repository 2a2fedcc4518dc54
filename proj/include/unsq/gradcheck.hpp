#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "unsq/ops.hpp"
#include "unsq/tape.hpp"
#include "unsq/tensor.hpp"

namespace unsq {

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  Eigen::Index checked = 0;
  Eigen::Index skipped = 0;
  Eigen::Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckOptions {
  // 0 checks every element; otherwise a deterministic random subset.
  Eigen::Index max_checks = 0;
  std::uint64_t subset_seed = 0;
  // When > 0, probes whose second difference |f(x+e) - 2 f(x) + f(x-e)| / e^2
  // exceeds the bound are skipped: the probe straddles a kink (relu, pooling
  // argmax switch) where the central difference says nothing about the
  // one-sided derivative the tape reports. 0 disables the filter.
  double curvature_skip = 0.0;
};

// Central-difference check of tape gradients for a scalar-valued function of
// one tensor: (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps) against d f / d x_i.
// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
// Gradient checks are only meaningful in double precision.
template <typename F>
GradCheckReport grad_check(F&& f, const Tensor<double>& x, double epsilon, double tolerance,
                           GradCheckOptions opt = {}) {
  if (!(epsilon > 0)) throw Error("grad_check: epsilon must be positive");

  auto eval = [&](const Tensor<double>& probe) -> double {
    Tape<double> dead(false);
    Tensor<double> y = f(dead, probe);
    if (y.size() != 1) throw ShapeError("grad_check: f must produce a scalar, got " + y.shape().str());
    double v = y.item();
    if (!std::isfinite(v)) throw Error("grad_check: f produced a non-finite value");
    return v;
  };

  // Analytic pass.
  Tensor<double> xx = x.clone(true);
  Tape<double> tape(true);
  tape.register_leaf(xx);
  Tensor<double> y = f(tape, xx);
  if (y.size() != 1) throw ShapeError("grad_check: f must produce a scalar, got " + y.shape().str());
  if (!std::isfinite(y.item())) throw Error("grad_check: f produced a non-finite value");
  tape.backward(y);
  Eigen::ArrayXd analytic = xx.grad();

  std::vector<Eigen::Index> indices(static_cast<std::size_t>(x.size()));
  std::iota(indices.begin(), indices.end(), Eigen::Index(0));
  if (opt.max_checks > 0 && opt.max_checks < x.size()) {
    std::mt19937_64 rng(opt.subset_seed);
    std::shuffle(indices.begin(), indices.end(), rng);
    indices.resize(static_cast<std::size_t>(opt.max_checks));
    std::sort(indices.begin(), indices.end());
  }

  const double y0 = opt.curvature_skip > 0 ? eval(x) : 0.0;

  GradCheckReport report;
  for (Eigen::Index i : indices) {
    Tensor<double> xp = x.clone(false);
    Tensor<double> xm = x.clone(false);
    xp.values()[i] += epsilon;
    xm.values()[i] -= epsilon;
    const double yp = eval(xp);
    const double ym = eval(xm);
    if (opt.curvature_skip > 0 &&
        std::abs(yp - 2.0 * y0 + ym) / (epsilon * epsilon) > opt.curvature_skip) {
      ++report.skipped;
      continue;
    }
    const double numeric = (yp - ym) / (2.0 * epsilon);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
    ++report.checked;
  }
  report.pass = report.max_rel_error < tolerance;
  return report;
}

}  // namespace unsq
