#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "chunkssl/array.hpp"
#include "chunkssl/tape.hpp"

namespace chunkssl {

struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> estimate;
  double max_relative_error = 0.0;
  bool passed = false;
};

/// Builds a scalar on the given tape from leaf variables bound to `point`.
using ScalarFunction = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences (f(x + h) - f(x - h)) / 2h, coordinate by coordinate.
///
/// Relative error per coordinate is |a - e| / max(|a|, |e|, floor); the floor
/// keeps coordinates whose true gradient is zero from dividing noise by noise.
inline GradCheckReport finite_difference_check(const ScalarFunction& f, std::vector<Array<double>> point,
                                               double step, double tolerance, double floor = 1e-6) {
  GradCheckReport report;

  auto evaluate = [&](const std::vector<Array<double>>& at) {
    Tape<double> tape(false);
    std::vector<Var<double>> leaves;
    for (const auto& a : at) leaves.push_back(tape.leaf(a));
    return f(tape, leaves).value().item();
  };

  {
    Tape<double> tape(true);
    std::vector<Var<double>> leaves;
    for (const auto& a : point) leaves.push_back(tape.leaf(a, true));
    Var<double> out = f(tape, leaves);
    tape.backward(out);
    for (const auto& leaf : leaves) {
      const Array<double> g = tape.grad(leaf);
      report.analytic.insert(report.analytic.end(), g.data().begin(), g.data().end());
    }
  }

  for (auto& arr : point) {
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const double saved = arr[i];
      arr[i] = saved + step;
      const double up = evaluate(point);
      arr[i] = saved - step;
      const double down = evaluate(point);
      arr[i] = saved;
      report.estimate.push_back((up - down) / (2.0 * step));
    }
  }

  for (std::size_t i = 0; i < report.analytic.size(); ++i) {
    const double a = report.analytic[i], e = report.estimate[i];
    const double denom = std::max({std::abs(a), std::abs(e), floor});
    report.max_relative_error = std::max(report.max_relative_error, std::abs(a - e) / denom);
  }
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

}  // namespace chunkssl
