#pragma once

#include <functional>
#include <string>
#include <vector>

#include "prima/autograd.hpp"

namespace prima {

struct GradientComparison {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t entries = 0;
};

/// Scalar-valued function of a list of matrices, expressed as a graph.
using GraphFunction = std::function<ag::Var(const std::vector<ag::Var>&)>;

/// Compares reverse-mode gradients of `f` at `inputs` with central finite
/// differences of step `step`. The relative error of one input tensor is
/// max|analytic - numeric| / max(max|analytic|, max|numeric|, floor); the
/// report carries the worst tensor.
GradientComparison compare_gradients(const GraphFunction& f, const std::vector<Matrix>& inputs,
                                     double step = 1e-5, double floor = 1e-6);

struct GradCheckSizes {
  int n = 4;
  int l = 4;
  int k = 5;
  int d = 8;
};

struct LossGradCheck {
  std::string loss;
  double max_rel_error = 0.0;
  int instances = 0;
  bool passed = false;
};

struct GradCheckOptions {
  std::uint64_t seed = 0;
  GradCheckSizes sizes;
  int instances = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  double tau = kDefaultTau;
  /// Test hook: perturbs the analytic gradient path of the named loss so the
  /// check must fail (negative control).
  std::string corrupt_loss;
};

/// Finite-difference checks of the five alignment losses (image
/// consistency, global, local, soft, direct local) on random instances with
/// N, L, K, d drawn up to the given sizes.
std::vector<LossGradCheck> run_loss_gradcheck(const GradCheckOptions& options);

}  // namespace prima
