#pragma once

#include <functional>
#include <string>
#include <vector>

#include "chanfuse/tensor.hpp"

namespace chanfuse {

using GradFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Largest |analytic - numeric| over the checked inputs, divided by the
/// largest gradient magnitude seen (so the measure is scale free per op).
/// The scalar objective is sum(fn(inputs) * w) for a fixed random w.
/// `check[k]` selects which inputs are perturbed; empty means all.
double gradient_error(const GradFn& fn, const std::vector<Tensor>& inputs,
                      const std::vector<bool>& check, double step, std::uint64_t seed);

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  /// Registered op whose backward is deliberately scaled by 1.01 (fixture
  /// used to prove a broken gradient is caught). Empty for none.
  std::string corrupt;
};

struct GradcheckResult {
  std::string op;
  double max_rel_err = 0.0;
  Index elements = 0;  ///< perturbed input elements
  bool passed = false;
};

/// Names of every registered case, in run order.
std::vector<std::string> gradcheck_ops();

/// Runs every registered case. Throws ConfigError when `corrupt` names an
/// unknown op.
std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options = {});

}  // namespace chanfuse
