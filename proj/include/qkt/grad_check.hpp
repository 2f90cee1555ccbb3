#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qkt/autodiff.hpp"

namespace qkt::ad {

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  // Flat index of the worst element.
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  bool passed = true;
};

// Builds a scalar loss on the given tape. It must bind the parameters with
// tape.leaf(*param.tensor) so gradients land in the tensors' own buffers.
using ScalarFunction = std::function<Var(Tape&)>;

// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
// near-zero gradients from turning rounding noise into large ratios.
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Compares reverse-mode gradients with central differences
// (f(p + h) - f(p - h)) / 2h for every element of every parameter.
GradCheckReport grad_check(const ScalarFunction& f, const std::vector<NamedParam>& params, double step = 1e-5,
                           double tolerance = 1e-4);

}  // namespace qkt::ad
