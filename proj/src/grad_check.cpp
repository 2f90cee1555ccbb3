#include "qkt/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "qkt/error.hpp"

namespace qkt::ad {

namespace {

double evaluate(const ScalarFunction& f, const std::string& name) {
  Tape tape;
  const Var loss = f(tape);
  const Tensor& out = loss.value();
  if (out.numel() != 1) throw DimensionError("grad_check: function must return a scalar");
  if (!std::isfinite(out[0])) throw NumericError("grad_check: non-finite loss while perturbing '" + name + "'");
  return out[0];
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

GradCheckReport grad_check(const ScalarFunction& f, const std::vector<NamedParam>& params, double step,
                           double tolerance) {
  for (const auto& p : params) {
    p.tensor->set_requires_grad(true);
    p.tensor->zero_grad();
  }
  {
    Tape tape;
    const Var loss = f(tape);
    if (!std::isfinite(loss.value()[0])) throw NumericError("grad_check: non-finite loss at the base point");
    tape.backward(loss);
  }

  GradCheckReport report;
  for (const auto& p : params) {
    ParamCheck check;
    check.name = p.name;
    std::vector<double> analytic(p.tensor->grad().begin(), p.tensor->grad().end());
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      if (!std::isfinite(analytic[i])) throw NumericError("grad_check: non-finite gradient in '" + p.name + "'");
      double& slot = p.tensor->values()[i];
      const double original = slot;
      slot = original + step;
      const double up = evaluate(f, p.name);
      slot = original - step;
      const double down = evaluate(f, p.name);
      slot = original;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[i], numeric);
      if (err > check.max_rel_error || i == 0) {
        check.max_rel_error = err;
        check.worst_index = i;
        check.analytic = analytic[i];
        check.numeric = numeric;
      }
    }
    check.passed = check.max_rel_error < tolerance;
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.passed = report.passed && check.passed;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace qkt::ad
