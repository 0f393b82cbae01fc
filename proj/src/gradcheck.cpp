#include "cosod/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace cosod {

GradCheckReport finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                  const Tensor<double>& x, double h, double tol) {
  Tensor<double> leaf = x.detach();
  return finite_diff_check([&f, leaf]() { return f(leaf); }, {leaf}, h, tol);
}

GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> params, double h, double tol) {
  if (!(h > 0)) throw ConfigError("finite_diff_check: h must be positive");
  Tape<double>::current().clear();
  for (auto& p : params) {
    p.clear_grad();
    p.set_requires_grad(true);
  }
  backward(f());

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad())
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    else
      analytic.emplace_back(p.numel(), 0.0);
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double fp = f().item();
      values[i] = orig - h;
      const double fm = f().item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-5});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > report.max_rel_err || !std::isfinite(rel)) {
        report.max_rel_err = std::isfinite(rel) ? rel : INFINITY;
        report.worst_param = k;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace cosod
