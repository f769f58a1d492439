#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "twbert/core/tensor.hpp"

namespace twbert {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double analytic = 0;
  double numeric = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0;

  bool passed() const {
    return std::all_of(entries.begin(), entries.end(),
                       [&](const GradCheckEntry& e) { return e.max_rel_error <= tolerance; });
  }
  double max_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  std::string to_string() const {
    std::ostringstream os;
    os.precision(3);
    for (const auto& e : entries) {
      os << (e.max_rel_error <= tolerance ? "ok   " : "FAIL ") << e.name << "  rel_err=" << std::scientific
         << e.max_rel_error << "  (index " << e.worst_index << ": analytic " << e.analytic << ", numeric "
         << e.numeric << ")\n";
    }
    return os.str();
  }
};

/// Compares backward() against central differences.
///
/// The relative error of one parameter tensor is
///   max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|),
/// i.e. element errors scaled by the tensor's gradient magnitude, so that
/// near-zero entries do not dominate. If both gradients vanish (below
/// 1e-12) the absolute difference is reported instead. A negated gradient
/// yields an error of 2.
///
/// `analytic_override`, when set, replaces the gradient read from backward
/// (used to test the checker itself).
template <Scalar Real>
GradCheckReport grad_check(const std::function<Tensor<Real>()>& f, const std::vector<Parameter<Real>>& params,
                           double step, double tol,
                           const std::function<void(const std::string&, std::vector<Real>&)>& analytic_override = {}) {
  if constexpr (!std::is_same_v<Real, double>) {
    throw ContractError("grad_check: requires 64-bit precision");
  } else {
    for (const auto& p : params) {
      Tensor<Real> handle = p.value;
      handle.zero_grad();
    }
    Tensor<Real> loss = f();
    if (!loss.all_finite()) throw NumericError("grad_check: non-finite loss at the base point");
    backward(loss);

    GradCheckReport report;
    report.tolerance = tol;
    for (const auto& p : params) {
      std::vector<Real> analytic(p.value.grad().begin(), p.value.grad().end());
      if (analytic_override) analytic_override(p.name, analytic);
      Tensor<Real> handle = p.value;
      auto values = handle.mutable_values();
      std::vector<Real> numeric(values.size());
      {
        NoGradGuard guard;
        for (std::size_t i = 0; i < values.size(); ++i) {
          const Real orig = values[i];
          values[i] = orig + step;
          const Real up = f().item();
          values[i] = orig - step;
          const Real down = f().item();
          values[i] = orig;
          if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("grad_check: non-finite loss while probing '" + p.name + "' index " +
                               std::to_string(i));
          }
          numeric[i] = (up - down) / (2 * step);
        }
      }
      double scale = 0;
      for (std::size_t i = 0; i < values.size(); ++i)
        scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
      GradCheckEntry e{p.name};
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double diff = std::abs(analytic[i] - numeric[i]);
        const double rel = scale < 1e-12 ? diff : diff / scale;
        if (i == 0 || rel > e.max_rel_error) {
          e.max_rel_error = rel;
          e.worst_index = i;
          e.analytic = analytic[i];
          e.numeric = numeric[i];
        }
      }
      report.entries.push_back(e);
    }
    return report;
  }
}

}  // namespace twbert
