#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gbert/param_store.hpp"
#include "gbert/tape.hpp"

namespace gbert {

/// Per-parameter result of a finite-difference comparison.
template <typename Scalar>
struct GradCheckEntry {
  std::string name;
  Scalar max_rel_err = Scalar(0);  // worst element, scale-normalized
  Scalar max_abs_err = Scalar(0);
  std::size_t worst_index = 0;
  Scalar analytic_at_worst = Scalar(0);
  Scalar numeric_at_worst = Scalar(0);
};

template <typename Scalar>
struct GradCheckReport {
  std::vector<GradCheckEntry<Scalar>> entries;
  Scalar max_rel_err = Scalar(0);
  std::string worst_param;

  bool passes(Scalar tol) const { return max_rel_err < tol; }
};

namespace detail {

template <typename Scalar>
struct FaultSpec {
  Op op;
  Scalar scale;
};

template <typename Scalar>
GradCheckReport<Scalar> fd_compare(
    ParamStore<Scalar>& params,
    const std::function<typename Tape<Scalar>::VarId(Tape<Scalar>&)>& build, Scalar h,
    Scalar floor_scale, std::optional<FaultSpec<Scalar>> fault) {
  params.zero_grads();
  {
    Tape<Scalar> tape(&params);
    if (fault) {
      tape.inject_backward_fault(fault->op, fault->scale);
    }
    const auto loss = build(tape);
    tape.backward(loss);
  }
  GradCheckReport<Scalar> report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& e = params.entry(p);
    GradCheckEntry<Scalar> row;
    row.name = e.name;
    std::vector<Scalar> numeric(e.value.numel());
    for (std::size_t i = 0; i < e.value.numel(); ++i) {
      const Scalar saved = e.value.values[i];
      e.value.values[i] = saved + h;
      const Scalar f_plus = forward_value<Scalar>(params, build);
      e.value.values[i] = saved - h;
      const Scalar f_minus = forward_value<Scalar>(params, build);
      e.value.values[i] = saved;
      numeric[i] = (f_plus - f_minus) / (Scalar(2) * h);
    }
    // Normalize by the largest gradient magnitude within the parameter so
    // genuinely-zero elements do not produce spurious failures.
    Scalar scale = floor_scale;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      scale = std::max(scale, std::max(std::abs(numeric[i]), std::abs(e.grad.values[i])));
    }
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const Scalar abs_err = std::abs(numeric[i] - e.grad.values[i]);
      const Scalar rel = abs_err / scale;
      if (rel > row.max_rel_err) {
        row.max_rel_err = rel;
        row.max_abs_err = abs_err;
        row.worst_index = i;
        row.analytic_at_worst = e.grad.values[i];
        row.numeric_at_worst = numeric[i];
      }
    }
    if (row.max_rel_err > report.max_rel_err) {
      report.max_rel_err = row.max_rel_err;
      report.worst_param = row.name;
    }
    report.entries.push_back(std::move(row));
  }
  return report;
}

}  // namespace detail

/// Compares reverse-mode gradients against central finite differences
/// (f(θ+h)−f(θ−h)) / 2h for every element of every parameter.
template <typename Scalar>
GradCheckReport<Scalar> finite_difference_check(
    ParamStore<Scalar>& params,
    const std::function<typename Tape<Scalar>::VarId(Tape<Scalar>&)>& build,
    Scalar h = Scalar(1e-5), Scalar floor_scale = Scalar(1e-8)) {
  return detail::fd_compare<Scalar>(params, build, h, floor_scale, std::nullopt);
}

/// Variant that corrupts the backward rule of `fault_op` before comparing;
/// used to prove the harness actually detects wrong gradients.
template <typename Scalar>
GradCheckReport<Scalar> finite_difference_check_with_fault(
    ParamStore<Scalar>& params,
    const std::function<typename Tape<Scalar>::VarId(Tape<Scalar>&)>& build, Op fault_op,
    Scalar fault_scale, Scalar h = Scalar(1e-5), Scalar floor_scale = Scalar(1e-8)) {
  return detail::fd_compare<Scalar>(params, build, h, floor_scale,
                                    detail::FaultSpec<Scalar>{fault_op, fault_scale});
}

}  // namespace gbert
