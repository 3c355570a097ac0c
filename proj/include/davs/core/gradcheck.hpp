// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "davs/core/autodiff.hpp"

namespace davs::core {

// Central finite-difference validation of reverse-mode gradients, always in
// double. `build` must be a pure function from input Vars to a scalar Var.
struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  long checked = 0;
};

constexpr double kGradCheckStep = 1e-5;
constexpr double kGradCheckTol = 1e-3;
// Differences below this are considered exact (covers true-zero gradients,
// where a relative measure is meaningless).
constexpr double kGradCheckAbsFloor = 1e-8;

template <typename Builder>
GradCheckReport gradcheck(Builder&& build, std::vector<Tensor<double>> inputs,
                          double step = kGradCheckStep) {
  // Analytic pass.
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (auto& t : inputs) vars.emplace_back(t, true);
  Var<double> loss = build(vars);
  DAVS_CHECK(loss.numel() == 1, "gradcheck needs a scalar loss");
  loss.backward();
  std::vector<Tensor<double>> analytic;
  analytic.reserve(vars.size());
  for (auto& v : vars) analytic.push_back(v.grad());

  auto eval = [&](const std::vector<Tensor<double>>& pts) {
    std::vector<Var<double>> vs;
    vs.reserve(pts.size());
    for (const auto& t : pts) vs.emplace_back(t, false);
    NoGradGuard ng;
    return build(vs).item();
  };

  GradCheckReport rep;
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (long i = 0; i < inputs[k].numel(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + step;
      const double fp = eval(inputs);
      inputs[k][i] = orig - step;
      const double fm = eval(inputs);
      inputs[k][i] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = analytic[k][i];
      const double abs_err = std::abs(an - fd);
      const double rel =
          abs_err <= kGradCheckAbsFloor
              ? 0.0
              : abs_err / std::max({1e-6, std::abs(an), std::abs(fd)});
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace davs::core
