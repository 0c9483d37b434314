// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "moelab/rng.hpp"

namespace moelab {

namespace {

double evaluate(const LossClosure& loss, std::span<Tensor<double>* const> params) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(params.size());
  for (Tensor<double>* p : params) vars.push_back(tape.param(*p, false));
  return loss(tape, vars).value().item();
}

}  // namespace

GradCheckReport grad_check(const LossClosure& loss, std::span<Tensor<double>* const> params,
                           const GradCheckOptions& opt) {
  GradCheckReport report;
  if (params.empty()) return report;

  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (Tensor<double>* p : params) vars.push_back(tape.param(*p, true));
    Var<double> l = loss(tape, vars);
    tape.backward(l);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  if (opt.corrupt) opt.corrupt(analytic);

  RngStream rng(opt.seed, "gradcheck");
  // Spread the coordinate budget evenly, smallest tensors first, so tensors
  // with fewer entries than their share pass the remainder on.
  std::vector<std::size_t> order(params.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return params[a]->size() < params[b]->size(); });
  std::vector<std::int64_t> quota(params.size(), 0);
  std::int64_t remaining = opt.min_coordinates;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::int64_t left = static_cast<std::int64_t>(order.size() - k);
    const std::int64_t share = std::max<std::int64_t>(1, (remaining + left - 1) / left);
    quota[order[k]] = std::min<std::int64_t>(params[order[k]]->size(), share);
    remaining = std::max<std::int64_t>(0, remaining - quota[order[k]]);
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor<double>& p = *params[t];
    const std::int64_t per_tensor = quota[t];
    std::vector<int> coords;
    if (p.size() <= per_tensor) {
      for (int i = 0; i < p.size(); ++i) coords.push_back(i);
    } else {
      auto perm = rng.permutation(static_cast<int>(p.size()));
      coords.assign(perm.begin(), perm.begin() + per_tensor);
    }
    for (int i : coords) {
      const double saved = p[i];
      p[i] = saved + opt.step;
      const double up = evaluate(loss, params);
      p[i] = saved - opt.step;
      const double down = evaluate(loss, params);
      p[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.denominator_floor});
      const double err = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (err > report.max_rel_error || report.worst.empty()) {
        if (err >= report.max_rel_error) {
          report.max_rel_error = err;
          report.worst = "param" + std::to_string(t) + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  report.pass = report.max_rel_error < opt.tolerance;
  return report;
}

}  // namespace moelab
