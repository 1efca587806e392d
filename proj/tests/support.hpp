// SPDX-License-Identifier: Apache-2.0
// Helpers shared by the unit tests and the acceptance runner.
#pragma once

#include "cchp/model.hpp"
#include "cchp/realtime_service.hpp"
#include "cchp/synthetic_users.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace cchp::testing {

inline const Dataset& default_dataset() {
  static const Dataset data = build_dataset(GenConfig{}).dataset;
  return data;
}

inline Clip truncate(Clip c, std::size_t n) {
  c.gesture.frames.resize(n);
  c.operation.frames.resize(n);
  return c;
}

struct GradCheck {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;
  double pass_fraction() const { return checked ? static_cast<double>(passed) / checked : 0.0; }
};

/// Central differences on a random sample of scalar parameters (without replacement).
/// An entry passes when |fd - an| <= tol * max(|fd|, |an|), or both are below abs_floor.
inline GradCheck finite_difference_check(CchpModel& model, std::span<const Episode> batch,
                                         const ForwardOptions& options, std::size_t n_sample,
                                         std::uint64_t seed, double tol = 1e-4, double step = 1e-4,
                                         double abs_floor = 1e-9) {
  ParameterStore& params = model.parameters();
  ad::Tape tape;
  params.zero_grad();
  const BatchForward f = forward_batch(model, tape, batch, options);
  tape.backward(f.loss);

  std::vector<std::pair<std::size_t, Eigen::Index>> all;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index i = 0; i < params[p].value.size(); ++i) all.emplace_back(p, i);
  }
  std::mt19937_64 g(seed);
  std::shuffle(all.begin(), all.end(), g);
  all.resize(std::min(n_sample, all.size()));

  auto loss = [&] {
    ad::Tape t(false);
    return forward_batch(model, t, batch, options).loss.scalar();
  };
  GradCheck out;
  for (const auto& [p, i] : all) {
    double& w = params[p].value.data()[i];
    const double old = w;
    w = old + step;
    const double up = loss();
    w = old - step;
    const double down = loss();
    w = old;
    const double fd = (up - down) / (2.0 * step);
    const Matrix& gm = params[p].grad;
    const double an = gm.size() ? gm.data()[i] : 0.0;
    const double scale = std::max(std::abs(fd), std::abs(an));
    const double err = scale > 0 ? std::abs(fd - an) / scale : 0.0;
    ++out.checked;
    if (scale < abs_floor || err <= tol) ++out.passed;
    if (scale >= abs_floor) out.worst = std::max(out.worst, err);
  }
  return out;
}

// Straightforward re-statement of the pipeline: mean over the trailing window,
// keep every k-th sample, clamp componentwise.
inline std::vector<std::pair<std::size_t, Twist>> post_process_oracle(const std::vector<Twist>& raw, int window,
                                                                      int every, double ct, double cr) {
  std::vector<std::pair<std::size_t, Twist>> out;
  for (std::size_t n = 1; n <= raw.size(); ++n) {
    if (n % static_cast<std::size_t>(every) != 0) continue;
    const std::size_t first = n > static_cast<std::size_t>(window) ? n - window : 0;
    Twist m{};
    for (std::size_t d = 0; d < 6; ++d) {
      double s = 0.0;
      for (std::size_t i = first; i < n; ++i) s += raw[i][d];
      const double lim = d < 3 ? ct : cr;
      m[d] = std::min(std::max(s / static_cast<double>(n - first), -lim), lim);
    }
    out.emplace_back(n - 1, m);
  }
  return out;
}

}  // namespace cchp::testing
