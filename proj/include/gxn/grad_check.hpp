#pragma once

#include "gxn/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace gxn {

struct GradCheckOptions {
  double h = 1e-5;
  // Coordinates that move a kinked op input lying within kink_band * h of its
  // kink (or push it across) are skipped: subgradients disagree there.
  double kink_band = 10.0;
  // 0 checks every coordinate; otherwise an evenly strided subset per tensor.
  std::size_t max_coords_per_tensor = 0;
  // Smallest denominator of the relative error.
  double denominator_floor = 1e-8;
};

/// Denominator floor below which central differences cannot resolve a
/// gradient to `tolerance`: a loss summed from many terms carries about ten
/// ulps of rounding, so the difference quotient has noise near 10 eps |f| / h.
inline double roundoff_floor(double loss, double h, double tolerance) {
  return 10.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(loss)) / (h * tolerance);
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::vector<std::string> nonfinite;  // "tensor#index" of coordinates where f was not finite
  std::string worst;                   // "tensor#index" of the largest error
  bool ok(double tolerance) const { return nonfinite.empty() && max_rel_error <= tolerance; }
};

namespace detail {

inline bool crosses_kink(const std::vector<double>& base, const std::vector<double>& moved, double band) {
  if (base.size() != moved.size()) return true;
  for (std::size_t j = 0; j < base.size(); ++j) {
    if ((base[j] > 0.0) != (moved[j] > 0.0)) return true;
    if (std::abs(base[j]) < band && moved[j] != base[j]) return true;
  }
  return false;
}

}  // namespace detail

/// Compares central differences (f(x+h) - f(x-h)) / 2h against backward()
/// for every coordinate of every tensor in `leaves`. `loss_fn` must rebuild the
/// scalar loss from the current leaf values on each call.
template <typename S, typename F>
GradCheckReport grad_check(F&& loss_fn, std::vector<BasicTensor<S>> leaves, const GradCheckOptions& options = {}) {
  GradCheckReport report;
  const double h = options.h;
  const double band = options.kink_band * h;
  for (auto& leaf : leaves) leaf.zero_grad();

  std::vector<double> base_kinks;
  {
    KinkMonitor monitor;
    BasicTensor<S> loss = loss_fn();
    backward(loss);
    base_kinks = monitor.values();
  }
  auto eval = [&](std::vector<double>& kinks) {
    KinkMonitor monitor;
    NoGradGuard no_grad;
    const double value = static_cast<double>(loss_fn().item());
    kinks = monitor.values();
    return value;
  };

  std::vector<double> plus_kinks, minus_kinks;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    auto& leaf = leaves[t];
    const detail::Vec<S> analytic = leaf.grad();
    auto& values = leaf.mutable_values();
    const std::size_t n = leaf.size();
    const std::size_t stride = options.max_coords_per_tensor && n > options.max_coords_per_tensor
                                   ? (n + options.max_coords_per_tensor - 1) / options.max_coords_per_tensor
                                   : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const auto idx = static_cast<Eigen::Index>(i);
      const S original = values[idx];
      values[idx] = original + static_cast<S>(h);
      const double fp = eval(plus_kinks);
      values[idx] = original - static_cast<S>(h);
      const double fm = eval(minus_kinks);
      values[idx] = original;
      const std::string where = std::to_string(t) + "#" + std::to_string(i);
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.nonfinite.push_back(where);
        continue;
      }
      if (detail::crosses_kink(base_kinks, plus_kinks, band) || detail::crosses_kink(base_kinks, minus_kinks, band)) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double exact = static_cast<double>(analytic[idx]);
      const double denom = std::max({std::abs(numeric), std::abs(exact), options.denominator_floor});
      const double rel = std::abs(numeric - exact) / denom;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = where;
      }
    }
  }
  return report;
}

/// Single-input form: checks d f(x) / dx at the values of `x`.
template <typename S, typename F>
GradCheckReport grad_check(F&& f, const BasicTensor<S>& x, double h) {
  auto leaf = BasicTensor<S>::parameter(x.shape(), x.values());
  GradCheckOptions options;
  options.h = h;
  return grad_check<S>([&] { return f(leaf); }, std::vector<BasicTensor<S>>{leaf}, options);
}

}  // namespace gxn
