#pragma once

// Residual checks for the variance model: log-squared residuals and the
// Brown-Forsythe test for spread differences between groups.

#include "hprobe/model_core.hpp"

#include <boost/math/distributions/fisher_f.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace hprobe {

inline constexpr double kLogResidualFloor = 1e-12;

/// log(r_i^2 + 1e-12) with r = y - V phi - alpha0 W0.
inline Vector log_squared_residuals(const FitResult& fit, const DataSet& data) {
  const FitState& st = fit.state;
  if (data.v_mean.cols() != st.phi.size() || data.n() != st.w0.size())
    throw DataError("fit does not match data dimensions");
  const Vector r = data.y - data.v_mean * st.phi - st.alpha0 * st.w0;
  return (r.array().square() + kLogResidualFloor).log();
}

struct BrownForsytheResult {
  double statistic = 0.0;
  double p_value = 1.0;
  int groups = 0;
  int df_between = 0;
  int df_within = 0;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace detail

/// One-way ANOVA F on |x - group median|, p-value from F(g-1, N-g).
/// Needs at least two groups with at least two members each.
inline BrownForsytheResult brown_forsythe(const Vector& values, const std::vector<int>& groups) {
  if (static_cast<std::size_t>(values.size()) != groups.size())
    throw DataError("values and group labels differ in length");
  std::map<int, std::vector<double>> by_group;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const double x = values(static_cast<Index>(i));
    if (!std::isfinite(x)) throw DataError("non-finite value at " + std::to_string(i));
    by_group[groups[i]].push_back(x);
  }
  if (by_group.size() < 2) throw DataError("brown_forsythe needs at least two groups");
  for (const auto& [label, members] : by_group)
    if (members.size() < 2)
      throw DataError("group " + std::to_string(label) + " has fewer than two members");

  std::vector<std::vector<double>> dev;
  dev.reserve(by_group.size());
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& [label, members] : by_group) {
    const double med = detail::median_of(members);
    std::vector<double> d;
    d.reserve(members.size());
    for (double x : members) d.push_back(std::abs(x - med));
    for (double z : d) total += z;
    count += d.size();
    dev.push_back(std::move(d));
  }
  const double grand = total / static_cast<double>(count);
  double between = 0.0, within = 0.0;
  for (const auto& d : dev) {
    double mean = 0.0;
    for (double z : d) mean += z;
    mean /= static_cast<double>(d.size());
    between += static_cast<double>(d.size()) * (mean - grand) * (mean - grand);
    for (double z : d) within += (z - mean) * (z - mean);
  }

  BrownForsytheResult out;
  out.groups = static_cast<int>(dev.size());
  out.df_between = out.groups - 1;
  out.df_within = static_cast<int>(count) - out.groups;
  // Relative tolerance keeps rounding noise from producing spurious F values.
  const double scale = std::max(1.0, grand * grand * static_cast<double>(count));
  const bool no_between = between <= 1e-14 * scale;
  const bool no_within = within <= 1e-14 * scale;
  if (no_between) {
    out.statistic = 0.0;
    out.p_value = 1.0;
  } else if (no_within) {
    out.statistic = std::numeric_limits<double>::infinity();
    out.p_value = 0.0;
  } else {
    out.statistic = (between / out.df_between) / (within / out.df_within);
    const boost::math::fisher_f_distribution<double> f(out.df_between, out.df_within);
    out.p_value = boost::math::cdf(boost::math::complement(f, out.statistic));
  }
  return out;
}

/// Quartile bin (0..3) of each value, cut at the sample quartiles. Values on
/// a cut go to the lower bin.
inline std::vector<int> quartile_groups(const Vector& values) {
  if (values.size() < 4) throw DataError("quartile grouping needs at least four values");
  std::vector<double> sorted(values.data(), values.data() + values.size());
  std::sort(sorted.begin(), sorted.end());
  auto q = [&](double prob) {
    const double pos = prob * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  };
  const double cuts[3] = {q(0.25), q(0.5), q(0.75)};
  std::vector<int> out(static_cast<std::size_t>(values.size()));
  for (Index i = 0; i < values.size(); ++i) {
    int g = 0;
    while (g < 3 && values(i) > cuts[g]) ++g;
    out[static_cast<std::size_t>(i)] = g;
  }
  return out;
}

/// Groups for a heterogeneity candidate: distinct values when there are at
/// most four of them (binary or categorical), quartile bins otherwise.
inline std::vector<int> candidate_groups(const Vector& values) {
  std::vector<double> distinct(values.data(), values.data() + values.size());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() > 4) return quartile_groups(values);
  std::vector<int> out(static_cast<std::size_t>(values.size()));
  for (Index i = 0; i < values.size(); ++i)
    out[static_cast<std::size_t>(i)] = static_cast<int>(
        std::lower_bound(distinct.begin(), distinct.end(), values(i)) - distinct.begin());
  return out;
}

}  // namespace hprobe
