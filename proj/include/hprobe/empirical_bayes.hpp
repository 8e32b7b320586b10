#pragma once

// Plug-in empirical Bayes estimate of the inclusion probabilities.
//
// Test statistics T_k = beta_k / S_k are treated as draws from a two-group
// mixture with a standard normal null. The null proportion comes from Storey's
// tail-counting estimator and the marginal density from a Gaussian KDE, giving
// p_k = 1 - pi0 * phi(T_k) / f(T_k).

#include "hprobe/model_core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

namespace hprobe {

inline double standard_normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

inline Vector test_statistics(const Vector& beta, const Vector& s2) {
  if (beta.size() != s2.size()) throw DataError("beta and s2 lengths differ");
  Vector t(beta.size());
  for (Index k = 0; k < beta.size(); ++k) {
    if (!(s2(k) > 0.0))
      throw NumericalError("non-positive posterior variance at k = " + std::to_string(k));
    t(k) = beta(k) / std::sqrt(s2(k));
  }
  return t;
}

/// P_k = 2 (1 - Phi(|T_k|)), computed through erfc to keep the tail accurate.
inline Vector two_sided_pvalues(const Vector& t_stats) {
  return t_stats.unaryExpr([](double t) {
    return std::clamp(std::erfc(std::abs(t) / std::numbers::sqrt2), 0.0, 1.0);
  });
}

/// Storey's estimate #{P_k >= lambda} / (p (1 - lambda)), clamped to [floor, 1].
inline double storey_pi0(const Vector& pvalues, double lambda, double pi0_floor) {
  if (pvalues.size() == 0) throw DataError("storey_pi0 needs at least one p-value");
  if (!(lambda > 0.0 && lambda < 1.0)) throw DataError("lambda must lie in (0,1)");
  const auto tail = (pvalues.array() >= lambda).count();
  const double raw =
      static_cast<double>(tail) / (static_cast<double>(pvalues.size()) * (1.0 - lambda));
  return std::clamp(raw, pi0_floor, 1.0);
}

/// Sample quantile with linear interpolation between order statistics.
inline double sample_quantile(std::vector<double> sorted, double prob) {
  std::sort(sorted.begin(), sorted.end());
  const double pos = prob * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

/// Gaussian kernel density estimate with a rule-of-thumb bandwidth.
class GaussianKde {
 public:
  GaussianKde(Vector sample, double bandwidth, bool fallback)
      : sample_(std::move(sample)), h_(bandwidth), fallback_(fallback) {}

  double bandwidth() const { return h_; }
  bool used_fallback() const { return fallback_; }
  const Vector& sample() const { return sample_; }

  double operator()(double x) const {
    double sum = 0.0;
    for (Index k = 0; k < sample_.size(); ++k) sum += standard_normal_pdf((x - sample_(k)) / h_);
    return sum / (static_cast<double>(sample_.size()) * h_);
  }

  /// Density at every sample point; uses the symmetry of the kernel matrix.
  Vector at_sample() const {
    const Index p = sample_.size();
    Vector acc = Vector::Constant(p, standard_normal_pdf(0.0));
    for (Index i = 0; i < p; ++i) {
      for (Index j = i + 1; j < p; ++j) {
        const double z = (sample_(i) - sample_(j)) / h_;
        if (std::abs(z) > 40.0) continue;
        const double k = standard_normal_pdf(z);
        acc(i) += k;
        acc(j) += k;
      }
    }
    return acc / (static_cast<double>(p) * h_);
  }

 private:
  Vector sample_;
  double h_;
  bool fallback_;
};

/// h = 0.9 min(sd, IQR / 1.34) p^(-1/5). When the IQR is zero the standard
/// deviation alone is used; with no spread at all h = 1 and the fallback
/// flag is set.
inline GaussianKde gaussian_kde_fit(const Vector& t_stats) {
  const Index p = t_stats.size();
  if (p < 2) throw DataError("kernel density estimate needs at least two statistics");
  const double mean = t_stats.mean();
  const double sd =
      std::sqrt((t_stats.array() - mean).square().sum() / static_cast<double>(p - 1));
  std::vector<double> values(t_stats.data(), t_stats.data() + p);
  const double iqr = sample_quantile(values, 0.75) - sample_quantile(values, 0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) spread = sd;
  if (!(spread > 0.0) || !std::isfinite(spread)) return GaussianKde(t_stats, 1.0, true);
  return GaussianKde(t_stats, 0.9 * spread * std::pow(static_cast<double>(p), -0.2), false);
}

struct InclusionProbs {
  Vector p;
  int clamped = 0;  // raw values that fell outside [0,1]
};

/// p_k = 1 - pi0 phi(T_k) / f(T_k), clamped to [0,1]. `density_at_stats`
/// holds f evaluated at each T_k.
inline InclusionProbs inclusion_probs(const Vector& t_stats, double pi0_hat,
                                      const Vector& density_at_stats) {
  if (density_at_stats.size() != t_stats.size())
    throw DataError("density values do not match statistics");
  InclusionProbs out{Vector(t_stats.size()), 0};
  for (Index k = 0; k < t_stats.size(); ++k) {
    const double f = density_at_stats(k);
    double raw = 1.0;
    if (pi0_hat > 0.0) {
      raw = f > 0.0 ? 1.0 - pi0_hat * standard_normal_pdf(t_stats(k)) / f : 0.0;
    }
    if (!(raw >= 0.0 && raw <= 1.0)) ++out.clamped;
    out.p(k) = std::isnan(raw) ? 0.0 : std::clamp(raw, 0.0, 1.0);
  }
  return out;
}

inline InclusionProbs inclusion_probs(const Vector& t_stats, double pi0_hat,
                                      const GaussianKde& kde) {
  if (t_stats.size() == kde.sample().size() && t_stats == kde.sample())
    return inclusion_probs(t_stats, pi0_hat, kde.at_sample());
  return inclusion_probs(t_stats, pi0_hat, t_stats.unaryExpr(std::cref(kde)).eval());
}

/// Smallest envelope that is non-decreasing in |T|: each p_k is lowered to
/// the minimum over statistics at least as extreme. Ties in |T| share a value.
inline Vector monotone_in_abs_stat(const Vector& t_stats, const Vector& p_incl) {
  if (t_stats.size() != p_incl.size()) throw DataError("statistics and probabilities differ");
  std::vector<Index> order(static_cast<std::size_t>(t_stats.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return std::abs(t_stats(a)) > std::abs(t_stats(b));
  });
  Vector out = p_incl;
  double running = 1.0;
  std::size_t i = 0;
  while (i < order.size()) {
    // Group equal |T| so the result does not depend on index order.
    std::size_t j = i;
    double group_min = running;
    while (j < order.size() &&
           std::abs(t_stats(order[j])) == std::abs(t_stats(order[i]))) {
      group_min = std::min(group_min, p_incl(order[j]));
      ++j;
    }
    running = group_min;
    for (std::size_t m = i; m < j; ++m) out(order[m]) = running;
    i = j;
  }
  return out;
}

}  // namespace hprobe
