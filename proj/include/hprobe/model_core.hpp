#pragma once

// Domain types shared by every part of the estimator, plus input validation
// and marginal screening of the sparse design.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hprobe {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Malformed or inconsistent input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical procedure failed (singular system, overflow, iteration cap).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Outcome plus the three designs used by the model.
///
/// `x` holds the sparse-candidate predictors, `v_mean` the non-sparse mean
/// predictors and `v_var` the log-variance design. Both `v_mean` and `v_var`
/// carry an explicit all-ones first column.
struct DataSet {
  Vector y;
  Matrix x;
  Matrix v_mean;
  Matrix v_var;

  Index n() const { return y.size(); }
  Index p() const { return x.cols(); }
  Index v() const { return v_mean.cols(); }
  Index v_sigma() const { return v_var.cols(); }

  bool operator==(const DataSet& other) const {
    auto same = [](const auto& a, const auto& b) {
      return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
    };
    return same(y, other.y) && same(x, other.x) && same(v_mean, other.v_mean) &&
           same(v_var, other.v_var);
  }
};

struct PriorConfig {
  double c = 1000.0;             // MLG shape/rate constant
  double sigma_omega_inv = 0.0;  // 0 gives a flat prior on omega
};

struct FitConfig {
  int max_iterations = 1000;
  double convergence_alpha = 0.1;
  double eb_lambda = 0.1;
  // Lower clamp on the null proportion; unset means 1/p.
  std::optional<double> pi0_floor;
  bool homoscedastic = false;
  // Lower each inclusion probability to the smallest one among statistics
  // with larger |T|, so p is non-decreasing in |T|.
  bool monotone_inclusion = true;
  std::uint64_t seed = 0;
  // Worker threads for the per-coordinate CM-step. Results do not depend on it.
  int threads = 1;
};

/// Everything the ECM loop carries from one iteration to the next.
struct FitState {
  Vector beta;    // slab coefficients given inclusion
  Vector s2;      // posterior variance of beta_k given inclusion
  Vector p_incl;  // posterior inclusion probabilities
  Vector phi;     // non-sparse mean coefficients
  double alpha0 = 1.0;
  Vector omega;   // log-precision coefficients
  Vector w0;      // E[X (gamma o beta)]
  Vector w0_var;  // Var[X (gamma o beta)]
  int t = 0;
};

struct TraceEntry {
  int t = 0;
  double cc = 0.0;
};

struct FitResult {
  FitState state;
  Matrix psi;     // posterior covariance of (phi, alpha0)
  Vector sigma2;  // exp(-v_var * omega)
  bool converged = false;
  bool null_model = false;
  // Variance design was intercept-only regardless of the data's v_var.
  bool homoscedastic = false;
  std::vector<TraceEntry> trace;
  // Raw inclusion probabilities clipped into [0,1] during the last E-step.
  int clamped_probabilities = 0;
};

inline void check_prior(const PriorConfig& prior) {
  if (!(prior.c > 0.0) || !std::isfinite(prior.c))
    throw DataError("prior constant c must be positive");
  if (!(prior.sigma_omega_inv >= 0.0) || !std::isfinite(prior.sigma_omega_inv))
    throw DataError("sigma_omega_inv must be non-negative");
}

inline void check_fit_config(const FitConfig& cfg) {
  if (cfg.max_iterations < 1) throw DataError("max_iterations must be positive");
  if (!(cfg.convergence_alpha > 0.0 && cfg.convergence_alpha < 1.0))
    throw DataError("convergence_alpha must lie in (0,1)");
  if (!(cfg.eb_lambda > 0.0 && cfg.eb_lambda < 1.0))
    throw DataError("eb_lambda must lie in (0,1)");
  if (cfg.pi0_floor && !(*cfg.pi0_floor > 0.0 && *cfg.pi0_floor <= 1.0))
    throw DataError("pi0_floor must lie in (0,1]");
  if (cfg.threads < 1) throw DataError("threads must be positive");
}

/// Result of validate_dataset: the data plus which intercepts were injected.
struct ValidatedData {
  DataSet data;
  bool mean_intercept_added = false;
  bool var_intercept_added = false;
};

namespace detail {

inline bool first_column_is_ones(const Matrix& m) {
  return m.cols() > 0 && (m.col(0).array() == 1.0).all();
}

inline Matrix prepend_ones(const Matrix& m) {
  Matrix out(m.rows(), m.cols() + 1);
  out.col(0).setOnes();
  out.rightCols(m.cols()) = m;
  return out;
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const char* name) {
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i)
      if (!std::isfinite(m(i, j)))
        throw DataError(std::string("non-finite value in ") + name + " at (" +
                        std::to_string(i) + "," + std::to_string(j) + ")");
}

}  // namespace detail

/// Checks dimensions and finiteness and injects missing intercept columns.
/// `v_mean` and `v_var` may have zero columns, in which case they become
/// intercept-only designs.
inline ValidatedData validate_dataset(Vector y, Matrix x, Matrix v_mean, Matrix v_var) {
  const Index n = y.size();
  if (n < 2) throw DataError("n < 2");
  if (x.rows() != n || v_mean.rows() != n || v_var.rows() != n)
    throw DataError("dimension mismatch: all inputs need " + std::to_string(n) + " rows");
  if (x.cols() < 1) throw DataError("x needs at least one column");
  detail::require_finite(y, "y");
  detail::require_finite(x, "x");
  detail::require_finite(v_mean, "v_mean");
  detail::require_finite(v_var, "v_var");

  ValidatedData out;
  if (!detail::first_column_is_ones(v_mean)) {
    v_mean = detail::prepend_ones(v_mean);
    out.mean_intercept_added = true;
  }
  if (!detail::first_column_is_ones(v_var)) {
    v_var = detail::prepend_ones(v_var);
    out.var_intercept_added = true;
  }
  out.data = DataSet{std::move(y), std::move(x), std::move(v_mean), std::move(v_var)};
  return out;
}

inline ValidatedData validate_dataset(const DataSet& raw) {
  return validate_dataset(raw.y, raw.x, raw.v_mean, raw.v_var);
}

/// Indices of the min(m, p) columns of x with the largest absolute Pearson
/// correlation with y, returned in ascending order. Ties go to the lower
/// column index; zero-variance columns rank last.
inline std::vector<Index> marginal_screen(const DataSet& data, Index m) {
  if (m < 1) throw DataError("screening size m must be at least 1");
  const Index p = data.p();
  std::vector<Index> order(static_cast<std::size_t>(p));
  std::iota(order.begin(), order.end(), Index{0});
  if (m >= p) return order;

  const Vector yc = data.y.array() - data.y.mean();
  const double syy = yc.squaredNorm();
  // -1 marks a zero-variance column so it sorts below every real |corr|.
  std::vector<double> score(static_cast<std::size_t>(p), -1.0);
  for (Index k = 0; k < p; ++k) {
    const Vector xc = data.x.col(k).array() - data.x.col(k).mean();
    const double sxx = xc.squaredNorm();
    if (sxx <= 0.0) continue;
    score[static_cast<std::size_t>(k)] =
        syy > 0.0 ? std::abs(xc.dot(yc)) / std::sqrt(sxx * syy) : 0.0;
  }
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(m));
  std::sort(order.begin(), order.end());
  return order;
}

/// Restricts the sparse design to the given columns.
inline DataSet select_columns(const DataSet& data, const std::vector<Index>& columns) {
  DataSet out{data.y, Matrix(data.n(), static_cast<Index>(columns.size())), data.v_mean,
              data.v_var};
  for (std::size_t j = 0; j < columns.size(); ++j)
    out.x.col(static_cast<Index>(j)) = data.x.col(columns[j]);
  return out;
}

/// Centers and scales each column of x to unit sample standard deviation.
/// Constant columns are centered only.
struct Standardization {
  Vector center;
  Vector scale;

  Matrix apply(const Matrix& x) const {
    if (x.cols() != center.size()) throw DataError("standardization column mismatch");
    Matrix out = x;
    for (Index k = 0; k < x.cols(); ++k)
      out.col(k) = (x.col(k).array() - center(k)) / scale(k);
    return out;
  }
};

inline Standardization fit_standardization(const Matrix& x) {
  Standardization s{Vector(x.cols()), Vector(x.cols())};
  const double denom = std::max<double>(1.0, static_cast<double>(x.rows() - 1));
  for (Index k = 0; k < x.cols(); ++k) {
    s.center(k) = x.col(k).mean();
    const double sd = std::sqrt((x.col(k).array() - s.center(k)).square().sum() / denom);
    s.scale(k) = sd > 0.0 ? sd : 1.0;
  }
  return s;
}

}  // namespace hprobe
