#pragma once

// Parameter-expanded ECM fit of the sparse heteroscedastic regression.
//
// Each iteration runs the overall CM-step for (phi, alpha0), the variance
// CM-step for omega, one weighted 2x2 CM-step per sparse predictor, then the
// E-step: learning-rate damping, empirical Bayes inclusion probabilities and
// the moments of W0 = X (gamma o beta). The homoscedastic (PROBE) baseline is
// the same loop with an intercept-only variance design.

#include "hprobe/empirical_bayes.hpp"
#include "hprobe/model_core.hpp"
#include "hprobe/parallel.hpp"
#include "hprobe/variance_model.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <limits>
#include <sstream>
#include <string>

namespace hprobe {

/// First moment and variance of an aggregate effect W.
struct MomentPair {
  Vector w;
  Vector w_var;
};

/// W0_i = X_i (beta o p), Var(W0_i) = X_i^2 (beta^2 o p o (1 - p)).
inline MomentPair e_step_moments(const Matrix& x, const Vector& beta, const Vector& p_incl) {
  if (beta.size() != x.cols() || p_incl.size() != x.cols())
    throw DataError("e_step_moments: coefficient lengths do not match x");
  const Vector mean_coef = beta.cwiseProduct(p_incl);
  const Vector var_coef =
      beta.array().square() * p_incl.array() * (1.0 - p_incl.array());
  return {x * mean_coef, x.array().square().matrix() * var_coef};
}

/// Moments of W_k = X_{-k}(gamma o beta)_{-k} + V phi, obtained by removing
/// predictor k's contribution from W0. Variances are floored at 0.
inline MomentPair leave_one_out_moments(const MomentPair& w0, const Vector& x_k, double beta_k,
                                        double p_k, const Vector& v_phi_fitted) {
  const double mean_part = beta_k * p_k;
  const double var_part = beta_k * beta_k * p_k * (1.0 - p_k);
  MomentPair out;
  out.w = w0.w - mean_part * x_k + v_phi_fitted;
  out.w_var = (w0.w_var.array() - var_part * x_k.array().square()).cwiseMax(0.0).matrix();
  return out;
}

/// Weighted cross products defining one coordinate CM-step. `ww` uses second
/// moments E(W^2); `ww_first` uses squared first moments only.
struct CoordinateSums {
  double xx = 0.0;
  double xw = 0.0;
  double ww = 0.0;
  double ww_first = 0.0;
  double xy = 0.0;
  double wy = 0.0;
  bool degenerate = false;  // max_i E(W_i^2) below 1e-12
};

struct CoordinateEstimate {
  double beta = 0.0;
  double alpha = 1.0;
  double s2 = 0.0;
};

inline constexpr double kDegenerateSecondMoment = 1e-12;
inline constexpr double kMinReciprocalCondition = 1e-14;

/// Solves the 2x2 weighted normal equations and the sandwich A^-1 B A^-1.
inline CoordinateEstimate solve_coordinate(const CoordinateSums& s) {
  if (!(s.xx > 0.0))
    throw NumericalError("coordinate CM-step: predictor has zero weighted norm");
  if (s.degenerate) return {s.xy / s.xx, 1.0, 1.0 / s.xx};

  const double det = s.xx * s.ww - s.xw * s.xw;
  const double scale = s.xx * s.ww;
  if (!(scale > 0.0) || !(det > kMinReciprocalCondition * scale)) {
    std::ostringstream msg;
    msg << "coordinate CM-step: singular normal matrix (det / (a11 a22) = "
        << (scale > 0.0 ? det / scale : 0.0) << ")";
    throw NumericalError(msg.str());
  }
  // A^-1 = [ww, -xw; -xw, xx] / det
  const double beta = (s.ww * s.xy - s.xw * s.wy) / det;
  const double alpha = (s.xx * s.wy - s.xw * s.xy) / det;
  // First row of A^-1 applied to B = [xx, xw; xw, ww_first].
  const double r1 = s.ww / det;
  const double r2 = -s.xw / det;
  const double s2 = r1 * r1 * s.xx + 2.0 * r1 * r2 * s.xw + r2 * r2 * s.ww_first;
  return {beta, alpha, s2};
}

/// CM-step for one coordinate: regress y on Z_k = (x_k, W_k) with weights
/// sigma2_inv, using E(W) off the diagonal and E(W^2) on the W-diagonal.
inline CoordinateEstimate cm_step_coordinate(const Vector& x_k, const MomentPair& wk,
                                             const Vector& sigma2_inv, const Vector& y) {
  const Index n = y.size();
  if (x_k.size() != n || wk.w.size() != n || wk.w_var.size() != n || sigma2_inv.size() != n)
    throw DataError("cm_step_coordinate: length mismatch");
  CoordinateSums s;
  double max_second = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double u = sigma2_inv(i);
    const double w2 = wk.w(i) * wk.w(i);
    max_second = std::max(max_second, w2 + wk.w_var(i));
    s.xx += u * x_k(i) * x_k(i);
    s.xw += u * x_k(i) * wk.w(i);
    s.ww += u * (w2 + wk.w_var(i));
    s.ww_first += u * w2;
    s.xy += u * x_k(i) * y(i);
    s.wy += u * wk.w(i) * y(i);
  }
  s.degenerate = max_second < kDegenerateSecondMoment;
  return solve_coordinate(s);
}

struct OverallEstimate {
  Vector phi;
  double alpha0 = 1.0;
  Matrix psi;  // (v+1) x (v+1), last row/column belongs to alpha0
};

namespace detail {

// LDLT of a small symmetric matrix after an eigenvalue conditioning check.
inline Eigen::LDLT<Matrix> checked_ldlt(const Matrix& a, const std::string& what) {
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(a, Eigen::EigenvaluesOnly);
  const double hi = eig.eigenvalues().cwiseAbs().maxCoeff();
  const double lo = eig.eigenvalues().minCoeff();
  const double ratio = hi > 0.0 ? lo / hi : 0.0;
  if (eig.info() != Eigen::Success || !(ratio > kMinReciprocalCondition))
    throw NumericalError(what + " (eigenvalue ratio = " + std::to_string(ratio) + ")");
  return Eigen::LDLT<Matrix>(a);
}

}  // namespace detail

/// CM-step for (phi, alpha0): regress y on Z0 = (V, W0) with weights
/// sigma2_inv. psi is the sandwich covariance A^-1 B A^-1.
inline OverallEstimate cm_step_overall(const Matrix& v_mean, const MomentPair& w0,
                                       const Vector& sigma2_inv, const Vector& y) {
  const Index n = y.size();
  const Index v = v_mean.cols();
  if (v_mean.rows() != n || w0.w.size() != n || w0.w_var.size() != n || sigma2_inv.size() != n)
    throw DataError("cm_step_overall: length mismatch");

  const Matrix uv = sigma2_inv.asDiagonal() * v_mean;
  const Matrix vtv = v_mean.transpose() * uv;
  const Vector vty = uv.transpose() * y;

  const double max_second = (w0.w.array().square() + w0.w_var.array()).maxCoeff();
  OverallEstimate out;
  if (max_second < kDegenerateSecondMoment) {
    const Eigen::LDLT<Matrix> ldlt = detail::checked_ldlt(vtv, "overall CM-step: singular V'UV");
    out.phi = ldlt.solve(vty);
    out.alpha0 = 1.0;
    out.psi = Matrix::Zero(v + 1, v + 1);
    out.psi.topLeftCorner(v, v) = ldlt.solve(Matrix::Identity(v, v));
    return out;
  }

  Matrix a(v + 1, v + 1);
  a.topLeftCorner(v, v) = vtv;
  const Vector vtw = uv.transpose() * w0.w;
  a.topRightCorner(v, 1) = vtw;
  a.bottomLeftCorner(1, v) = vtw.transpose();
  const double ww_first = (sigma2_inv.array() * w0.w.array().square()).sum();
  const double ww_var = (sigma2_inv.array() * w0.w_var.array()).sum();
  a(v, v) = ww_first + ww_var;
  Matrix b = a;
  b(v, v) = ww_first;

  Vector rhs(v + 1);
  rhs.head(v) = vty;
  rhs(v) = (sigma2_inv.array() * w0.w.array() * y.array()).sum();

  const Eigen::LDLT<Matrix> ldlt = detail::checked_ldlt(a, "overall CM-step: singular normal matrix");
  const Vector theta = ldlt.solve(rhs);
  const Matrix ainv = ldlt.solve(Matrix::Identity(v + 1, v + 1));
  out.phi = theta.head(v);
  out.alpha0 = theta(v);
  out.psi = ainv * b * ainv;
  out.psi = 0.5 * (out.psi + out.psi.transpose());
  return out;
}

struct DampedUpdate {
  Vector beta;
  Vector s2;
};

/// Learning-rate damping with q = 1/(t+1): coefficients mix linearly,
/// variances mix in precision.
inline DampedUpdate apply_learning_rate(const Vector& prev_beta, const Vector& new_beta,
                                        const Vector& prev_s2, const Vector& new_s2, int t) {
  if (t < 1) throw DataError("learning rate needs t >= 1");
  const double q = 1.0 / (static_cast<double>(t) + 1.0);
  DampedUpdate out;
  out.beta = (1.0 - q) * prev_beta + q * new_beta;
  out.s2 = ((1.0 - q) * prev_s2.array().inverse() + q * new_s2.array().inverse()).inverse();
  return out;
}

/// Lower alpha-quantile of chi-square(1); the stopping threshold for CC.
inline double convergence_threshold(double alpha) {
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(1.0), alpha);
}

struct ConvergenceCheck {
  double cc = 0.0;
  bool done = false;
};

/// CC = log(n) max_i (W_i0 - W_i0_old)^2 / Var(W_i0); converged when CC is
/// below the chi-square(1) alpha-quantile. Rows with zero variance are
/// skipped unless they moved, which makes CC infinite.
inline ConvergenceCheck convergence_check(const Vector& w0_new, const Vector& w0_old,
                                          const Vector& w0_var_new, Index n, double alpha) {
  if (n < 2) throw DataError("convergence_check needs n >= 2");
  double worst = 0.0;
  for (Index i = 0; i < w0_new.size(); ++i) {
    const double diff2 = (w0_new(i) - w0_old(i)) * (w0_new(i) - w0_old(i));
    if (w0_var_new(i) > 0.0) {
      worst = std::max(worst, diff2 / w0_var_new(i));
    } else if (diff2 > 0.0) {
      worst = std::numeric_limits<double>::infinity();
      break;
    }
  }
  ConvergenceCheck out;
  out.cc = std::log(static_cast<double>(n)) * worst;
  out.done = out.cc < convergence_threshold(alpha);
  return out;
}

namespace detail {

// Coordinate sums for every k at once. W_k = base - b_k x_k with
// base = W0 + V phi and b_k = beta_k p_k, so the per-k products reduce to
// three matrix-vector products shared by all k.
struct AllCoordinateSums {
  Vector xx, xy, xbase;
  double base_base = 0.0;
  double base_y = 0.0;
  double u_var = 0.0;
  double max_abs_base = 0.0;
  double max_var = 0.0;
  Vector max_abs_x;
};

inline AllCoordinateSums coordinate_sums(const Matrix& x, const Vector& y, const Vector& u,
                                         const Vector& base, const Vector& w0_var) {
  AllCoordinateSums s;
  const Vector uy = u.cwiseProduct(y);
  const Vector ubase = u.cwiseProduct(base);
  s.xx = x.array().square().matrix().transpose() * u;
  s.xy = x.transpose() * uy;
  s.xbase = x.transpose() * ubase;
  s.base_base = ubase.dot(base);
  s.base_y = ubase.dot(y);
  s.u_var = u.dot(w0_var);
  s.max_abs_base = base.lpNorm<Eigen::Infinity>();
  s.max_var = w0_var.size() ? w0_var.maxCoeff() : 0.0;
  s.max_abs_x = x.cwiseAbs().colwise().maxCoeff().transpose();
  return s;
}

inline CoordinateSums sums_for(const AllCoordinateSums& all, Index k, double beta_k,
                               double p_k) {
  const double b = beta_k * p_k;
  const double var_k = beta_k * beta_k * p_k * (1.0 - p_k);
  CoordinateSums s;
  s.xx = all.xx(k);
  s.xy = all.xy(k);
  s.xw = all.xbase(k) - b * all.xx(k);
  s.wy = all.base_y - b * all.xy(k);
  s.ww_first = all.base_base - 2.0 * b * all.xbase(k) + b * b * all.xx(k);
  s.ww = s.ww_first + std::max(0.0, all.u_var - var_k * all.xx(k));
  const double bound_mean = all.max_abs_base + std::abs(b) * all.max_abs_x(k);
  s.degenerate = bound_mean * bound_mean + all.max_var < kDegenerateSecondMoment;
  return s;
}

inline std::string iteration_context(int t, const std::exception& e) {
  return "iteration " + std::to_string(t) + ": " + e.what();
}

}  // namespace detail

/// Fits the model. With `homoscedastic` set the variance design is replaced
/// by an intercept, which yields the PROBE baseline.
inline FitResult fit(const DataSet& data_in, const FitConfig& config,
                     const PriorConfig& prior = {}) {
  check_fit_config(config);
  check_prior(prior);
  const DataSet data = validate_dataset(data_in).data;
  const Index n = data.n();
  const Index p = data.p();
  const Matrix v_var = config.homoscedastic ? Matrix(Matrix::Ones(n, 1)) : data.v_var;
  const double pi0_floor = config.pi0_floor.value_or(1.0 / static_cast<double>(p));

  // sigma^2 starts at the sample variance of y.
  const double mean_y = data.y.mean();
  const double s2_y =
      (data.y.array() - mean_y).square().sum() / static_cast<double>(n - 1);
  if (!(s2_y > 0.0)) throw DataError("outcome has zero sample variance");

  FitResult result;
  FitState& st = result.state;
  st.beta = Vector::Zero(p);
  st.s2 = Vector::Ones(p);
  st.p_incl = Vector::Zero(p);
  st.phi = Vector::Zero(data.v());
  st.alpha0 = 1.0;
  st.omega = Vector::Zero(v_var.cols());
  st.omega(0) = -std::log(s2_y);
  st.w0 = Vector::Zero(n);
  st.w0_var = Vector::Zero(n);
  st.t = 0;

  Vector sigma2 = sigma2_from_omega(st.omega, v_var).sigma2;
  MomentPair last_overall_moments{st.w0, st.w0_var};
  const Matrix& x = data.x;

  for (int t = 1; t <= config.max_iterations; ++t) {
    try {
      // CM-step, overall partition: (phi, alpha0) then omega.
      Vector u = sigma2.cwiseInverse();
      const MomentPair w0_prev{st.w0, st.w0_var};
      const OverallEstimate overall = cm_step_overall(data.v_mean, w0_prev, u, data.y);
      st.phi = overall.phi;
      st.alpha0 = overall.alpha0;
      result.psi = overall.psi;
      last_overall_moments = w0_prev;

      const Vector r2 = expected_squared_residuals(data.y, data.v_mean, st.phi, st.alpha0,
                                                   w0_prev.w, w0_prev.w_var);
      const MlgPosterior post = make_mlg_posterior(v_var, r2, prior);
      st.omega = omega_map(st.omega, post).omega;
      sigma2 = sigma2_from_omega(st.omega, v_var).sigma2;
      u = sigma2.cwiseInverse();

      // CM-step, one partition per sparse predictor.
      const Vector base = w0_prev.w + data.v_mean * st.phi;
      const detail::AllCoordinateSums all =
          detail::coordinate_sums(x, data.y, u, base, w0_prev.w_var);
      Vector beta_hat(p);
      Vector s2_hat(p);
      parallel_for(static_cast<std::size_t>(p), config.threads, [&](std::size_t kk) {
        const auto k = static_cast<Index>(kk);
        const CoordinateEstimate est = solve_coordinate(
            detail::sums_for(all, k, st.beta(k), st.p_incl(k)));
        beta_hat(k) = est.beta;
        s2_hat(k) = est.s2;
      });
      if (!beta_hat.allFinite() || !(s2_hat.array() > 0.0).all())
        throw NumericalError("coordinate CM-step produced a non-finite estimate");

      // E-step (a): damping. The variance history starts at the first estimate.
      const Vector& prev_s2 = t == 1 ? s2_hat : st.s2;
      DampedUpdate damped = apply_learning_rate(st.beta, beta_hat, prev_s2, s2_hat, t);
      st.beta = std::move(damped.beta);
      st.s2 = std::move(damped.s2);

      // E-step (b): empirical Bayes inclusion probabilities.
      const Vector t_stats = test_statistics(st.beta, st.s2);
      const double pi0 = storey_pi0(two_sided_pvalues(t_stats), config.eb_lambda, pi0_floor);
      const InclusionProbs incl = inclusion_probs(t_stats, pi0, gaussian_kde_fit(t_stats));
      st.p_incl = config.monotone_inclusion ? monotone_in_abs_stat(t_stats, incl.p) : incl.p;
      result.clamped_probabilities = incl.clamped;

      // E-step (c): moments of W0.
      MomentPair w0_new = e_step_moments(x, st.beta, st.p_incl);
      const ConvergenceCheck conv =
          convergence_check(w0_new.w, st.w0, w0_new.w_var, n, config.convergence_alpha);
      st.w0 = std::move(w0_new.w);
      st.w0_var = std::move(w0_new.w_var);
      st.t = t;
      result.trace.push_back({t, conv.cc});

      if (st.p_incl.maxCoeff() <= 0.0) {
        result.converged = true;
        result.null_model = true;
        break;
      }
      if (conv.done) {
        result.converged = true;
        break;
      }
    } catch (const NumericalError& e) {
      throw NumericalError(detail::iteration_context(t, e));
    } catch (const DataError& e) {
      throw DataError(detail::iteration_context(t, e));
    }
  }

  // Posterior covariance of (phi, alpha0) under the final variances.
  const Vector u = sigma2.cwiseInverse();
  result.psi = cm_step_overall(data.v_mean, last_overall_moments, u, data.y).psi;
  result.sigma2 = (-(v_var * st.omega)).array().exp();
  result.homoscedastic = config.homoscedastic;
  return result;
}

}  // namespace hprobe
