#pragma once

// Log-linear variance model sigma_i^2 = exp(-v_i' omega).
//
// Given the mean parameters, the conditional posterior of omega has the
// multivariate log-gamma kernel
//
//   log f(omega) = c' H omega - kappa' exp(H omega)      (+ const)
//
// with H = [V_var ; c^{-1/2} sigma_omega^{-1} I], c = (1/2 .. , c ..) and
// kappa = (r2 / 2 .. , c ..). The density is concave in omega, so the MAP is
// found with BFGS from any finite starting point.

#include "hprobe/model_core.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>

namespace hprobe {

struct MlgPosterior {
  Matrix h;      // stacked design
  Vector c_vec;  // shape vector
  Vector kappa;  // rate vector, non-negative

  Index dim() const { return h.cols(); }
};

/// Builds the omega posterior from the variance design and the expected squared
/// residuals of each observation. With sigma_omega_inv == 0 the prior rows are
/// identically zero in H and only add a constant, so they are left out.
inline MlgPosterior make_mlg_posterior(const Matrix& v_var, const Vector& expected_sq_resid,
                                       const PriorConfig& prior) {
  check_prior(prior);
  const Index n = v_var.rows();
  const Index d = v_var.cols();
  if (expected_sq_resid.size() != n) throw DataError("residual length does not match v_var");
  if ((expected_sq_resid.array() < 0.0).any())
    throw DataError("expected squared residuals must be non-negative");
  const bool with_prior = prior.sigma_omega_inv > 0.0;
  const Index rows = with_prior ? n + d : n;

  MlgPosterior post{Matrix::Zero(rows, d), Vector(rows), Vector(rows)};
  post.h.topRows(n) = v_var;
  post.c_vec.head(n).setConstant(0.5);
  post.kappa.head(n) = 0.5 * expected_sq_resid;
  if (with_prior) {
    post.h.bottomRows(d).diagonal().setConstant(prior.sigma_omega_inv / std::sqrt(prior.c));
    post.c_vec.tail(d).setConstant(prior.c);
    post.kappa.tail(d).setConstant(prior.c);
  }
  return post;
}

namespace detail {

// exp() overflows a double just above 709.78.
inline constexpr double kMaxExponent = 700.0;

struct MlgEval {
  double value = 0.0;
  Vector gradient;
  bool clipped = false;
};

inline void check_mlg_shapes(const Vector& omega, const MlgPosterior& post) {
  if (omega.size() != post.dim())
    throw DataError("omega has length " + std::to_string(omega.size()) + ", expected " +
                    std::to_string(post.dim()));
}

// strict: throw on overflow; otherwise clip exponents and flag it.
inline MlgEval evaluate_mlg(const Vector& omega, const MlgPosterior& post, bool strict) {
  check_mlg_shapes(omega, post);
  Vector eta = post.h * omega;
  MlgEval out;
  for (Index i = 0; i < eta.size(); ++i) {
    if (!std::isfinite(eta(i)) || eta(i) > kMaxExponent) {
      if (strict)
        throw NumericalError("exp(H omega) overflows at row " + std::to_string(i));
      eta(i) = std::isnan(eta(i)) ? kMaxExponent : std::min(eta(i), kMaxExponent);
      out.clipped = true;
    } else if (eta(i) < -kMaxExponent) {
      eta(i) = -kMaxExponent;
      out.clipped = true;
    }
  }
  const Vector scaled = post.kappa.array() * eta.array().exp();
  out.value = post.c_vec.dot(eta) - scaled.sum();
  out.gradient = post.h.transpose() * (post.c_vec - scaled);
  return out;
}

}  // namespace detail

/// Log of the unnormalized omega posterior. Throws NumericalError naming the
/// row when exp(H omega) would overflow.
inline double mlg_log_density(const Vector& omega, const MlgPosterior& post) {
  return detail::evaluate_mlg(omega, post, true).value;
}

/// Analytic gradient H'(c - kappa o exp(H omega)).
inline Vector mlg_gradient(const Vector& omega, const MlgPosterior& post) {
  return detail::evaluate_mlg(omega, post, true).gradient;
}

/// Analytic Hessian -H' diag(kappa o exp(H omega)) H. Negative semidefinite.
inline Matrix mlg_hessian(const Vector& omega, const MlgPosterior& post) {
  detail::check_mlg_shapes(omega, post);
  const Vector eta = (post.h * omega).cwiseMin(detail::kMaxExponent);
  const Vector weight = post.kappa.array() * eta.array().exp();
  return -(post.h.transpose() * weight.asDiagonal() * post.h);
}

struct OmegaFit {
  Vector omega;
  // BFGS approximation to the inverse Hessian of -log f at the solution.
  // Positive definite, so the implied Hessian of log f is negative definite.
  Matrix inverse_hessian;
  double gradient_norm = 0.0;
  int iterations = 0;
  bool clipped = false;
};

struct OmegaOptions {
  double tol = 1e-6;
  int max_iterations = 200;
};

/// MAP of omega by BFGS with backtracking line search. Terminates when the
/// sup-norm of the gradient is at most `tol`.
inline OmegaFit omega_map(const Vector& init, const MlgPosterior& post,
                          const OmegaOptions& options = {}) {
  using detail::evaluate_mlg;
  const Index d = post.dim();
  if (init.size() != d) throw DataError("omega init has wrong length");
  // Precondition: a finite start.
  evaluate_mlg(init, post, true);

  // Negated objective so the rest reads as minimization.
  auto eval = [&](const Vector& w, bool& clipped) {
    auto e = evaluate_mlg(w, post, false);
    clipped = clipped || e.clipped;
    return std::pair<double, Vector>(-e.value, -e.gradient);
  };

  OmegaFit fit;
  Vector x = init;
  auto [f, g] = eval(x, fit.clipped);

  // Seed the inverse Hessian with the analytic curvature at the start.
  auto reset_inverse = [&](const Vector& at) {
    const Matrix curvature = -mlg_hessian(at, post);
    Eigen::LLT<Matrix> llt(curvature);
    if (llt.info() == Eigen::Success) {
      Matrix inv = llt.solve(Matrix::Identity(d, d));
      if (inv.allFinite()) return inv;
    }
    return Matrix(Matrix::Identity(d, d));
  };
  Matrix hinv = reset_inverse(x);

  int it = 0;
  for (; it < options.max_iterations; ++it) {
    if (g.lpNorm<Eigen::Infinity>() <= options.tol) break;
    Vector dir = -hinv * g;
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      hinv = reset_inverse(x);
      dir = -hinv * g;
      slope = g.dot(dir);
      if (!(slope < 0.0)) {
        hinv.setIdentity();
        dir = -g;
        slope = -g.squaredNorm();
      }
    }

    double step = 1.0;
    bool accepted = false;
    Vector x_new;
    double f_new = 0.0;
    Vector g_new;
    for (int halving = 0; halving < 60; ++halving, step *= 0.5) {
      x_new = x + step * dir;
      std::tie(f_new, g_new) = eval(x_new, fit.clipped);
      if (!std::isfinite(f_new)) continue;
      if (f_new <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      // Near the optimum f stops resolving; fall back on gradient decrease.
      if (std::abs(f_new - f) <= 1e-13 * (1.0 + std::abs(f)) &&
          g_new.lpNorm<Eigen::Infinity>() < g.lpNorm<Eigen::Infinity>()) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (hinv.isIdentity()) break;
      hinv.setIdentity();
      continue;
    }

    const Vector s = x_new - x;
    const Vector yv = g_new - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const double rho = 1.0 / sy;
      const Matrix eye = Matrix::Identity(d, d);
      hinv = (eye - rho * s * yv.transpose()) * hinv * (eye - rho * yv * s.transpose()) +
             rho * s * s.transpose();
    }
    x = x_new;
    f = f_new;
    g = g_new;
  }

  // Final evaluation without clipping; overflow here is a hard error.
  const Vector grad = mlg_gradient(x, post);
  fit.omega = x;
  fit.inverse_hessian = hinv;
  fit.gradient_norm = grad.lpNorm<Eigen::Infinity>();
  fit.iterations = it;
  if (!(fit.gradient_norm <= options.tol)) {
    std::ostringstream msg;
    msg << "omega optimizer did not converge after " << it << " iterations: |grad| = "
        << fit.gradient_norm << ", omega = [" << x.transpose() << "]";
    throw NumericalError(msg.str());
  }
  return fit;
}

struct VarianceEval {
  Vector sigma2;
  bool clamped = false;
};

/// sigma_i^2 = exp(-v_i' omega), clamped to [1e-300, 1e300] with a flag.
inline VarianceEval sigma2_from_omega(const Vector& omega, const Matrix& v_var) {
  if (omega.size() != v_var.cols()) throw DataError("omega length does not match v_var");
  if (!omega.allFinite()) throw DataError("omega must be finite");
  constexpr double lo = 1e-300;
  constexpr double hi = 1e300;
  VarianceEval out{(-(v_var * omega)).array().exp().matrix(), false};
  for (Index i = 0; i < out.sigma2.size(); ++i) {
    const double s = out.sigma2(i);
    if (!(s >= lo) || !(s <= hi)) {
      out.sigma2(i) = std::isnan(s) ? hi : std::clamp(s, lo, hi);
      out.clamped = true;
    }
  }
  return out;
}

/// E[(y_i - v_i' phi - alpha0 W_i0)^2] over inclusion indicators:
/// squared mean residual plus alpha0^2 Var(W_i0).
inline Vector expected_squared_residuals(const Vector& y, const Matrix& v_mean, const Vector& phi,
                                         double alpha0, const Vector& w0, const Vector& w0_var) {
  const Vector r = y - v_mean * phi - alpha0 * w0;
  return r.array().square() + alpha0 * alpha0 * w0_var.array();
}

}  // namespace hprobe
