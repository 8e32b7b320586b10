#pragma once

// Point predictions and heteroscedastic prediction intervals for new rows.

#include "hprobe/model_core.hpp"

#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <string>
#include <vector>

namespace hprobe {

/// Predictor values of a single new observation. `v_var` is ignored for
/// homoscedastic fits.
struct NewObservation {
  Vector x;
  Vector v_mean;
  Vector v_var;
};

struct PredictionInterval {
  double y_hat = 0.0;
  double var_parametric = 0.0;
  double sigma2_new = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double level = 0.0;
};

namespace detail {

inline void check_observation(const FitResult& fit, const NewObservation& obs) {
  const FitState& st = fit.state;
  if (obs.x.size() != st.beta.size())
    throw DataError("x_new has " + std::to_string(obs.x.size()) + " columns, model has " +
                    std::to_string(st.beta.size()));
  if (obs.v_mean.size() != st.phi.size())
    throw DataError("v_mean_new has " + std::to_string(obs.v_mean.size()) +
                    " columns, model has " + std::to_string(st.phi.size()));
  if (!fit.homoscedastic && obs.v_var.size() != st.omega.size())
    throw DataError("v_var_new has " + std::to_string(obs.v_var.size()) +
                    " columns, model has " + std::to_string(st.omega.size()));
}

inline double sparse_effect(const FitState& st, const Vector& x_new) {
  return x_new.dot(st.p_incl.cwiseProduct(st.beta));
}

}  // namespace detail

/// y_hat = v_new' phi + alpha0 x_new' (p o beta).
inline double predict_point(const FitResult& fit, const NewObservation& obs) {
  detail::check_observation(fit, obs);
  const FitState& st = fit.state;
  return obs.v_mean.dot(st.phi) + st.alpha0 * detail::sparse_effect(st, obs.x);
}

struct PredictiveVariance {
  double var_parametric = 0.0;
  double sigma2_new = 0.0;
};

/// Parameter uncertainty Z' Psi Z + V_w (Var(alpha0) + alpha0^2) with
/// Z = (v_new, W0_new) and V_w = x^2 (p S^2 + beta^2 p (1 - p)); plus the
/// modeled noise variance exp(-v_var_new' omega).
inline PredictiveVariance predictive_variance(const FitResult& fit, const NewObservation& obs) {
  detail::check_observation(fit, obs);
  const FitState& st = fit.state;
  const Index v = st.phi.size();
  if (fit.psi.rows() != v + 1 || fit.psi.cols() != v + 1)
    throw DataError("model psi has the wrong shape");

  Vector z(v + 1);
  z.head(v) = obs.v_mean;
  z(v) = detail::sparse_effect(st, obs.x);
  const Vector per_coef = st.p_incl.array() * st.s2.array() +
                          st.beta.array().square() * st.p_incl.array() *
                              (1.0 - st.p_incl.array());
  const double w_var = obs.x.array().square().matrix().dot(per_coef);
  const double var_alpha = fit.psi(v, v);

  PredictiveVariance out;
  out.var_parametric =
      std::max(0.0, z.dot(fit.psi * z)) + w_var * (var_alpha + st.alpha0 * st.alpha0);
  const double eta = fit.homoscedastic ? st.omega(0) : obs.v_var.dot(st.omega);
  out.sigma2_new = std::exp(-eta);
  return out;
}

/// Two-sided standard normal critical value for the given coverage level.
inline double normal_critical_value(double level) {
  if (!(level > 0.0 && level < 1.0)) throw DataError("level must lie in (0,1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), 0.5 * (1.0 + level));
}

/// Gaussian interval y_hat +/- z sqrt(var_parametric + sigma2_new).
inline PredictionInterval prediction_interval(const FitResult& fit, const NewObservation& obs,
                                              double level) {
  const double z = normal_critical_value(level);
  PredictionInterval pi;
  pi.y_hat = predict_point(fit, obs);
  const PredictiveVariance pv = predictive_variance(fit, obs);
  pi.var_parametric = pv.var_parametric;
  pi.sigma2_new = pv.sigma2_new;
  const double half = z * std::sqrt(pv.var_parametric + pv.sigma2_new);
  pi.lower = pi.y_hat - half;
  pi.upper = pi.y_hat + half;
  pi.level = level;
  return pi;
}

/// Intervals for every row of the given designs.
inline std::vector<PredictionInterval> prediction_intervals(const FitResult& fit,
                                                            const Matrix& x_new,
                                                            const Matrix& v_mean_new,
                                                            const Matrix& v_var_new,
                                                            double level) {
  const Index rows = x_new.rows();
  if (v_mean_new.rows() != rows || (!fit.homoscedastic && v_var_new.rows() != rows))
    throw DataError("new-data designs have different row counts");
  std::vector<PredictionInterval> out;
  out.reserve(static_cast<std::size_t>(rows));
  for (Index i = 0; i < rows; ++i) {
    NewObservation obs{x_new.row(i).transpose(), v_mean_new.row(i).transpose(),
                       fit.homoscedastic ? Vector() : Vector(v_var_new.row(i).transpose())};
    out.push_back(prediction_interval(fit, obs, level));
  }
  return out;
}

}  // namespace hprobe
