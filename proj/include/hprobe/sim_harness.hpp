#pragma once

// Simulation study: spatially correlated predictors on a sqrt(p) x sqrt(p)
// grid, clustered sparse signals, log-linear heteroscedastic noise calibrated
// to a signal-to-noise ratio, and the scoring of fitted models on fresh test
// draws.

#include "hprobe/ecm_engine.hpp"
#include "hprobe/model_core.hpp"
#include "hprobe/parallel.hpp"
#include "hprobe/prediction.hpp"

#include <Eigen/Eigenvalues>
#include <boost/math/tools/roots.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace hprobe::sim {

enum class PredictorKind { continuous, binary };

/// How the noise level is tied to the target signal-to-noise ratio.
///  - mean_precision:  mean_i s2_W / sigma_i^2       = snr
///  - mean_variance:   s2_W / mean_i sigma_i^2       = snr
/// Both agree when the variance design is intercept-only.
enum class SnrDefinition { mean_precision, mean_variance };

enum class Method { hprobe, probe };

inline const char* method_name(Method m) { return m == Method::hprobe ? "hprobe" : "probe"; }

struct SimConfig {
  int n = 400;
  int p = 400;  // perfect square
  int v = 3;    // intercept plus equal numbers of normal and Bernoulli columns
  std::uint64_t seed = 1;
  double pi_true = 0.05;
  double eta_beta = 0.8;
  double snr = 2.0;
  PredictorKind predictor_kind = PredictorKind::binary;
  double length_scale = 20.0;
  int replicate_count = 1;
  // Generate constant-variance outcomes (intercept-only variance design).
  bool homoscedastic_truth = false;
  SnrDefinition snr_definition = SnrDefinition::mean_variance;
  double level = 0.95;
  int max_iterations = 1000;
  int threads = 1;
};

inline int grid_side(int p) {
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(p))));
  return side * side == p ? side : -1;
}

inline void check_config(const SimConfig& c) {
  if (c.n < 2) throw DataError("n must be at least 2");
  if (c.p < 1 || grid_side(c.p) < 0) throw DataError("p must be a perfect square");
  if (c.v < 1 || (c.v - 1) % 2 != 0)
    throw DataError("v must be odd: an intercept plus equal numbers of normal and binary columns");
  if (!(c.pi_true > 0.0 && c.pi_true < 1.0)) throw DataError("pi_true must lie in (0,1)");
  if (std::lround(c.pi_true * c.p) < 1) throw DataError("p * pi_true must be at least 1");
  if (!(c.eta_beta > 0.0)) throw DataError("eta_beta must be positive");
  if (!(c.snr > 0.0)) throw DataError("snr must be positive");
  if (!(c.length_scale > 0.0)) throw DataError("length_scale must be positive");
  if (c.replicate_count < 1) throw DataError("replicate_count must be positive");
  if (!(c.level > 0.0 && c.level < 1.0)) throw DataError("level must lie in (0,1)");
  if (c.max_iterations < 1) throw DataError("max_iterations must be positive");
  if (c.threads < 1) throw DataError("threads must be positive");
}

// ---------------------------------------------------------------------------
// Seeding

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic child seed for stream `index` of `parent`.
inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) {
  return splitmix64(splitmix64(parent) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

inline double draw_normal(Rng& rng) {
  return boost::random::normal_distribution<double>(0.0, 1.0)(rng);
}

inline double draw_uniform(Rng& rng, double lo, double hi) {
  return boost::random::uniform_real_distribution<double>(lo, hi)(rng);
}

// ---------------------------------------------------------------------------
// Spatial structure

/// Squared-exponential covariance over the grid: exp(-||d_k - d_k'||^2 / ell^2)
/// with d_k = (k / side, k % side).
inline Matrix grid_covariance(int side, double length_scale) {
  if (side < 1) throw DataError("grid side must be positive");
  const Index p = static_cast<Index>(side) * side;
  Matrix cov(p, p);
  for (Index a = 0; a < p; ++a) {
    const double ra = static_cast<double>(a / side);
    const double ca = static_cast<double>(a % side);
    for (Index b = a; b < p; ++b) {
      const double dr = ra - static_cast<double>(b / side);
      const double dc = ca - static_cast<double>(b % side);
      const double value = std::exp(-(dr * dr + dc * dc) / (length_scale * length_scale));
      cov(a, b) = value;
      cov(b, a) = value;
    }
  }
  return cov;
}

/// Symmetric square root F with F F = cov, from the eigendecomposition.
/// Eigenvalues that are negative only through rounding are set to zero; a
/// materially indefinite matrix gets one retry with 1e-10 diagonal jitter.
inline Matrix symmetric_factor(const Matrix& cov) {
  auto attempt = [](const Matrix& m, Matrix& out) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(m);
    if (es.info() != Eigen::Success) return false;
    const Vector& lambda = es.eigenvalues();
    const double top = std::max(lambda.cwiseAbs().maxCoeff(), 1.0);
    if (lambda.minCoeff() < -1e-8 * top) return false;
    const Vector root = lambda.cwiseMax(0.0).cwiseSqrt();
    out = es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
    return true;
  };
  Matrix factor;
  if (attempt(cov, factor)) return factor;
  Matrix jittered = cov;
  jittered.diagonal().array() += 1e-10;
  if (attempt(jittered, factor)) return factor;
  throw NumericalError("covariance factorization failed after jitter");
}

/// Rows X_i = a_i 1 + F z_i with a_i ~ N(0, 3/4); binary predictors are the
/// indicator that the shifted continuous draw is below zero.
inline Matrix generate_predictors(int n, const Matrix& factor, PredictorKind kind, Rng& rng) {
  const Index p = factor.rows();
  Matrix z(n, p);
  Vector shift(n);
  for (Index i = 0; i < n; ++i) {
    shift(i) = std::sqrt(0.75) * draw_normal(rng);
    for (Index k = 0; k < p; ++k) z(i, k) = draw_normal(rng);
  }
  Matrix x = z * factor;  // factor is symmetric
  x.colwise() += shift;
  if (kind == PredictorKind::binary) x = (x.array() < 0.0).cast<double>();
  return x;
}

inline Matrix generate_predictors(const SimConfig& config) {
  check_config(config);
  Rng rng(config.seed);
  const Matrix factor = symmetric_factor(grid_covariance(grid_side(config.p), config.length_scale));
  return generate_predictors(config.n, factor, config.predictor_kind, rng);
}

struct Truth {
  Vector gamma;  // 0/1
  Vector beta;

  Vector effect() const { return gamma.cwiseProduct(beta); }
};

/// Exactly round(p pi) signals at the largest values of a correlated field on
/// the grid (ties to the lower index); beta_k ~ U(0, 2 eta_beta).
inline Truth generate_truth(const SimConfig& config, const Matrix& factor, Rng& rng) {
  const Index p = factor.rows();
  Vector z(p);
  for (Index k = 0; k < p; ++k) z(k) = draw_normal(rng);
  const Vector field = factor * z;
  std::vector<Index> order(static_cast<std::size_t>(p));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return field(a) > field(b); });
  const auto count = static_cast<std::size_t>(std::lround(config.pi_true * static_cast<double>(p)));
  Truth truth{Vector::Zero(p), Vector(p)};
  for (std::size_t j = 0; j < count; ++j) truth.gamma(order[j]) = 1.0;
  for (Index k = 0; k < p; ++k) truth.beta(k) = draw_uniform(rng, 0.0, 2.0 * config.eta_beta);
  return truth;
}

inline Truth generate_truth(const SimConfig& config) {
  check_config(config);
  Rng rng(config.seed);
  const Matrix factor = symmetric_factor(grid_covariance(grid_side(config.p), config.length_scale));
  return generate_truth(config, factor, rng);
}

/// Intercept, then (v-1)/2 standard normal columns, then (v-1)/2 Bernoulli(0.5).
inline Matrix generate_v(int n, int v, Rng& rng) {
  const int half = (v - 1) / 2;
  Matrix out(n, v);
  for (Index i = 0; i < n; ++i) {
    out(i, 0) = 1.0;
    for (int j = 0; j < half; ++j) out(i, 1 + j) = draw_normal(rng);
    for (int j = 0; j < half; ++j) out(i, 1 + half + j) = draw_uniform(rng, 0.0, 1.0) < 0.5 ? 1.0 : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noise calibration

inline double sample_variance(const Vector& v) {
  const double mean = v.mean();
  return (v.array() - mean).square().sum() / static_cast<double>(v.size() - 1);
}

/// Common omega_bar for every variance coefficient so that the requested
/// signal-to-noise ratio holds, using the sample variance s2_W of X(gamma o beta).
///
/// Solves mean_i exp(sign * omega_bar * S_i) = ratio with S_i the row sums of
/// v_var. The search walks away from 0 in the direction that moves the mean
/// toward the target, expanding geometrically, and fails if the function turns
/// before the target is bracketed.
inline double calibrate_omega_bar(const Matrix& x, const Truth& truth, const Matrix& v_var,
                                  double target_snr,
                                  SnrDefinition definition = SnrDefinition::mean_precision) {
  if (!(target_snr > 0.0)) throw DataError("target snr must be positive");
  const Vector signal = x * truth.effect();
  const double s2w = sample_variance(signal);
  if (!(s2w > 0.0)) throw DataError("signal X(gamma o beta) has zero variance");
  const Vector row_sums = v_var.rowwise().sum();

  const double sign = definition == SnrDefinition::mean_precision ? 1.0 : -1.0;
  const double ratio = definition == SnrDefinition::mean_precision ? target_snr / s2w
                                                                   : s2w / target_snr;
  auto mean_exp = [&](double w) {
    return (sign * w * row_sums.array()).exp().mean();
  };
  if (ratio == 1.0) return 0.0;

  const double slope0 = sign * row_sums.mean();
  if (slope0 == 0.0) throw NumericalError("omega_bar calibration: flat at zero");
  const double dir = (ratio > 1.0) == (slope0 > 0.0) ? 1.0 : -1.0;

  double prev_w = 0.0;
  double prev_f = 1.0;
  double step = 0.25;
  for (int expand = 0; expand < 64; ++expand, step *= 2.0) {
    const double w = dir * step;
    const double f = mean_exp(w);
    if (!std::isfinite(f)) break;
    const bool toward = ratio > 1.0 ? f > prev_f : f < prev_f;
    if (!toward) break;
    if ((ratio > 1.0 && f >= ratio) || (ratio < 1.0 && f <= ratio)) {
      auto objective = [&](double ww) { return std::log(mean_exp(ww)) - std::log(ratio); };
      boost::math::tools::eps_tolerance<double> tol(50);
      std::uintmax_t max_iter = 200;
      const double lo = std::min(prev_w, w);
      const double hi = std::max(prev_w, w);
      const auto [a, b] = boost::math::tools::toms748_solve(objective, lo, hi, tol, max_iter);
      return 0.5 * (a + b);
    }
    prev_w = w;
    prev_f = f;
  }
  throw NumericalError(
      "omega_bar calibration: target signal-to-noise ratio is not attainable (non-monotone "
      "bracket)");
}

/// y_i = X_i (gamma o beta) + eps_i with eps_i ~ N(0, exp(-omega_bar * sum_j v_ij)).
inline Vector generate_outcome(const Matrix& x, const Truth& truth, const Matrix& v_var,
                               double omega_bar, Rng& rng) {
  const Vector mean = x * truth.effect();
  const Vector sd = (-0.5 * omega_bar * v_var.rowwise().sum().array()).exp();
  Vector y(mean.size());
  for (Index i = 0; i < y.size(); ++i) y(i) = mean(i) + sd(i) * draw_normal(rng);
  return y;
}

// ---------------------------------------------------------------------------
// Scoring

struct Metrics {
  double rmse = std::numeric_limits<double>::quiet_NaN();
  double mad = std::numeric_limits<double>::quiet_NaN();
  double tpr = std::numeric_limits<double>::quiet_NaN();
  double fdr = std::numeric_limits<double>::quiet_NaN();
  double ecp = std::numeric_limits<double>::quiet_NaN();
  double mean_pi_length = std::numeric_limits<double>::quiet_NaN();
};

inline double median(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

struct Selection {
  double tpr = 0.0;
  double fdr = 0.0;
};

/// Selection is p_k > 0.5. FDR is 0 when nothing is selected.
inline Selection selection_rates(const Vector& gamma, const Vector& p_incl) {
  double true_count = 0.0, selected = 0.0, hits = 0.0, false_hits = 0.0;
  for (Index k = 0; k < gamma.size(); ++k) {
    const bool is_signal = gamma(k) != 0.0;
    const bool chosen = p_incl(k) > 0.5;
    true_count += is_signal;
    selected += chosen;
    hits += is_signal && chosen;
    false_hits += !is_signal && chosen;
  }
  return {true_count > 0.0 ? hits / true_count : 0.0, selected > 0.0 ? false_hits / selected : 0.0};
}

/// Test-set accuracy of alpha0 X(p o beta) against X(gamma o beta), selection
/// rates, and the coverage and mean length of prediction intervals for y.
inline Metrics compute_metrics(const FitResult& fit, const Truth& truth, const DataSet& test,
                               double level) {
  Metrics m;
  const Vector truth_signal = test.x * truth.effect();
  const Vector est_signal =
      fit.state.alpha0 * (test.x * fit.state.p_incl.cwiseProduct(fit.state.beta));
  const Vector err = est_signal - truth_signal;
  m.rmse = std::sqrt(err.squaredNorm() / static_cast<double>(err.size()));
  const Vector abs_err = err.cwiseAbs();
  m.mad = median(std::vector<double>(abs_err.data(), abs_err.data() + abs_err.size()));
  const Selection sel = selection_rates(truth.gamma, fit.state.p_incl);
  m.tpr = sel.tpr;
  m.fdr = sel.fdr;

  const auto intervals = prediction_intervals(fit, test.x, test.v_mean, test.v_var, level);
  double covered = 0.0, length = 0.0;
  for (Index i = 0; i < test.n(); ++i) {
    const auto& pi = intervals[static_cast<std::size_t>(i)];
    covered += (test.y(i) >= pi.lower && test.y(i) <= pi.upper);
    length += pi.upper - pi.lower;
  }
  m.ecp = covered / static_cast<double>(test.n());
  m.mean_pi_length = length / static_cast<double>(test.n());
  return m;
}

// ---------------------------------------------------------------------------
// Experiment loop

struct ReplicateData {
  Truth truth;
  DataSet train;
  DataSet test;
  double omega_bar = 0.0;
};

/// Generates the truth, a training set and an equally sized test set for one
/// replicate. All randomness derives from `replicate_seed`.
inline ReplicateData generate_replicate(const SimConfig& config, const Matrix& factor,
                                        std::uint64_t replicate_seed) {
  Rng truth_rng(derive_seed(replicate_seed, 1));
  Rng train_rng(derive_seed(replicate_seed, 2));
  Rng test_rng(derive_seed(replicate_seed, 3));

  ReplicateData rep;
  rep.truth = generate_truth(config, factor, truth_rng);
  auto draw_set = [&](Rng& rng, std::optional<double> omega_bar) {
    DataSet d;
    d.x = generate_predictors(config.n, factor, config.predictor_kind, rng);
    d.v_mean = generate_v(config.n, config.v, rng);
    d.v_var = d.v_mean;
    const Matrix noise_design =
        config.homoscedastic_truth ? Matrix(Matrix::Ones(config.n, 1)) : d.v_var;
    if (!omega_bar)
      omega_bar = calibrate_omega_bar(d.x, rep.truth, noise_design, config.snr,
                                      config.snr_definition);
    rep.omega_bar = *omega_bar;
    d.y = generate_outcome(d.x, rep.truth, noise_design, *omega_bar, rng);
    return d;
  };
  rep.train = draw_set(train_rng, std::nullopt);
  rep.test = draw_set(test_rng, rep.omega_bar);
  return rep;
}

struct ExperimentRow {
  int replicate = 0;
  std::uint64_t seed = 0;
  Method method = Method::hprobe;
  Metrics metrics;
  double omega_bar = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  bool converged = false;
  double runtime_seconds = 0.0;  // wall clock, not reproducible
  std::string error;
};

struct ExperimentResult {
  std::vector<ExperimentRow> rows;  // replicate-major, methods in request order
};

inline std::uint64_t replicate_seed(std::uint64_t master, int replicate) {
  return derive_seed(master, static_cast<std::uint64_t>(replicate));
}

/// Runs every replicate and method. Replicates are independent and may run
/// on several threads; the output does not depend on the thread count.
/// Failures inside a replicate are recorded on its rows.
inline ExperimentResult run_experiment(const SimConfig& config, const std::vector<Method>& methods) {
  check_config(config);
  if (methods.empty()) throw DataError("no methods requested");
  const Matrix factor =
      symmetric_factor(grid_covariance(grid_side(config.p), config.length_scale));

  ExperimentResult result;
  result.rows.resize(static_cast<std::size_t>(config.replicate_count) * methods.size());
  parallel_for(static_cast<std::size_t>(config.replicate_count), config.threads,
               [&](std::size_t r) {
    const int rep_index = static_cast<int>(r);
    const std::uint64_t seed = replicate_seed(config.seed, rep_index);
    ExperimentRow* rows = &result.rows[r * methods.size()];
    for (std::size_t m = 0; m < methods.size(); ++m) {
      rows[m].replicate = rep_index;
      rows[m].seed = seed;
      rows[m].method = methods[m];
    }
    ReplicateData data;
    try {
      data = generate_replicate(config, factor, seed);
    } catch (const std::exception& e) {
      for (std::size_t m = 0; m < methods.size(); ++m) rows[m].error = e.what();
      return;
    }
    for (std::size_t m = 0; m < methods.size(); ++m) {
      ExperimentRow& row = rows[m];
      row.omega_bar = data.omega_bar;
      FitConfig fc;
      fc.max_iterations = config.max_iterations;
      fc.homoscedastic = methods[m] == Method::probe;
      fc.seed = seed;
      try {
        const auto start = std::chrono::steady_clock::now();
        const FitResult fit = hprobe::fit(data.train, fc);
        row.runtime_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        row.iterations = fit.state.t;
        row.converged = fit.converged;
        row.metrics = compute_metrics(fit, data.truth, data.test, config.level);
      } catch (const std::exception& e) {
        row.error = e.what();
      }
    }
  });
  return result;
}

}  // namespace hprobe::sim
